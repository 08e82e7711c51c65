// Command-line front end: data generation, training, evaluation, prediction,
// ablation, k-fold runs and gradient self-checks.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "segnet/checks.hpp"
#include "segnet/training.hpp"

namespace fs = std::filesystem;
using namespace segnet;

namespace {

enum Exit { kOk = 0, kVerifyFailed = 1, kUsage = 2, kNumerical = 3 };

class PathError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// RGB per class: Background, Thi, Thin, Dash, Arrow, Numer.
constexpr std::uint8_t kPalette[kNumClasses][3] = {
    {255, 255, 255}, {0, 0, 0}, {128, 128, 128}, {0, 0, 255}, {255, 0, 0}, {0, 160, 0}};

std::uint64_t default_seed() {
  if (const char* env = std::getenv("SEGSEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw CLI::ValidationError("SEGSEED", std::string("not an unsigned integer: ") + env);
    }
  }
  return 0;
}

void require_dir(const fs::path& p, const char* what) {
  if (!fs::is_directory(p)) throw PathError(std::string(what) + " not found: " + p.string());
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw PathError(std::string(what) + " not found: " + p.string());
}

struct TrainFlags {
  std::string data;
  std::string out;
  std::string variant = "unet-full";
  std::string loss = "focal";
  std::size_t epochs = 100;
  std::size_t unfreeze = 50;
  long validate_from = -1;  // defaults to the unfreeze epoch
  std::size_t batch = 4;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  std::size_t depth = 4;
  std::size_t base = 8;
  bool augment = false;
  std::size_t folds = 5;
  std::size_t fold = 0;
  std::string train_ids;
  std::size_t limit = 0;
  std::size_t jobs = 1;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_variant) {
  cmd->add_option("--data", f.data, "dataset directory")->required();
  cmd->add_option("--out", f.out, "output directory")->required();
  if (with_variant) cmd->add_option("--variant", f.variant, "model variant, e.g. unet-full, cnn-base");
  cmd->add_option("--loss", f.loss, "ce, bce, poly or focal");
  cmd->add_option("--epochs", f.epochs);
  cmd->add_option("--unfreeze-epoch", f.unfreeze, "first epoch with the encoder trainable");
  cmd->add_option("--validate-from", f.validate_from, "first validated epoch (default: unfreeze epoch)");
  cmd->add_option("--batch", f.batch)->check(CLI::PositiveNumber);
  cmd->add_option("--lr", f.lr, "initial learning rate");
  cmd->add_option("--seed", f.seed, "seed (default: $SEGSEED or 0)");
  cmd->add_option("--depth", f.depth, "encoder depth");
  cmd->add_option("--base", f.base, "base channel width");
  cmd->add_flag("--augment", f.augment, "on-the-fly crop/mirror/rotate/noise");
  cmd->add_option("--folds", f.folds);
  cmd->add_option("--fold", f.fold, "validation fold");
}

TrainConfig resolve(const TrainFlags& f) {
  TrainConfig c;
  c.epochs = f.epochs;
  c.unfreeze_epoch = f.unfreeze;
  c.validate_from = f.validate_from < 0 ? f.unfreeze : static_cast<std::size_t>(f.validate_from);
  c.batch_size = f.batch;
  c.loss = LossKind::parse(f.loss);
  c.lr0 = f.lr;
  c.seed = f.seed;
  c.variant = ModelVariant::parse(f.variant);
  c.enc.depth = f.depth;
  c.enc.base_width = f.base;
  c.enc.convs_per_block.assign(f.depth, 2);
  c.augment = f.augment;
  c.folds = f.folds;
  c.fold = f.fold;
  c.validate();
  return c;
}

void print_config(const std::string& command, const nlohmann::json& j) {
  std::cout << command << " " << j.dump() << "\n";
}

std::vector<std::string> ids_from(const Dataset& data, const std::string& list) {
  if (list.empty()) {
    std::vector<std::string> ids;
    for (const auto& e : data.entries()) ids.push_back(e.id);
    return ids;
  }
  require_file(list, "id list");
  return read_id_list(list);
}

int cmd_train(const TrainFlags& f) {
  TrainConfig cfg = resolve(f);
  print_config("train", to_json(cfg));
  require_dir(f.data, "dataset directory");
  const Dataset data(f.data);
  std::vector<std::string> tr, va;
  if (!f.train_ids.empty()) {
    tr = ids_from(data, f.train_ids);
  } else {
    std::tie(tr, va) = fold_ids(data, cfg.folds, cfg.fold, cfg.seed);
  }
  if (f.limit > 0 && tr.size() > f.limit) tr.resize(f.limit);
  const RunOutcome o = train_run(cfg, data, tr, va, f.out);
  const auto& last = o.log.rows.empty() ? EpochRow{} : o.log.rows.back();
  std::printf("trained %zu epochs on %zu samples in %.1f s; final train loss %.6f\n", o.log.rows.size(), tr.size(),
              o.log.wall_seconds, last.train_loss);
  std::printf("%s: IoU %.4f  mAP %.4f  Accu %.4f\n", va.empty() ? "train" : "validation", o.report.mean_iou.value,
              o.report.map.value, o.report.accuracy);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Line-drawing segmentation with attention-fused U-Net skips"};
  app.require_subcommand(1);
  bool inject_fault = false;
  app.add_flag("--inject-sigmoid-grad-fault", inject_fault)->group("");

  std::uint64_t seed_default = 0;
  try {
    seed_default = default_seed();
  } catch (const CLI::Error& e) {
    std::cerr << e.what() << "\n";
    return kUsage;
  }

  // gen-data
  GenerateOptions gen;
  gen.seed = seed_default;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset");
  gen_cmd->add_option("--n", gen.n, "number of samples")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--size", gen.size, "image side in pixels")->check(CLI::Range(8, 4096));
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--folds", gen.folds);
  gen_cmd->add_option("--out", gen_out)->required();

  // train
  TrainFlags tf;
  tf.seed = seed_default;
  auto* train_cmd = app.add_subcommand("train", "train one model and write a run directory");
  add_train_flags(train_cmd, tf, true);
  train_cmd->add_option("--train-ids", tf.train_ids, "train on these ids without validation");
  train_cmd->add_option("--limit", tf.limit, "use at most this many training ids");

  // eval
  std::string eval_ckpt, eval_data, eval_ids, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", eval_ckpt)->required();
  eval_cmd->add_option("--data", eval_data)->required();
  eval_cmd->add_option("--ids", eval_ids, "id list (default: every id)");
  eval_cmd->add_option("--out", eval_out, "directory for metrics.csv and confusion.csv");

  // predict
  std::string pred_ckpt, pred_data, pred_ids, pred_out;
  auto* pred_cmd = app.add_subcommand("predict", "write predicted masks and overlays");
  pred_cmd->add_option("--ckpt", pred_ckpt)->required();
  pred_cmd->add_option("--data", pred_data)->required();
  pred_cmd->add_option("--ids", pred_ids, "id list (default: every id)");
  pred_cmd->add_option("--out", pred_out)->required();

  // ablate
  TrainFlags af;
  af.seed = seed_default;
  std::string family = "unet";
  auto* ablate_cmd = app.add_subcommand("ablate", "train the four variants of a family");
  add_train_flags(ablate_cmd, af, false);
  ablate_cmd->add_option("--family", family)->check(CLI::IsMember({"unet", "cnn"}));
  ablate_cmd->add_option("--jobs", af.jobs)->check(CLI::PositiveNumber);

  // kfold
  TrainFlags kf;
  kf.seed = seed_default;
  auto* kfold_cmd = app.add_subcommand("kfold", "k-fold cross-validation of one variant");
  add_train_flags(kfold_cmd, kf, true);
  kfold_cmd->add_option("--jobs", kf.jobs)->check(CLI::PositiveNumber);

  // gradcheck
  std::string scope = "all";
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks in double precision");
  grad_cmd->add_option("--scope", scope)->check(CLI::IsMember({"primitive", "loss", "cbam", "skip", "model", "all"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  fault::flip_sigmoid_grad = inject_fault;

  try {
    if (*gen_cmd) {
      print_config("gen-data", {{"n", gen.n}, {"size", gen.size}, {"seed", gen.seed}, {"folds", gen.folds}, {"out", gen_out}});
      generate_dataset(gen, gen_out);
      std::printf("wrote %zu samples to %s\n", gen.n, gen_out.c_str());
      return kOk;
    }
    if (*train_cmd) return cmd_train(tf);
    if (*eval_cmd) {
      print_config("eval", {{"ckpt", eval_ckpt}, {"data", eval_data}, {"ids", eval_ids}, {"out", eval_out}});
      require_file(eval_ckpt, "checkpoint");
      require_dir(eval_data, "dataset directory");
      const Dataset data(eval_data);
      const SegModel<float> model = load_checkpoint<float>(eval_ckpt);
      const Evaluation ev = evaluate(model, data, ids_from(data, eval_ids));
      std::printf("IoU %.4f  mAP %.4f  Accu %.4f  (IoU incl. background %.4f, %zu images)\n",
                  ev.report.mean_iou.value, ev.report.map.value, ev.report.accuracy, ev.report.mean_iou_all.value,
                  ev.report.images);
      std::cout << render_confusion(ev.report.cm).text;
      const fs::path out = eval_out.empty() ? fs::path(eval_ckpt).parent_path() : fs::path(eval_out);
      fs::create_directories(out);
      write_file((out / "metrics.csv").string(),
                 metrics_csv_header(model.num_classes) + metrics_csv_row(fs::path(eval_ckpt).stem().string(), ev.report));
      write_file((out / "confusion.csv").string(), render_confusion(ev.report.cm).csv);
      return kOk;
    }
    if (*pred_cmd) {
      print_config("predict", {{"ckpt", pred_ckpt}, {"data", pred_data}, {"ids", pred_ids}, {"out", pred_out}});
      require_file(pred_ckpt, "checkpoint");
      require_dir(pred_data, "dataset directory");
      const Dataset data(pred_data);
      const SegModel<float> model = load_checkpoint<float>(pred_ckpt);
      fs::create_directories(pred_out);
      for (const auto& id : ids_from(data, pred_ids)) {
        const Sample s = data.load(id);
        const auto mask = predict_mask(model, s);
        GrayImage img{s.width, s.height, static_cast<unsigned>(model.num_classes - 1), mask};
        write_file((fs::path(pred_out) / (id + "_pred.pgm")).string(), encode_pgm(img));
        std::vector<std::uint8_t> rgb(mask.size() * 3);
        for (std::size_t i = 0; i < mask.size(); ++i)
          for (int ch = 0; ch < 3; ++ch) rgb[3 * i + ch] = kPalette[mask[i] % kNumClasses][ch];
        write_file((fs::path(pred_out) / (id + "_overlay.ppm")).string(), encode_ppm(s.width, s.height, rgb));
        std::size_t agree = 0;
        for (std::size_t i = 0; i < mask.size(); ++i) agree += mask[i] == s.mask[i];
        std::printf("%s: %.4f pixel agreement\n", id.c_str(), static_cast<double>(agree) / static_cast<double>(mask.size()));
      }
      return kOk;
    }
    if (*ablate_cmd) {
      const Family fam = family == "unet" ? Family::unet : Family::cnn;
      af.variant = fam == Family::unet ? "unet-base" : "cnn-base";
      TrainConfig cfg = resolve(af);
      nlohmann::json j = to_json(cfg);
      j.erase("variant");
      j["family"] = family;
      j["jobs"] = af.jobs;
      print_config("ablate", j);
      require_dir(af.data, "dataset directory");
      const Dataset data(af.data);
      const auto rows = run_ablation(cfg, fam, data, af.out, af.jobs);
      std::cout << ablation_text(rows);
      return kOk;
    }
    if (*kfold_cmd) {
      TrainConfig cfg = resolve(kf);
      nlohmann::json j = to_json(cfg);
      j["jobs"] = kf.jobs;
      print_config("kfold", j);
      require_dir(kf.data, "dataset directory");
      const Dataset data(kf.data);
      const KFoldResult r = run_kfold(cfg, data, kf.out, kf.jobs);
      std::printf("IoU %.4f +- %.4f  mAP %.4f +- %.4f  Accu %.4f +- %.4f over %zu folds\n", r.iou.mean, r.iou.stddev,
                  r.map.mean, r.map.stddev, r.accuracy.mean, r.accuracy.stddev, r.folds.size());
      return kOk;
    }
    if (*grad_cmd) {
      print_config("gradcheck", {{"scope", scope}, {"fault", inject_fault}});
      const auto results = gradcheck_scope(scope);
      const NamedCheck* worst = nullptr;
      bool ok = true;
      for (const auto& c : results) {
        const bool pass = c.report.passed;
        ok = ok && pass;
        std::printf("%-4s %-28s max rel err %.3e (tol %.0e)%s%s\n", pass ? "ok" : "FAIL", c.name.c_str(), c.report.worst,
                    c.report.tolerance, c.report.failure.empty() ? "" : "  ", c.report.failure.c_str());
        if (!pass && (!worst || c.report.worst > worst->report.worst)) worst = &c;
      }
      if (!ok) {
        std::printf("gradcheck failed; worst offender %s (%s, rel err %.3e)\n", worst->name.c_str(),
                    worst->report.worst_name.c_str(), worst->report.worst);
        return kVerifyFailed;
      }
      std::printf("gradcheck passed: %zu checks\n", results.size());
      return kOk;
    }
  } catch (const PathError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NonFiniteLoss& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const NonFiniteGradient& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kOk;
}
