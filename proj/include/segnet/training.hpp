#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <future>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "segnet/data.hpp"
#include "segnet/losses.hpp"
#include "segnet/metrics.hpp"
#include "segnet/models.hpp"
#include "segnet/optim.hpp"

namespace segnet {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t unfreeze_epoch = 50;
  std::size_t validate_from = 50;
  std::size_t batch_size = 4;
  LossKind loss;
  double lr0 = 1e-4;
  double eta_min_ratio = 0.01;
  AdamConfig adam;
  std::uint64_t seed = 0;
  ModelVariant variant{Family::unet, true, true};
  EncoderConfig enc;
  CbamConfig cbam;
  std::size_t num_classes = kNumClasses;
  bool augment = false;
  double noise_sigma = 0.02;
  std::size_t folds = 5;
  std::size_t fold = 0;  // validation fold for single runs and ablations

  LrSchedule schedule() const { return LrSchedule::with_floor_ratio(lr0, epochs, eta_min_ratio); }

  void validate() const {
    if (unfreeze_epoch > epochs)
      throw std::invalid_argument("unfreeze_epoch " + std::to_string(unfreeze_epoch) + " exceeds epochs " +
                                  std::to_string(epochs));
    if (batch_size == 0) throw std::invalid_argument("batch_size must be at least 1");
    if (folds < 2) throw std::invalid_argument("folds must be at least 2");
    if (fold >= folds) throw std::invalid_argument("fold index outside [0, folds)");
    enc.validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["epochs"] = c.epochs;
  j["unfreeze_epoch"] = c.unfreeze_epoch;
  j["validate_from"] = c.validate_from;
  j["batch_size"] = c.batch_size;
  j["loss"] = {{"kind", c.loss.name()}, {"gamma", c.loss.gamma}, {"alpha", c.loss.alpha}, {"epsilon", c.loss.epsilon}};
  j["lr0"] = c.lr0;
  j["eta_min"] = c.schedule().eta_min;
  j["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}};
  j["seed"] = c.seed;
  j["variant"] = c.variant.id();
  j["encoder"] = {{"depth", c.enc.depth},
                  {"convs_per_block", c.enc.convs_per_block},
                  {"base_width", c.enc.base_width},
                  {"width_cap", c.enc.width_cap},
                  {"in_channels", c.enc.in_channels},
                  {"cnn_blocks", c.enc.cnn_blocks},
                  {"cnn_insert_after", c.enc.cnn_insert_after}};
  j["cbam"] = {{"reduction", c.cbam.reduction}, {"spatial_width", c.cbam.spatial_width}};
  j["num_classes"] = c.num_classes;
  j["augment"] = c.augment;
  j["noise_sigma"] = c.noise_sigma;
  j["folds"] = c.folds;
  j["fold"] = c.fold;
  return j;
}

struct EpochRow {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
  std::optional<double> val_iou;
  std::optional<double> val_map;
  std::optional<double> val_accuracy;
};

struct RunLog {
  std::vector<EpochRow> rows;
  std::vector<std::string> first_batch_ids;  // ids of the very first optimizer batch
  double wall_seconds = 0;
};

/// Carries the parameters at the end of the last completed epoch.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, std::vector<std::vector<float>> last_good)
      : std::runtime_error(what), last_good(std::move(last_good)) {}
  std::vector<std::vector<float>> last_good;
};

/// Optional observation points used by tests.
struct TrainHooks {
  std::function<void(std::size_t epoch, const SegModel<float>&)> on_epoch_end;
  std::function<void(std::size_t epoch, std::size_t batch, float& loss)> on_batch_loss;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

/// Stacks samples into an N x 1 x H x W batch (intensity / 255) plus labels.
inline std::pair<Tensor<float>, LabelBatch> make_batch(const std::vector<const Sample*>& samples) {
  const std::size_t h = samples.front()->height, w = samples.front()->width;
  Tensor<float> x(Shape{samples.size(), 1, h, w});
  LabelBatch y{samples.size(), h, w, {}};
  y.labels.reserve(samples.size() * h * w);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const Sample& s = *samples[n];
    if (s.height != h || s.width != w) throw std::invalid_argument("batch: samples differ in size");
    for (std::size_t i = 0; i < h * w; ++i) x.data()[n * h * w + i] = static_cast<float>(s.image[i]) / 255.0f;
    y.labels.insert(y.labels.end(), s.mask.begin(), s.mask.end());
  }
  return {x, y};
}

}  // namespace detail

/// Argmax over channel logits, per pixel of one batch element.
inline std::vector<std::uint8_t> argmax_mask(const Tensor<float>& logits, std::size_t n) {
  const Shape s = logits.shape();
  const std::size_t plane = s.plane();
  std::vector<std::uint8_t> out(plane);
  const float* z = logits.data().data() + n * s.c * plane;
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.c; ++c)
      if (z[c * plane + p] > z[best * plane + p]) best = c;
    out[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

inline std::vector<std::uint8_t> predict_mask(const SegModel<float>& model, const Sample& s) {
  auto [x, y] = detail::make_batch({&s});
  return argmax_mask(forward(model, x), 0);
}

struct Evaluation {
  MetricsReport report;
  std::vector<ConfusionMatrix> per_image;
  double mean_loss = 0;
};

/// Per-image confusion matrices, aggregated into a report. `loss_kind`, when
/// given, also yields the mean loss over the samples.
inline Evaluation evaluate(const SegModel<float>& model, const std::vector<const Sample*>& samples,
                           const std::optional<LossKind>& loss_kind = std::nullopt) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  Evaluation ev;
  double loss_acc = 0;
  for (const Sample* s : samples) {
    auto [x, y] = detail::make_batch({s});
    const Tensor<float> logits = forward(model, x);
    if (loss_kind) loss_acc += loss(*loss_kind, logits, y).item();
    ev.per_image.push_back(confusion(argmax_mask(logits, 0), s->mask, model.num_classes));
  }
  ev.report = make_report(ev.per_image);
  ev.mean_loss = loss_acc / static_cast<double>(samples.size());
  return ev;
}

inline Evaluation evaluate(const SegModel<float>& model, const Dataset& data, const std::vector<std::string>& ids,
                           const std::optional<LossKind>& loss_kind = std::nullopt) {
  if (ids.empty()) throw std::invalid_argument("evaluate: empty id list");
  std::vector<Sample> loaded;
  loaded.reserve(ids.size());
  for (const auto& id : ids) loaded.push_back(data.load(id));
  std::vector<const Sample*> ptrs;
  for (const auto& s : loaded) ptrs.push_back(&s);
  return evaluate(model, ptrs, loss_kind);
}

struct TrainResult {
  SegModel<float> model;  // final parameters
  std::vector<std::vector<float>> best;  // parameters with the best validation IoU (final if never validated)
  RunLog log;
};

/// Runs the epoch loop over in-memory samples.
inline TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set, const std::vector<std::string>& train_ids = {},
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty() && cfg.epochs > 0) throw std::invalid_argument("train: empty training set");
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult r{build_model<float>(cfg.variant, cfg.enc, cfg.num_classes, derive_seed(cfg.seed, 1), cfg.cbam), {}, {}};
  SegModel<float>& model = r.model;
  AdamState<float> adam;
  adam.cfg = cfg.adam;
  const LrSchedule sched = cfg.schedule();
  double best_iou = -1;
  std::vector<std::vector<float>> last_good = model.snapshot();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    set_encoder_frozen(model, epoch < cfg.unfreeze_epoch);
    const double lr = cosine_lr(sched, epoch);

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(derive_seed(cfg.seed, 2, epoch));
    for (std::size_t i = order.size(); i-- > 1;)
      std::swap(order[i], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i)))]);

    double loss_sum = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Sample> augmented;
      std::vector<const Sample*> batch;
      augmented.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = train_set[order[i]];
        if (cfg.augment) {
          Rng arng(derive_seed(cfg.seed, 3 + epoch, order[i]));
          const AugmentSpec spec = AugmentSpec::random(arng, cfg.noise_sigma);
          augmented.push_back(augment(s, spec, arng.next_u64()));
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&s);
        }
      }
      if (epoch == 0 && batch_index == 0) {
        for (std::size_t i = start; i < end; ++i)
          r.log.first_batch_ids.push_back(order[i] < train_ids.size() ? train_ids[order[i]] : std::to_string(order[i]));
      }

      auto [x, y] = detail::make_batch(batch);
      for (auto& p : model.params()) p.tensor.zero_grad();
      Tensor<float> l = loss(cfg.loss, forward(model, x), y);
      float value = l.item();
      if (hooks.on_batch_loss) hooks.on_batch_loss(epoch, batch_index, value);
      if (!std::isfinite(value))
        throw NonFiniteLoss("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_index),
                            last_good);
      backward(l);
      try {
        adam_step(model.trainable_params(), adam, lr);
      } catch (const NonFiniteGradient& e) {
        throw NonFiniteLoss(std::string(e.what()) + " at epoch " + std::to_string(epoch), last_good);
      }
      loss_sum += static_cast<double>(value) * static_cast<double>(batch.size());
    }
    for (auto& p : model.params()) p.tensor.zero_grad();

    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(train_set.size());
    if (epoch >= cfg.validate_from && !val_set.empty()) {
      std::vector<const Sample*> vs;
      for (const auto& s : val_set) vs.push_back(&s);
      const Evaluation ev = evaluate(model, vs, cfg.loss);
      row.val_loss = ev.mean_loss;
      row.val_iou = ev.report.mean_iou.value;
      row.val_map = ev.report.map.value;
      row.val_accuracy = ev.report.accuracy;
      if (ev.report.mean_iou.value > best_iou) {
        best_iou = ev.report.mean_iou.value;
        r.best = model.snapshot();
      }
    }
    r.log.rows.push_back(row);
    last_good = model.snapshot();
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model);
  }
  set_encoder_frozen(model, false);
  if (r.best.empty()) r.best = model.snapshot();
  r.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string log_csv(const RunLog& log) {
  std::ostringstream out;
  out << "epoch,lr,train_loss,val_loss,val_iou,val_map,val_accuracy\n";
  for (const auto& r : log.rows) {
    out << r.epoch << ',' << detail::fmt_double(r.lr) << ',' << detail::fmt_double(r.train_loss) << ','
        << detail::fmt_opt(r.val_loss) << ',' << detail::fmt_opt(r.val_iou) << ',' << detail::fmt_opt(r.val_map) << ','
        << detail::fmt_opt(r.val_accuracy) << '\n';
  }
  return out.str();
}

inline std::string metrics_csv_header(std::size_t k) {
  std::string h = "id,iou_mean,map,accuracy,iou_mean_with_background";
  const auto labels = class_labels(k);
  for (const auto& l : labels) h += ",iou_" + l;
  for (std::size_t c = 1; c < k; ++c) h += ",ap_" + labels[c];
  return h + "\n";
}

inline std::string metrics_csv_row(const std::string& id, const MetricsReport& r) {
  std::string row = id + "," + detail::fmt_double(r.mean_iou.value) + "," + detail::fmt_double(r.map.value) + "," +
                    detail::fmt_double(r.accuracy) + "," + detail::fmt_double(r.mean_iou_all.value);
  for (const auto& v : r.iou) row += "," + detail::fmt_opt(v);
  for (std::size_t c = 1; c < r.ap.size(); ++c) row += "," + detail::fmt_opt(r.ap[c]);
  return row + "\n";
}

/// Rows of ids resolved against a dataset, in order.
inline std::vector<Sample> load_samples(const Dataset& data, const std::vector<std::string>& ids) {
  std::vector<Sample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(data.load(id));
  return out;
}

struct RunOutcome {
  RunLog log;
  MetricsReport report;  // final model on the validation ids (training ids when there are none)
  std::size_t params = 0;
};

/// Trains on `train_ids`, validates on `val_ids`, and writes the run directory:
/// config.json, log.csv, checkpoints/{best,final}.segm, metrics.csv, confusion.csv.
inline RunOutcome train_run(const TrainConfig& cfg, const Dataset& data, const std::vector<std::string>& train_ids,
                            const std::vector<std::string>& val_ids, const std::filesystem::path& out_dir,
                            const TrainHooks& hooks = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "checkpoints");
  write_file((out_dir / "config.json").string(), to_json(cfg).dump(2) + "\n");
  const std::vector<Sample> train_set = load_samples(data, train_ids);
  const std::vector<Sample> val_set = load_samples(data, val_ids);

  TrainResult result;
  try {
    result = train(cfg, train_set, val_set, train_ids, hooks);
  } catch (const NonFiniteLoss& e) {
    SegModel<float> m = build_model<float>(cfg.variant, cfg.enc, cfg.num_classes, 0, cfg.cbam);
    m.restore(e.last_good);
    save_checkpoint(m, (out_dir / "checkpoints" / "last_good.segm").string());
    throw;
  }
  write_file((out_dir / "log.csv").string(), log_csv(result.log));
  save_checkpoint(result.model, (out_dir / "checkpoints" / "final.segm").string());
  {
    auto snapshot = result.model.snapshot();
    result.model.restore(result.best);
    save_checkpoint(result.model, (out_dir / "checkpoints" / "best.segm").string());
    result.model.restore(snapshot);
  }

  const std::vector<Sample>& eval_set = val_set.empty() ? train_set : val_set;
  std::vector<const Sample*> ptrs;
  for (const auto& s : eval_set) ptrs.push_back(&s);
  RunOutcome out{result.log, {}, count_params(result.model)};
  if (!ptrs.empty()) {
    out.report = evaluate(result.model, ptrs).report;
    write_file((out_dir / "metrics.csv").string(),
               metrics_csv_header(cfg.num_classes) + metrics_csv_row(val_set.empty() ? "train" : "val", out.report));
    write_file((out_dir / "confusion.csv").string(), render_confusion(out.report.cm).csv);
  }
  return out;
}

/// Train/validation id lists for one fold of the dataset.
inline std::pair<std::vector<std::string>, std::vector<std::string>> fold_ids(const Dataset& data, std::size_t k,
                                                                             std::size_t fold, std::uint64_t seed) {
  const FoldSplit split = kfold_split(data.size(), k, seed);
  std::pair<std::vector<std::string>, std::vector<std::string>> out;
  for (std::size_t i : split.training(fold)) out.first.push_back(data.entries()[i].id);
  for (std::size_t i : split.validation(fold)) out.second.push_back(data.entries()[i].id);
  return out;
}

namespace detail {

/// Runs jobs with at most `jobs` in flight; results keep submission order.
template <typename R>
std::vector<R> run_bounded(std::vector<std::function<R()>> tasks, std::size_t jobs) {
  std::vector<R> results;
  results.reserve(tasks.size());
  if (jobs <= 1) {
    for (auto& t : tasks) results.push_back(t());
    return results;
  }
  for (std::size_t start = 0; start < tasks.size(); start += jobs) {
    std::vector<std::future<R>> running;
    for (std::size_t i = start; i < std::min(tasks.size(), start + jobs); ++i)
      running.push_back(std::async(std::launch::async, tasks[i]));
    for (auto& f : running) results.push_back(f.get());
  }
  return results;
}

}  // namespace detail

struct Stat {
  double mean = 0;
  double stddev = 0;  // population
};

inline Stat mean_std(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.stddev += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(v.size()));
  return s;
}

struct KFoldResult {
  std::vector<RunOutcome> folds;
  Stat iou, map, accuracy;
};

/// One independent run per fold under out_dir/fold<k>/, plus aggregate.csv.
inline KFoldResult run_kfold(const TrainConfig& cfg, const Dataset& data, const std::filesystem::path& out_dir,
                             std::size_t jobs = 1) {
  cfg.validate();
  const FoldSplit split = kfold_split(data.size(), cfg.folds, cfg.seed);
  std::vector<std::function<RunOutcome()>> tasks;
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    tasks.push_back([&, f] {
      TrainConfig fc = cfg;
      fc.fold = f;
      fc.seed = derive_seed(cfg.seed, 100, f);
      std::vector<std::string> tr, va;
      for (std::size_t i : split.training(f)) tr.push_back(data.entries()[i].id);
      for (std::size_t i : split.validation(f)) va.push_back(data.entries()[i].id);
      for (const auto& id : va)
        if (std::find(tr.begin(), tr.end(), id) != tr.end())
          throw std::logic_error("run_kfold: validation id " + id + " leaked into training for fold " + std::to_string(f));
      return train_run(fc, data, tr, va, out_dir / ("fold" + std::to_string(f)));
    });
  }
  KFoldResult res;
  res.folds = detail::run_bounded<RunOutcome>(std::move(tasks), jobs);
  std::vector<double> ious, maps, accs;
  for (const auto& f : res.folds) {
    ious.push_back(f.report.mean_iou.value);
    maps.push_back(f.report.map.value);
    accs.push_back(f.report.accuracy);
  }
  res.iou = mean_std(ious);
  res.map = mean_std(maps);
  res.accuracy = mean_std(accs);
  std::ostringstream csv;
  csv << "metric,mean,stddev\n";
  csv << "IoU," << detail::fmt_double(res.iou.mean) << ',' << detail::fmt_double(res.iou.stddev) << '\n';
  csv << "mAP," << detail::fmt_double(res.map.mean) << ',' << detail::fmt_double(res.map.stddev) << '\n';
  csv << "Accu," << detail::fmt_double(res.accuracy.mean) << ',' << detail::fmt_double(res.accuracy.stddev) << '\n';
  write_file((out_dir / "aggregate.csv").string(), csv.str());
  return res;
}

struct AblationRow {
  ModelVariant variant;
  double iou = 0, map = 0, accuracy = 0;
  std::size_t params = 0;
  double wall_seconds = 0;
  std::vector<std::string> first_batch_ids;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "Method,IoU,mAP,Accu,Params,WallSeconds\n";
  for (const auto& r : rows)
    out << r.variant.table_name() << ',' << detail::fmt_double(r.iou) << ',' << detail::fmt_double(r.map) << ','
        << detail::fmt_double(r.accuracy) << ',' << r.params << ',' << detail::fmt_double(r.wall_seconds) << '\n';
  return out.str();
}

inline std::string ablation_text(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %8s %8s %8s %10s %9s\n", "Method", "IoU", "mAP", "Accu", "Params", "Wall[s]");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-16s %8.4f %8.4f %8.4f %10zu %9.1f\n", r.variant.table_name().c_str(), r.iou,
                  r.map, r.accuracy, r.params, r.wall_seconds);
    out << line;
  }
  return out.str();
}

/// Trains the four variants of one family on the same split, seed and schedule.
inline std::vector<AblationRow> run_ablation(const TrainConfig& base, Family family, const Dataset& data,
                                             const std::filesystem::path& out_dir, std::size_t jobs = 1) {
  base.validate();
  const auto [train_ids, val_ids] = fold_ids(data, base.folds, base.fold, base.seed);
  std::vector<std::function<AblationRow()>> tasks;
  for (const ModelVariant v : ModelVariant::ladder(family)) {
    tasks.push_back([&, v] {
      TrainConfig c = base;
      c.variant = v;
      const RunOutcome o = train_run(c, data, train_ids, val_ids, out_dir / v.id());
      return AblationRow{v, o.report.mean_iou.value, o.report.map.value, o.report.accuracy, o.params,
                         o.log.wall_seconds, o.log.first_batch_ids};
    });
  }
  std::vector<AblationRow> rows = detail::run_bounded<AblationRow>(std::move(tasks), jobs);
  write_file((out_dir / "ablation.csv").string(), ablation_csv(rows));
  write_file((out_dir / "ablation.txt").string(), ablation_text(rows));
  return rows;
}

}  // namespace segnet
