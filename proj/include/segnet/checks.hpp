#pragma once

#include <functional>
#include <string>
#include <vector>

#include "segnet/cbam.hpp"
#include "segnet/gradcheck.hpp"
#include "segnet/losses.hpp"
#include "segnet/models.hpp"
#include "segnet/skip_fusion.hpp"

namespace segnet {

/// One named finite-difference check at a fixed desk shape.
struct NamedCheck {
  std::string name;
  GradCheckReport report;
};

inline constexpr double kBlockTolerance = 1e-5;
inline constexpr double kModelTolerance = 1e-4;

namespace checks {

inline Tensor<double> random_tensor(Shape s, Rng& rng, bool requires_grad = true, double lo = -1, double hi = 1) {
  std::vector<double> v(s.numel());
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(s, std::move(v), requires_grad);
}

/// Values bounded away from zero so relu and max kinks stay further than the
/// finite-difference step from every probed coordinate.
inline Tensor<double> kink_free_tensor(Shape s, Rng& rng) {
  std::vector<double> v(s.numel());
  for (auto& x : v) {
    const double m = rng.uniform(0.1, 1.0);
    x = rng.bernoulli(0.5) ? m : -m;
  }
  return Tensor<double>(s, std::move(v), true);
}

/// Distinct values so every pooling window has a unique maximum.
inline Tensor<double> distinct_tensor(Shape s, Rng& rng) {
  std::vector<double> v(s.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i);
  for (std::size_t i = v.size(); i-- > 1;)
    std::swap(v[i], v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  return Tensor<double>(s, std::move(v), true);
}

/// sum(y * R) for a fixed random R, so every output coordinate contributes a
/// distinct weight to the scalar under test.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, false)));
}

inline NamedCheck run(const std::string& name, const std::vector<NamedParam<double>>& params,
                      const std::function<Tensor<double>()>& f, double tol = kBlockTolerance,
                      GradCheckOptions opt = {}) {
  return {name, grad_check(params, f, tol, opt)};
}

inline LabelBatch random_labels(std::size_t n, std::size_t h, std::size_t w, std::size_t k, Rng& rng) {
  LabelBatch y{n, h, w, {}};
  for (std::size_t i = 0; i < n * h * w; ++i)
    y.labels.push_back(static_cast<std::uint8_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1)));
  return y;
}

}  // namespace checks

inline std::vector<NamedCheck> primitive_checks(std::uint64_t seed = 0) {
  using namespace checks;
  Rng rng(seed);
  std::vector<NamedCheck> out;
  const Shape s{2, 3, 4, 4};

  {
    auto a = random_tensor(s, rng), b = random_tensor(s, rng);
    out.push_back(run("add", {{"a", a}, {"b", b}}, [=] { return weighted_sum(add(a, b), 1); }));
    out.push_back(run("mul", {{"a", a}, {"b", b}}, [=] { return weighted_sum(mul(a, b), 2); }));
    out.push_back(run("scale", {{"a", a}}, [=] { return weighted_sum(scale(a, 1.7), 3); }));
    out.push_back(run("sum", {{"a", a}}, [=] { return scale(sum(a), 0.3); }));
    out.push_back(run("mean", {{"a", a}}, [=] { return scale(mean(a), 2.0); }));
  }
  {
    auto x = random_tensor(s, rng);
    auto wc = random_tensor(Shape{2, 3, 1, 1}, rng);
    auto ws = random_tensor(Shape{2, 1, 4, 4}, rng);
    out.push_back(run("broadcast_mul.channel", {{"x", x}, {"w", wc}},
                      [=] { return weighted_sum(elementwise_mul_broadcast(x, wc), 4); }));
    out.push_back(run("broadcast_mul.spatial", {{"x", x}, {"w", ws}},
                      [=] { return weighted_sum(elementwise_mul_broadcast(x, ws), 5); }));
  }
  {
    auto x = kink_free_tensor(s, rng);
    out.push_back(run("relu", {{"x", x}}, [=] { return weighted_sum(relu(x), 6); }));
    auto z = random_tensor(s, rng, true, -3, 3);
    out.push_back(run("sigmoid", {{"x", z}}, [=] { return weighted_sum(sigmoid(z), 7); }));
    out.push_back(run("softmax_channels", {{"x", z}}, [=] { return weighted_sum(softmax_channels(z), 8); }));
  }
  {
    auto x = random_tensor(Shape{2, 3, 6, 6}, rng);
    auto w3 = random_tensor(Shape{4, 3, 3, 3}, rng);
    auto w1 = random_tensor(Shape{4, 3, 1, 1}, rng);
    auto b = random_tensor(Shape{1, 4, 1, 1}, rng);
    out.push_back(run("conv2d.same", {{"x", x}, {"w", w3}, {"b", b}},
                      [=] { return weighted_sum(conv2d(x, w3, b, 1, Padding::same), 9); }));
    out.push_back(run("conv2d.valid", {{"x", x}, {"w", w3}, {"b", b}},
                      [=] { return weighted_sum(conv2d(x, w3, b, 1, Padding::valid), 10); }));
    out.push_back(run("conv2d.stride2", {{"x", x}, {"w", w3}, {"b", b}},
                      [=] { return weighted_sum(conv2d(x, w3, b, 2, Padding::same), 11); }));
    out.push_back(run("conv2d.1x1.nobias", {{"x", x}, {"w", w1}},
                      [=] { return weighted_sum(conv2d(x, w1, 1, Padding::same), 12); }));
  }
  {
    auto x = distinct_tensor(s, rng);
    out.push_back(run("max_pool2d", {{"x", x}}, [=] { return weighted_sum(max_pool2d(x), 13); }));
    out.push_back(run("global_max_pool", {{"x", x}}, [=] { return weighted_sum(global_max_pool(x), 14); }));
    out.push_back(run("channel_max_pool", {{"x", x}}, [=] { return weighted_sum(channel_max_pool(x), 15); }));
    auto y = random_tensor(s, rng);
    out.push_back(run("avg_pool2d", {{"x", y}}, [=] { return weighted_sum(avg_pool2d(y), 16); }));
    out.push_back(run("global_avg_pool", {{"x", y}}, [=] { return weighted_sum(global_avg_pool(y), 17); }));
    out.push_back(run("channel_avg_pool", {{"x", y}}, [=] { return weighted_sum(channel_avg_pool(y), 18); }));
    out.push_back(run("upsample2x.nearest", {{"x", y}},
                      [=] { return weighted_sum(upsample2x(y, UpsampleMode::nearest), 19); }));
    out.push_back(run("upsample2x.bilinear", {{"x", y}},
                      [=] { return weighted_sum(upsample2x(y, UpsampleMode::bilinear), 20); }));
    auto z = random_tensor(Shape{2, 2, 4, 4}, rng);
    out.push_back(run("concat_channels", {{"a", y}, {"b", z}}, [=] { return weighted_sum(concat_channels(y, z), 21); }));
  }
  {
    auto x = random_tensor(Shape{3, 5, 1, 1}, rng);
    auto w = random_tensor(Shape{4, 5, 1, 1}, rng);
    auto b = random_tensor(Shape{1, 4, 1, 1}, rng);
    out.push_back(run("dense", {{"x", x}, {"w", w}, {"b", b}}, [=] { return weighted_sum(dense(x, w, b), 22); }));
    out.push_back(run("dense.nobias", {{"x", x}, {"w", w}}, [=] { return weighted_sum(dense(x, w), 23); }));
  }
  return out;
}

inline std::vector<NamedCheck> loss_checks(std::uint64_t seed = 0) {
  using namespace checks;
  Rng rng(seed);
  std::vector<NamedCheck> out;
  auto logits = random_tensor(Shape{1, 3, 4, 4}, rng, true, -2, 2);
  const LabelBatch y = random_labels(1, 4, 4, 3, rng);
  for (const char* name : {"ce", "bce", "poly", "focal"}) {
    const LossKind kind = LossKind::parse(name);
    out.push_back(run(std::string("loss.") + name, {{"logits", logits}}, [=] { return loss(kind, logits, y); }));
  }
  return out;
}

inline std::vector<NamedCheck> cbam_checks(std::uint64_t seed = 0) {
  using namespace checks;
  Rng rng(seed);
  std::vector<NamedCheck> out;
  const CbamBlock<double> block = make_cbam<double>(4, {}, rng);
  // Biases start at zero; give them values so their gradients are exercised off the origin.
  ParamList<double> params;
  block.collect(params, "cbam");
  for (auto& p : params)
    if (p.name.ends_with(".bias"))
      for (auto& v : p.tensor.data()) v = rng.uniform(-0.1, 0.1);
  auto x = random_tensor(Shape{1, 4, 4, 4}, rng);
  params.push_back({"input", x});
  out.push_back(run("cbam", params, [=] { return weighted_sum(cbam_forward(x, block), 31); }));
  out.push_back(run("cbam.channel_attention", params,
                    [=] { return weighted_sum(channel_attention(x, block.channel), 32); }));
  out.push_back(run("cbam.spatial_attention", params,
                    [=] { return weighted_sum(spatial_attention(x, block.spatial), 33); }));
  return out;
}

inline std::vector<NamedCheck> skip_checks(std::uint64_t seed = 0) {
  using namespace checks;
  Rng rng(seed);
  std::vector<NamedCheck> out;
  const std::size_t cn = 4, cn1 = 6;
  auto shallow = random_tensor(Shape{1, cn, 8, 8}, rng);
  auto deep = random_tensor(Shape{1, cn1, 4, 4}, rng);
  const std::pair<const char*, SkipMode> modes[] = {
      {"skip.plain", {false, false}}, {"skip.cbam", {false, true}}, {"skip.ave", {true, false}}, {"skip.ave+cbam", {true, true}}};
  for (const auto& [name, mode] : modes) {
    const SkipBlock<double> block = make_skip_block<double>(mode, cn, cn1, {}, rng);
    ParamList<double> params;
    block.collect(params, name);
    for (auto& p : params)
      if (p.name.ends_with(".bias"))
        for (auto& v : p.tensor.data()) v = rng.uniform(-0.1, 0.1);
    params.push_back({"shallow", shallow});
    if (mode.ave) params.push_back({"deep", deep});
    out.push_back(run(name, params, [=] { return weighted_sum(skip_forward(shallow, deep, block), 41); }));
  }
  return out;
}

/// Full unet Base+Ave+CBAM (base width 4, K = 3) at 1x1x16x16, sampling
/// coordinates per parameter tensor.
inline std::vector<NamedCheck> model_checks(std::uint64_t seed = 0, std::size_t coords_per_tensor = 8) {
  using namespace checks;
  Rng rng(seed);
  EncoderConfig enc;
  enc.base_width = 4;
  const SegModel<double> model = build_model<double>(ModelVariant{Family::unet, true, true}, enc, 3, seed);
  ParamList<double> params = model.params();
  for (auto& p : params)
    if (p.name.ends_with(".bias"))
      for (auto& v : p.tensor.data()) v = rng.uniform(-0.05, 0.05);
  auto x = random_tensor(Shape{1, 1, 16, 16}, rng, true, 0, 1);
  params.push_back({"input", x});
  GradCheckOptions opt;
  opt.max_coords = coords_per_tensor;
  opt.seed = seed;
  return {run("model.unet-full", params, [=] { return weighted_sum(forward(model, x), 51); }, kModelTolerance, opt)};
}

/// Scopes: primitive, loss, cbam, skip, model, all.
inline std::vector<NamedCheck> gradcheck_scope(const std::string& scope, std::uint64_t seed = 0) {
  std::vector<NamedCheck> out;
  auto append = [&](std::vector<NamedCheck> v) {
    for (auto& c : v) out.push_back(std::move(c));
  };
  const bool all = scope == "all";
  if (all || scope == "primitive") append(primitive_checks(seed));
  if (all || scope == "loss") append(loss_checks(seed));
  if (all || scope == "cbam") append(cbam_checks(seed));
  if (all || scope == "skip") append(skip_checks(seed));
  if (all || scope == "model") append(model_checks(seed));
  if (out.empty()) throw std::invalid_argument("unknown gradcheck scope '" + scope + "'");
  return out;
}

}  // namespace segnet
