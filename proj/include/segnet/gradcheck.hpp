#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "segnet/ops.hpp"
#include "segnet/rng.hpp"
#include "segnet/tensor.hpp"

namespace segnet {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

struct GradCheckOptions {
  double step = 1e-4;
  // Coordinates probed per parameter tensor; 0 probes every coordinate.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  // A probe whose +-step interval crosses a relu or max switch point does not
  // estimate the derivative; it is retried with the step divided by 10 down to
  // min_step, then replaced by another coordinate (skipped when exhaustive).
  bool avoid_kinks = true;
  double min_step = 1e-6;
  std::size_t max_redraws = 32;
};

struct GradCheckEntry {
  std::string name;
  std::size_t coords_checked = 0;
  std::size_t kinks_avoided = 0;
  double max_rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0;
  std::string worst_name;
  double tolerance = 0;
  bool passed = false;
  std::string failure;  // set when the check could not run (non-finite loss)
};

/// |a - b| / max(|a|, |b|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of `loss_fn` against central differences.
/// `loss_fn` must rebuild its graph from the current values of `params` on every call.
inline GradCheckReport grad_check(const std::vector<NamedParam<double>>& params,
                                  const std::function<Tensor<double>()>& loss_fn, double tol,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.tolerance = tol;

  for (const auto& p : params) {
    Tensor<double> t = p.tensor;
    t.zero_grad();
    t.set_requires_grad(true);
  }
  Tensor<double> loss = loss_fn();
  if (loss.numel() != 1 || !std::isfinite(loss.item())) {
    report.failure = loss.numel() != 1 ? "loss is not scalar" : "loss is not finite";
    return report;
  }
  backward(loss);

  auto evaluate = [&](std::uint64_t* signature) {
    if (signature) *signature = 0xCBF29CE484222325ULL;
    pattern::recorder = signature;
    const double v = loss_fn().item();
    pattern::recorder = nullptr;
    return v;
  };
  std::uint64_t base_signature = 0;
  if (opt.avoid_kinks) evaluate(&base_signature);

  Rng rng(opt.seed);
  for (const auto& p : params) {
    Tensor<double> t = p.tensor;
    std::vector<double> analytic = t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0);
    const bool sampled = opt.max_coords != 0 && opt.max_coords < t.numel();
    const std::size_t wanted = sampled ? opt.max_coords : t.numel();
    auto draw = [&] { return static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(t.numel()) - 1)); };

    GradCheckEntry entry{p.name, 0, 0, 0.0};
    for (std::size_t k = 0; k < wanted && report.failure.empty(); ++k) {
      std::size_t i = sampled ? draw() : k;
      double h = opt.step;
      for (std::size_t redraws = 0;;) {
        const double saved = t.data()[i];
        std::uint64_t sig_up = 0, sig_down = 0;
        t.data()[i] = saved + h;
        const double up = evaluate(opt.avoid_kinks ? &sig_up : nullptr);
        t.data()[i] = saved - h;
        const double down = evaluate(opt.avoid_kinks ? &sig_down : nullptr);
        t.data()[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
          report.failure = "non-finite loss while perturbing " + p.name;
          entry.max_rel_error = INFINITY;
          break;
        }
        if (opt.avoid_kinks && (sig_up != base_signature || sig_down != base_signature)) {
          ++entry.kinks_avoided;
          if (h / 10 >= opt.min_step * (1 - 1e-9)) {
            h /= 10;
            continue;
          }
          if (sampled && redraws++ < opt.max_redraws) {
            i = draw();
            h = opt.step;
            continue;
          }
          break;
        }
        const double numeric = (up - down) / (2 * h);
        entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic[i], numeric));
        ++entry.coords_checked;
        break;
      }
    }
    if (entry.coords_checked == 0 && t.numel() > 0 && report.failure.empty())
      report.failure = "every probe of " + p.name + " crossed a switch point";
    if (entry.max_rel_error >= report.worst || report.worst_name.empty()) {
      report.worst = std::max(report.worst, entry.max_rel_error);
      if (report.worst == entry.max_rel_error) report.worst_name = p.name;
    }
    report.entries.push_back(std::move(entry));
  }
  for (const auto& p : params) {
    Tensor<double> t = p.tensor;
    t.zero_grad();
  }
  report.passed = report.failure.empty() && report.worst < tol;
  return report;
}

}  // namespace segnet
