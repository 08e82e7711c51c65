#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "segnet/layers.hpp"

namespace segnet {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments keyed by parameter node, so a step over a subset of parameters
/// (frozen encoder) leaves the others' moments untouched.
template <typename T>
struct AdamState {
  AdamConfig cfg;
  std::size_t step = 0;
  std::unordered_map<const Node<T>*, std::vector<T>> m, v;
  std::unordered_map<const Node<T>*, std::size_t> updates;  // per-parameter bias-correction count
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One bias-corrected Adam update over `params`. Parameters without a grad
/// are treated as having a zero gradient.
template <typename T>
void adam_step(const ParamList<T>& params, AdamState<T>& state, double lr) {
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g)))
        throw NonFiniteGradient("adam_step: non-finite gradient in " + p.name);
    }
  }
  ++state.step;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  for (const auto& p : params) {
    Tensor<T> t = p.tensor;
    const Node<T>* key = &t.node();
    const double n = static_cast<double>(++state.updates[key]);
    const double c1 = 1.0 - std::pow(b1, n);
    const double c2 = 1.0 - std::pow(b2, n);
    auto& m = state.m[key];
    auto& v = state.v[key];
    if (m.empty()) {
      m.assign(t.numel(), T(0));
      v.assign(t.numel(), T(0));
    }
    const bool has = t.has_grad();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const T g = has ? t.grad()[i] : T(0);
      m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g);
      v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g * g);
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      t.data()[i] = static_cast<T>(t.data()[i] - lr * mhat / (std::sqrt(vhat) + state.cfg.eps));
    }
  }
}

struct LrSchedule {
  double lr0 = 1e-4;
  std::size_t total_epochs = 100;
  double eta_min = 1e-6;  // lr0 / 100

  static LrSchedule with_floor_ratio(double lr0, std::size_t total, double ratio = 0.01) {
    return {lr0, total, lr0 / (1.0 / ratio)};  // 1e-4 / 100 rounds to 1e-6 exactly; 1e-4 * 0.01 does not
  }
};

/// eta_min + (lr0 - eta_min) (1 + cos(pi epoch / T)) / 2
inline double cosine_lr(const LrSchedule& s, std::size_t epoch) {
  if (epoch > s.total_epochs)
    throw std::out_of_range("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(s.total_epochs) + "]");
  if (s.total_epochs == 0) return s.lr0;
  if (epoch == 0) return s.lr0;
  if (epoch == s.total_epochs) return s.eta_min;
  if (2 * epoch == s.total_epochs) return 0.5 * (s.lr0 + s.eta_min);
  const double phase = std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(s.total_epochs);
  return s.eta_min + 0.5 * (s.lr0 - s.eta_min) * (1.0 + std::cos(phase));
}

}  // namespace segnet
