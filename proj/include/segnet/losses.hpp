#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "segnet/ops.hpp"

namespace segnet {

enum class LossType { ce, bce, poly, focal };

struct LossKind {
  LossType type = LossType::focal;
  double gamma = 2.0;    // focal modulating exponent
  double alpha = 0.25;   // focal weight
  double epsilon = 1.0;  // poly-1 coefficient

  static LossKind parse(std::string_view s) {
    if (s == "ce") return {LossType::ce};
    if (s == "bce") return {LossType::bce};
    if (s == "poly") return {LossType::poly};
    if (s == "focal") return {LossType::focal};
    throw std::invalid_argument("unknown loss '" + std::string(s) + "' (expected ce, bce, poly or focal)");
  }

  std::string name() const {
    switch (type) {
      case LossType::ce: return "ce";
      case LossType::bce: return "bce";
      case LossType::poly: return "poly";
      case LossType::focal: return "focal";
    }
    return "?";
  }
};

/// Per-pixel class ids, N x H x W row-major.
struct LabelBatch {
  std::size_t n = 0, h = 0, w = 0;
  std::vector<std::uint8_t> labels;
};

inline constexpr double kLogFloor = 1e-12;

namespace detail {

template <typename T>
T clamped_log(T p) {
  return std::log(std::max(p, static_cast<T>(kLogFloor)));
}

inline void check_targets(const Shape& s, const LabelBatch& target) {
  require(target.n == s.n && target.h == s.h && target.w == s.w,
          "loss: target " + std::to_string(target.n) + "x" + std::to_string(target.h) + "x" +
              std::to_string(target.w) + " does not match logits " + s.str());
  require(target.labels.size() == s.n * s.h * s.w, "loss: target buffer has wrong length");
  for (std::size_t i = 0; i < target.labels.size(); ++i) {
    if (target.labels[i] >= s.c) {
      const std::size_t n = i / (s.h * s.w), r = i % (s.h * s.w);
      throw std::invalid_argument("loss: class id " + std::to_string(target.labels[i]) + " at pixel (n=" +
                                  std::to_string(n) + ", y=" + std::to_string(r / s.w) + ", x=" +
                                  std::to_string(r % s.w) + ") is outside [0, " + std::to_string(s.c) + ")");
    }
  }
}

}  // namespace detail

/// Mean segmentation loss over pixels (over pixels and classes for bce).
template <typename T>
Tensor<T> loss(const LossKind& kind, const Tensor<T>& logits, const LabelBatch& target) {
  const Shape s = logits.shape();
  detail::check_targets(s, target);
  const std::size_t plane = s.plane();
  const std::size_t K = s.c;
  const T alpha = static_cast<T>(kind.alpha);
  const T gamma = static_cast<T>(kind.gamma);
  const T eps = static_cast<T>(kind.epsilon);
  const T floor = static_cast<T>(kLogFloor);

  if (kind.type == LossType::bce) {
    const T inv = T(1) / static_cast<T>(s.numel());
    T acc = 0;
    std::vector<T> local(s.numel());  // dLoss/dlogit
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < K; ++c)
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t i = (n * K + c) * plane + p;
          const T prob = sigmoid_scalar(logits.data()[i]);
          const bool pos = target.labels[n * plane + p] == c;
          const T q = pos ? prob : T(1) - prob;  // probability of the true binary outcome
          acc += -detail::clamped_log(q);
          // d(-log q)/dz = prob - y, zero where the clamp is active
          local[i] = q > floor ? (prob - (pos ? T(1) : T(0))) * inv : T(0);
        }
    return make_result<T>("loss_bce", Shape{1, 1, 1, 1}, {acc * inv}, {logits},
                          [local = std::move(local)](Node<T>& self) {
                            auto& p = *self.parents[0];
                            const T g = self.grad[0];
                            for (std::size_t i = 0; i < local.size(); ++i) p.grad[i] += g * local[i];
                          });
  }

  const T inv = T(1) / static_cast<T>(s.n * plane);
  T acc = 0;
  std::vector<T> local(s.numel());
  std::vector<T> prob(K);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* z = logits.data().data() + n * K * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T mx = z[p];
      for (std::size_t c = 1; c < K; ++c) mx = std::max(mx, z[c * plane + p]);
      T denom = 0;
      for (std::size_t c = 0; c < K; ++c) {
        prob[c] = std::exp(z[c * plane + p] - mx);
        denom += prob[c];
      }
      for (std::size_t c = 0; c < K; ++c) prob[c] /= denom;
      const std::size_t t = target.labels[n * plane + p];
      const T pt = prob[t];
      const T nll = -detail::clamped_log(pt);
      // dL/dp_t for this pixel; dp_t/dz_j = p_t (delta_tj - p_j)
      const T dnll = pt > floor ? -T(1) / pt : T(0);
      T value = 0, dpt = 0;
      switch (kind.type) {
        case LossType::ce:
          value = nll;
          dpt = dnll;
          break;
        case LossType::poly:
          value = nll + eps * (T(1) - pt);
          dpt = dnll - eps;
          break;
        case LossType::focal: {
          const T mod = std::pow(T(1) - pt, gamma);
          value = alpha * mod * nll;
          const T dmod = gamma == T(0) ? T(0) : -gamma * std::pow(T(1) - pt, gamma - T(1));
          dpt = alpha * ((nll == T(0) ? T(0) : dmod * nll) + mod * dnll);
          break;
        }
        case LossType::bce: break;
      }
      acc += value;
      for (std::size_t c = 0; c < K; ++c)
        local[(n * K + c) * plane + p] = dpt * pt * ((c == t ? T(1) : T(0)) - prob[c]) * inv;
    }
  }
  return make_result<T>("loss", Shape{1, 1, 1, 1}, {acc * inv}, {logits},
                        [local = std::move(local)](Node<T>& self) {
                          auto& p = *self.parents[0];
                          const T g = self.grad[0];
                          for (std::size_t i = 0; i < local.size(); ++i) p.grad[i] += g * local[i];
                        });
}

}  // namespace segnet
