#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "segnet/gradcheck.hpp"
#include "segnet/ops.hpp"
#include "segnet/rng.hpp"

namespace segnet {

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

/// He-uniform weights, bound sqrt(6 / fan_in). Values are drawn in double so a
/// float and a double build from one seed agree up to rounding.
template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> values(shape.numel());
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(shape, std::move(values), true);
}

/// Square convolution with same padding and stride 1.
template <typename T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when the layer is bias-free

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, Rng& rng, bool with_bias = true)
      : weight(he_uniform<T>(Shape{out, in, k, k}, in * k * k, rng)) {
    if (with_bias) bias = Tensor<T>(Shape{1, out, 1, 1}, T(0), true);
  }

  std::size_t in_channels() const { return weight.shape().c; }
  std::size_t out_channels() const { return weight.shape().n; }
  std::size_t kernel() const { return weight.shape().h; }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, 1, Padding::same); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }

  static std::size_t param_count(std::size_t in, std::size_t out, std::size_t k, bool with_bias = true) {
    return in * out * k * k + (with_bias ? out : 0);
  }
};

template <typename T>
std::size_t count_params(const ParamList<T>& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  return total;
}

}  // namespace segnet
