#pragma once

#include <optional>
#include <string>

#include "segnet/cbam.hpp"

namespace segnet {

struct SkipMode {
  bool ave = false;   // dual-pool branch: avg-pooled shallow features fused with the deeper level
  bool cbam = false;  // attention over the fused (or, without ave, the shallow) features

  friend bool operator==(const SkipMode&, const SkipMode&) = default;
};

/// Skip connection between encoder level n (C_n channels at H x W) and the
/// decoder. In every mode the block emits C_n channels at H x W.
template <typename T>
struct SkipBlock {
  SkipMode mode;
  std::size_t level_channels = 0;  // C_n
  std::size_t next_channels = 0;   // C_{n+1}

  Conv2d<T> avg_conv1, avg_conv2;  // 3x3, C_n -> C_n, on avg_pool2d(E_n)
  Conv2d<T> fuse;                  // 1x1, C_n + C_{n+1} -> C_{n+1}
  std::optional<CbamBlock<T>> attention;
  Conv2d<T> reduce;                // 1x1, C_n + attended width -> C_n

  bool is_identity() const { return !mode.ave && !mode.cbam; }

  /// Width of the tensor that is concatenated back onto E_n.
  std::size_t attended_channels() const { return mode.ave ? next_channels : level_channels; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    if (mode.ave) {
      avg_conv1.collect(out, prefix + ".avg_conv1");
      avg_conv2.collect(out, prefix + ".avg_conv2");
      fuse.collect(out, prefix + ".fuse");
    }
    if (attention) attention->collect(out, prefix + ".cbam");
    if (!is_identity()) reduce.collect(out, prefix + ".reduce");
  }
};

/// Closed-form parameter total of one skip block.
inline std::size_t skip_param_count(SkipMode mode, std::size_t cn, std::size_t cn1,
                                    const CbamConfig& cfg = {}) {
  if (!mode.ave && !mode.cbam) return 0;
  std::size_t total = 0;
  const std::size_t attended = mode.ave ? cn1 : cn;
  if (mode.ave) {
    total += 2 * Conv2d<double>::param_count(cn, cn, 3);
    total += Conv2d<double>::param_count(cn + cn1, cn1, 1);
  }
  if (mode.cbam) total += cbam_param_count(attended, cfg);
  total += Conv2d<double>::param_count(cn + attended, cn, 1);
  return total;
}

template <typename T>
SkipBlock<T> make_skip_block(SkipMode mode, std::size_t cn, std::size_t cn1, const CbamConfig& cfg,
                             Rng& rng) {
  SkipBlock<T> b;
  b.mode = mode;
  b.level_channels = cn;
  b.next_channels = cn1;
  if (b.is_identity()) return b;
  if (mode.ave) {
    b.avg_conv1 = Conv2d<T>(cn, cn, 3, rng);
    b.avg_conv2 = Conv2d<T>(cn, cn, 3, rng);
    b.fuse = Conv2d<T>(cn + cn1, cn1, 1, rng);
  }
  if (mode.cbam) b.attention = make_cbam<T>(b.attended_channels(), cfg, rng);
  b.reduce = Conv2d<T>(cn + b.attended_channels(), cn, 1, rng);
  return b;
}

/// X = conv1x1([relu(conv(relu(conv(avg_pool2d(E_n))))); E_{n+1}])
template <typename T>
Tensor<T> dualpool_fuse(const Tensor<T>& shallow, const Tensor<T>& deep, const SkipBlock<T>& p) {
  const Shape s = shallow.shape();
  const Shape d = deep.shape();
  if (d.n != s.n || 2 * d.h != s.h || 2 * d.w != s.w) {
    throw std::invalid_argument("dualpool_fuse: deeper level is " + d.str() +
                                ", expected half the resolution of " + s.str());
  }
  if (s.c != p.level_channels || d.c != p.next_channels) {
    throw std::invalid_argument("dualpool_fuse: channel counts " + std::to_string(s.c) + "/" +
                                std::to_string(d.c) + " do not match block " +
                                std::to_string(p.level_channels) + "/" +
                                std::to_string(p.next_channels));
  }
  const Tensor<T> a = relu(p.avg_conv2(relu(p.avg_conv1(avg_pool2d(shallow)))));
  return p.fuse(concat_channels(a, deep));
}

/// F'_n for the block's mode. `deep` (E_{n+1}) is only read when the dual-pool
/// branch is enabled.
template <typename T>
Tensor<T> skip_forward(const Tensor<T>& shallow, const Tensor<T>* deep, const SkipBlock<T>& p) {
  if (p.is_identity()) return shallow;
  if (shallow.shape().c != p.level_channels) {
    throw std::invalid_argument("skip_forward: input has " + std::to_string(shallow.shape().c) +
                                " channels, block expects " + std::to_string(p.level_channels));
  }
  Tensor<T> attended;
  if (p.mode.ave) {
    if (deep == nullptr || !deep->defined()) {
      throw std::invalid_argument("skip_forward: dual-pool mode needs the deeper encoder feature");
    }
    Tensor<T> fused = dualpool_fuse(shallow, *deep, p);
    if (p.attention) fused = cbam_forward(fused, *p.attention);
    attended = upsample2x(fused, UpsampleMode::bilinear);
  } else {
    attended = cbam_forward(shallow, *p.attention);
  }
  return p.reduce(concat_channels(shallow, attended));
}

template <typename T>
Tensor<T> skip_forward(const Tensor<T>& shallow, const Tensor<T>& deep, const SkipBlock<T>& p) {
  return skip_forward(shallow, &deep, p);
}

}  // namespace segnet
