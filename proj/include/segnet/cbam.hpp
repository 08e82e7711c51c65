#pragma once

#include <algorithm>
#include <string>

#include "segnet/layers.hpp"

namespace segnet {

struct CbamConfig {
  std::size_t reduction = 4;      // channel bottleneck ratio, clamped so C / r >= 1
  std::size_t spatial_width = 2;  // hidden width of the spatial convolution chain
};

/// Shared two-layer MLP of the channel branch. Both pooled descriptors go
/// through the same two weight tensors.
template <typename T>
struct ChannelAttentionParams {
  Tensor<T> w1;  // hidden x C x 1 x 1
  Tensor<T> w2;  // C x hidden x 1 x 1

  std::size_t channels() const { return w1.shape().c; }
  std::size_t hidden() const { return w1.shape().n; }
};

/// Three chained 3x3 convolutions: 2 -> width -> width -> 1.
template <typename T>
struct SpatialAttentionParams {
  Conv2d<T> conv1, conv2, conv3;
};

template <typename T>
struct CbamBlock {
  std::size_t channels = 0;
  ChannelAttentionParams<T> channel;
  SpatialAttentionParams<T> spatial;

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".channel.w1", channel.w1});
    out.push_back({prefix + ".channel.w2", channel.w2});
    spatial.conv1.collect(out, prefix + ".spatial.conv1");
    spatial.conv2.collect(out, prefix + ".spatial.conv2");
    spatial.conv3.collect(out, prefix + ".spatial.conv3");
  }
};

inline std::size_t cbam_hidden(std::size_t channels, std::size_t reduction) {
  return std::max<std::size_t>(1, channels / std::max<std::size_t>(1, reduction));
}

inline std::size_t cbam_param_count(std::size_t channels, const CbamConfig& cfg = {}) {
  const std::size_t h = cbam_hidden(channels, cfg.reduction);
  const std::size_t s = cfg.spatial_width;
  return 2 * channels * h + Conv2d<double>::param_count(2, s, 3) +
         Conv2d<double>::param_count(s, s, 3) + Conv2d<double>::param_count(s, 1, 3);
}

template <typename T>
CbamBlock<T> make_cbam(std::size_t channels, const CbamConfig& cfg, Rng& rng) {
  const std::size_t h = cbam_hidden(channels, cfg.reduction);
  CbamBlock<T> b;
  b.channels = channels;
  b.channel.w1 = he_uniform<T>(Shape{h, channels, 1, 1}, channels, rng);
  b.channel.w2 = he_uniform<T>(Shape{channels, h, 1, 1}, h, rng);
  b.spatial.conv1 = Conv2d<T>(2, cfg.spatial_width, 3, rng);
  b.spatial.conv2 = Conv2d<T>(cfg.spatial_width, cfg.spatial_width, 3, rng);
  b.spatial.conv3 = Conv2d<T>(cfg.spatial_width, 1, 3, rng);
  return b;
}

/// Tc = sigmoid(MLP(maxpool(X)) + MLP(avgpool(X))), MLP = W2 relu(W1 .)
template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const ChannelAttentionParams<T>& p) {
  if (x.shape().c != p.channels()) {
    throw std::invalid_argument("channel_attention: input has " + std::to_string(x.shape().c) +
                                " channels, block expects " + std::to_string(p.channels()));
  }
  auto mlp = [&](const Tensor<T>& v) { return dense(relu(dense(v, p.w1)), p.w2); };
  return sigmoid(add(mlp(global_max_pool(x)), mlp(global_avg_pool(x))));
}

/// X' = Tc (x) X, Tc broadcast over H and W.
template <typename T>
Tensor<T> apply_channel(const Tensor<T>& x, const Tensor<T>& tc) {
  const Shape xs = x.shape();
  if (tc.shape() != Shape{xs.n, xs.c, 1, 1}) {
    throw std::invalid_argument("apply_channel: weights " + tc.shape().str() + " expected " +
                                Shape{xs.n, xs.c, 1, 1}.str());
  }
  return elementwise_mul_broadcast(x, tc);
}

/// Ts = sigmoid(conv3(relu(conv2(relu(conv1([avg_c(X'); max_c(X')]))))))
template <typename T>
Tensor<T> spatial_attention(const Tensor<T>& x, const SpatialAttentionParams<T>& p) {
  const Tensor<T> pooled = concat_channels(channel_avg_pool(x), channel_max_pool(x));
  return sigmoid(p.conv3(relu(p.conv2(relu(p.conv1(pooled))))));
}

/// X'' = Ts (x) X', Ts broadcast over channels.
template <typename T>
Tensor<T> apply_spatial(const Tensor<T>& x, const Tensor<T>& ts) {
  const Shape xs = x.shape();
  if (ts.shape() != Shape{xs.n, 1, xs.h, xs.w}) {
    throw std::invalid_argument("apply_spatial: weights " + ts.shape().str() + " expected " +
                                Shape{xs.n, 1, xs.h, xs.w}.str());
  }
  return elementwise_mul_broadcast(x, ts);
}

/// Channel attention followed by spatial attention; output shape equals input shape.
template <typename T>
Tensor<T> cbam_forward(const Tensor<T>& x, const CbamBlock<T>& block) {
  const Tensor<T> refined = apply_channel(x, channel_attention(x, block.channel));
  return apply_spatial(refined, spatial_attention(refined, block.spatial));
}

}  // namespace segnet
