#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "segnet/tensor.hpp"

namespace segnet {

namespace fault {
/// Test hook: negates the sigmoid local gradient so gradient checks can be
/// shown to fail. Never set outside verification runs.
inline std::atomic<bool> flip_sigmoid_grad{false};
}  // namespace fault

/// While a recorder is installed on the current thread, piecewise ops fold
/// their branch choices (relu signs, max winners) into it. Two evaluations
/// with equal records ran through the same smooth piece of the graph.
namespace pattern {
inline thread_local std::uint64_t* recorder = nullptr;
inline void fold(std::uint64_t v) { *recorder = (*recorder ^ (v + 0x9E3779B97F4A7C15ULL)) * 0x100000001B3ULL; }
}  // namespace pattern

enum class Padding { same, valid };
enum class UpsampleMode { nearest, bilinear };

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline std::size_t idx(const Shape& s, std::size_t n, std::size_t c, std::size_t h,
                       std::size_t w) {
  return ((n * s.c + c) * s.h + h) * s.w + w;
}

template <typename T>
void check_even(const Tensor<T>& x, const char* op) {
  const Shape& s = x.shape();
  require(s.h % 2 == 0, std::string(op) + ": height " + std::to_string(s.h) + " is odd");
  require(s.w % 2 == 0, std::string(op) + ": width " + std::to_string(s.w) + " is odd");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.data[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result<T>("scale", a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * factor;
  });
}

/// Sum of all elements as a 1x1x1x1 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return make_result<T>("sum", Shape{1, 1, 1, 1}, {acc}, {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    for (auto& g : p.grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Multiplies x by w, where every axis of w either matches x or has extent 1.
/// Covers the channel (N x C x 1 x 1) and spatial (N x 1 x H x W) attention maps.
template <typename T>
Tensor<T> elementwise_mul_broadcast(const Tensor<T>& x, const Tensor<T>& w) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  auto axis_ok = [](std::size_t wx, std::size_t xx) { return wx == xx || wx == 1; };
  detail::require(axis_ok(ws.n, xs.n) && axis_ok(ws.c, xs.c) && axis_ok(ws.h, xs.h) &&
                      axis_ok(ws.w, xs.w),
                  "elementwise_mul_broadcast: weights " + ws.str() +
                      " do not broadcast onto " + xs.str());
  auto widx = [ws](std::size_t n, std::size_t c, std::size_t h, std::size_t w_) {
    return detail::idx(ws, ws.n == 1 ? 0 : n, ws.c == 1 ? 0 : c, ws.h == 1 ? 0 : h,
                       ws.w == 1 ? 0 : w_);
  };
  std::vector<T> out(xs.numel());
  std::size_t i = 0;
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t h = 0; h < xs.h; ++h)
        for (std::size_t ww = 0; ww < xs.w; ++ww, ++i) out[i] = x.data()[i] * w.data()[widx(n, c, h, ww)];
  return make_result<T>("mul_broadcast", xs, std::move(out), {x, w}, [xs, widx](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    std::size_t k = 0;
    for (std::size_t n = 0; n < xs.n; ++n)
      for (std::size_t c = 0; c < xs.c; ++c)
        for (std::size_t h = 0; h < xs.h; ++h)
          for (std::size_t ww = 0; ww < xs.w; ++ww, ++k) {
            const std::size_t j = widx(n, c, h, ww);
            if (px.requires_grad) px.grad[k] += self.grad[k] * pw.data[j];
            if (pw.requires_grad) pw.grad[j] += self.grad[k] * px.data[k];
          }
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  if (pattern::recorder)
    for (std::size_t i = 0; i < out.size(); ++i) pattern::fold(2 * i + (x.data()[i] > T(0)));
  return make_result<T>("relu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p.data[i] > T(0)) p.grad[i] += self.grad[i];
  });
}

template <typename T>
T sigmoid_scalar(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x.data()[i]);
  return make_result<T>("sigmoid", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    const T sign = fault::flip_sigmoid_grad.load() ? T(-1) : T(1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T s = self.data[i];
      p.grad[i] += sign * self.grad[i] * s * (T(1) - s);
    }
  });
}

/// Softmax over the channel axis, independently per (n, h, w).
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  std::vector<T> out(x.numel());
  for (std::size_t n = 0; n < s.n; ++n) {
    const std::size_t base = n * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, x.data()[base + c * plane + p]);
      T z = 0;
      for (std::size_t c = 0; c < s.c; ++c) {
        const T e = std::exp(x.data()[base + c * plane + p] - mx);
        out[base + c * plane + p] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.c; ++c) out[base + c * plane + p] /= z;
    }
  }
  return make_result<T>("softmax_channels", s, std::move(out), {x}, [s, plane](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t base = n * s.c * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        T dot = 0;
        for (std::size_t c = 0; c < s.c; ++c)
          dot += self.grad[base + c * plane + p] * self.data[base + c * plane + p];
        for (std::size_t c = 0; c < s.c; ++c) {
          const std::size_t k = base + c * plane + p;
          px.grad[k] += self.data[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D cross-correlation. weight is Cout x Cin x k x k; bias (optional) holds Cout values.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, Padding padding = Padding::same) {
  const Shape is = input.shape();
  const Shape ks = weight.shape();
  detail::require(ks.h == ks.w, "conv2d: kernel must be square, got " + ks.str());
  detail::require(ks.c == is.c, "conv2d: input channel axis is " + std::to_string(is.c) +
                                    " but kernel expects " + std::to_string(ks.c));
  detail::require(stride >= 1, "conv2d: stride must be positive");
  detail::require(padding == Padding::valid || ks.h % 2 == 1,
                  "conv2d: same padding needs an odd kernel, got " + std::to_string(ks.h));
  if (bias.defined()) {
    detail::require(bias.numel() == ks.n, "conv2d: bias has " + std::to_string(bias.numel()) +
                                              " values for " + std::to_string(ks.n) +
                                              " output channels");
  }
  const std::size_t k = ks.h;
  const std::ptrdiff_t pad = padding == Padding::same ? static_cast<std::ptrdiff_t>(k / 2) : 0;
  detail::require(is.h + 2 * pad >= k && is.w + 2 * pad >= k,
                  "conv2d: spatial extent " + std::to_string(is.h) + "x" + std::to_string(is.w) +
                      " smaller than kernel");
  const Shape os{is.n, ks.n, (is.h + 2 * pad - k) / stride + 1, (is.w + 2 * pad - k) / stride + 1};

  const std::ptrdiff_t H = is.h, W = is.w, Ho = os.h, Wo = os.w, S = stride;
  // Valid output column range for kernel column kw (stride 1 fast path).
  auto ow_range = [=](std::ptrdiff_t kw) {
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, pad - kw);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(Wo, W + pad - kw);
    return std::pair{lo, hi};
  };

  std::vector<T> out(os.numel());
  const T* in = input.data().data();
  const T* wt = weight.data().data();
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t co = 0; co < os.c; ++co) {
      T* op = out.data() + (n * os.c + co) * os.plane();
      const T b = bias.defined() ? bias.data()[co] : T(0);
      std::fill(op, op + os.plane(), b);
      for (std::size_t ci = 0; ci < is.c; ++ci) {
        const T* ip = in + (n * is.c + ci) * is.plane();
        const T* wp = wt + (co * ks.c + ci) * k * k;
        for (std::ptrdiff_t kh = 0; kh < static_cast<std::ptrdiff_t>(k); ++kh) {
          for (std::ptrdiff_t kw = 0; kw < static_cast<std::ptrdiff_t>(k); ++kw) {
            const T wv = wp[kh * k + kw];
            if (S == 1) {
              const auto [lo, hi] = ow_range(kw);
              for (std::ptrdiff_t oh = 0; oh < Ho; ++oh) {
                const std::ptrdiff_t ih = oh + kh - pad;
                if (ih < 0 || ih >= H) continue;
                T* orow = op + oh * Wo;
                const T* irow = ip + ih * W + (kw - pad);
                for (std::ptrdiff_t ow = lo; ow < hi; ++ow) orow[ow] += wv * irow[ow];
              }
            } else {
              for (std::ptrdiff_t oh = 0; oh < Ho; ++oh) {
                const std::ptrdiff_t ih = oh * S + kh - pad;
                if (ih < 0 || ih >= H) continue;
                for (std::ptrdiff_t ow = 0; ow < Wo; ++ow) {
                  const std::ptrdiff_t iw = ow * S + kw - pad;
                  if (iw < 0 || iw >= W) continue;
                  op[oh * Wo + ow] += wv * ip[ih * W + iw];
                }
              }
            }
          }
        }
      }
    }
  }

  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(
      "conv2d", os, std::move(out), inputs, [=](Node<T>& self) {
        auto& pin = *self.parents[0];
        auto& pw = *self.parents[1];
        Node<T>* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        const T* g = self.grad.data();
        std::vector<T> row_acc(os.w);
        for (std::size_t n = 0; n < os.n; ++n) {
          for (std::size_t co = 0; co < os.c; ++co) {
            const T* gp = g + (n * os.c + co) * os.plane();
            if (pb && pb->requires_grad) {
              T acc = 0;
              for (std::size_t i = 0; i < os.plane(); ++i) acc += gp[i];
              pb->grad[co] += acc;
            }
            for (std::size_t ci = 0; ci < is.c; ++ci) {
              const std::size_t ioff = (n * is.c + ci) * is.plane();
              const std::size_t woff = (co * ks.c + ci) * k * k;
              for (std::ptrdiff_t kh = 0; kh < static_cast<std::ptrdiff_t>(k); ++kh) {
                for (std::ptrdiff_t kw = 0; kw < static_cast<std::ptrdiff_t>(k); ++kw) {
                  const std::size_t wi = woff + kh * k + kw;
                  const T wv = pw.data[wi];
                  T wacc = 0;
                  if (S == 1) {
                    const auto [lo, hi] = ow_range(kw);
                    // Column-wise partial sums keep the weight reduction vectorizable.
                    std::fill(row_acc.begin(), row_acc.end(), T(0));
                    for (std::ptrdiff_t oh = 0; oh < Ho; ++oh) {
                      const std::ptrdiff_t ih = oh + kh - pad;
                      if (ih < 0 || ih >= H) continue;
                      const T* grow = gp + oh * Wo;
                      const std::ptrdiff_t ibase = ioff + ih * W + (kw - pad);
                      if (pin.requires_grad) {
                        T* girow = pin.grad.data() + ibase;
                        for (std::ptrdiff_t ow = lo; ow < hi; ++ow) girow[ow] += wv * grow[ow];
                      }
                      if (pw.requires_grad) {
                        const T* irow = pin.data.data() + ibase;
                        for (std::ptrdiff_t ow = lo; ow < hi; ++ow) row_acc[ow] += grow[ow] * irow[ow];
                      }
                    }
                    for (std::ptrdiff_t ow = lo; ow < hi; ++ow) wacc += row_acc[ow];
                  } else {
                    for (std::ptrdiff_t oh = 0; oh < Ho; ++oh) {
                      const std::ptrdiff_t ih = oh * S + kh - pad;
                      if (ih < 0 || ih >= H) continue;
                      for (std::ptrdiff_t ow = 0; ow < Wo; ++ow) {
                        const std::ptrdiff_t iw = ow * S + kw - pad;
                        if (iw < 0 || iw >= W) continue;
                        const std::size_t ii = ioff + ih * W + iw;
                        if (pin.requires_grad) pin.grad[ii] += wv * gp[oh * Wo + ow];
                        wacc += gp[oh * Wo + ow] * pin.data[ii];
                      }
                    }
                  }
                  if (pw.requires_grad) pw.grad[wi] += wacc;
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride = 1,
                 Padding padding = Padding::same) {
  return conv2d(input, weight, Tensor<T>{}, stride, padding);
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// 2x2 max pooling, stride 2. Ties route the gradient to the first element in
/// row-major window order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x) {
  detail::check_even(x, "max_pool2d");
  const Shape is = x.shape();
  const Shape os{is.n, is.c, is.h / 2, is.w / 2};
  std::vector<T> out(os.numel());
  std::vector<std::size_t> argmax(os.numel());
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < is.n * is.c; ++nc) {
    const std::size_t base = nc * is.plane();
    for (std::size_t oh = 0; oh < os.h; ++oh) {
      for (std::size_t ow = 0; ow < os.w; ++ow, ++o) {
        std::size_t best = base + (2 * oh) * is.w + 2 * ow;
        for (std::size_t dh = 0; dh < 2; ++dh)
          for (std::size_t dw = 0; dw < 2; ++dw) {
            const std::size_t j = base + (2 * oh + dh) * is.w + 2 * ow + dw;
            if (x.data()[j] > x.data()[best]) best = j;
          }
        out[o] = x.data()[best];
        argmax[o] = best;
      }
    }
  }
  if (pattern::recorder)
    for (std::size_t a : argmax) pattern::fold(a);
  return make_result<T>("max_pool2d", os, std::move(out), {x},
                        [argmax = std::move(argmax)](Node<T>& self) {
                          auto& p = *self.parents[0];
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            p.grad[argmax[i]] += self.grad[i];
                        });
}

/// 2x2 average pooling, stride 2.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x) {
  detail::check_even(x, "avg_pool2d");
  const Shape is = x.shape();
  const Shape os{is.n, is.c, is.h / 2, is.w / 2};
  std::vector<T> out(os.numel());
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < is.n * is.c; ++nc) {
    const T* p = x.data().data() + nc * is.plane();
    for (std::size_t oh = 0; oh < os.h; ++oh)
      for (std::size_t ow = 0; ow < os.w; ++ow, ++o) {
        const T* r0 = p + 2 * oh * is.w + 2 * ow;
        const T* r1 = r0 + is.w;
        out[o] = (r0[0] + r0[1] + r1[0] + r1[1]) / T(4);
      }
  }
  return make_result<T>("avg_pool2d", os, std::move(out), {x}, [is, os](Node<T>& self) {
    auto& p = *self.parents[0];
    std::size_t k = 0;
    for (std::size_t nc = 0; nc < is.n * is.c; ++nc) {
      T* gp = p.grad.data() + nc * is.plane();
      for (std::size_t oh = 0; oh < os.h; ++oh)
        for (std::size_t ow = 0; ow < os.w; ++ow, ++k) {
          const T g = self.grad[k] / T(4);
          T* r0 = gp + 2 * oh * is.w + 2 * ow;
          T* r1 = r0 + is.w;
          r0[0] += g;
          r0[1] += g;
          r1[0] += g;
          r1[1] += g;
        }
    }
  });
}

namespace detail {

/// Source taps for one output coordinate of a 2x bilinear upsample with
/// half-pixel centers (align_corners = false).
struct LinearTap {
  std::size_t i0, i1;
  double lambda;  // weight of i1
};

inline LinearTap bilinear_tap(std::size_t dst, std::size_t in_extent) {
  double src = (static_cast<double>(dst) + 0.5) / 2.0 - 0.5;
  if (src < 0) src = 0;
  std::size_t i0 = static_cast<std::size_t>(std::floor(src));
  if (i0 > in_extent - 1) i0 = in_extent - 1;
  const std::size_t i1 = std::min(i0 + 1, in_extent - 1);
  return {i0, i1, src - static_cast<double>(i0)};
}

}  // namespace detail

/// Doubles H and W.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x, UpsampleMode mode = UpsampleMode::bilinear) {
  const Shape is = x.shape();
  const Shape os{is.n, is.c, is.h * 2, is.w * 2};
  std::vector<T> out(os.numel());
  if (mode == UpsampleMode::nearest) {
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < is.n * is.c; ++nc) {
      const T* p = x.data().data() + nc * is.plane();
      for (std::size_t oh = 0; oh < os.h; ++oh)
        for (std::size_t ow = 0; ow < os.w; ++ow, ++o) out[o] = p[(oh / 2) * is.w + ow / 2];
    }
    return make_result<T>("upsample_nearest", os, std::move(out), {x}, [is, os](Node<T>& self) {
      auto& p = *self.parents[0];
      std::size_t k = 0;
      for (std::size_t nc = 0; nc < is.n * is.c; ++nc) {
        T* gp = p.grad.data() + nc * is.plane();
        for (std::size_t oh = 0; oh < os.h; ++oh)
          for (std::size_t ow = 0; ow < os.w; ++ow, ++k) gp[(oh / 2) * is.w + ow / 2] += self.grad[k];
      }
    });
  }

  std::vector<detail::LinearTap> rows(os.h), cols(os.w);
  for (std::size_t i = 0; i < os.h; ++i) rows[i] = detail::bilinear_tap(i, is.h);
  for (std::size_t i = 0; i < os.w; ++i) cols[i] = detail::bilinear_tap(i, is.w);
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < is.n * is.c; ++nc) {
    const T* p = x.data().data() + nc * is.plane();
    for (std::size_t oh = 0; oh < os.h; ++oh) {
      const auto& r = rows[oh];
      const T ly = static_cast<T>(r.lambda);
      for (std::size_t ow = 0; ow < os.w; ++ow, ++o) {
        const auto& c = cols[ow];
        const T lx = static_cast<T>(c.lambda);
        const T top = (T(1) - lx) * p[r.i0 * is.w + c.i0] + lx * p[r.i0 * is.w + c.i1];
        const T bot = (T(1) - lx) * p[r.i1 * is.w + c.i0] + lx * p[r.i1 * is.w + c.i1];
        out[o] = (T(1) - ly) * top + ly * bot;
      }
    }
  }
  return make_result<T>("upsample_bilinear", os, std::move(out), {x},
                        [is, os, rows, cols](Node<T>& self) {
                          auto& p = *self.parents[0];
                          std::size_t k = 0;
                          for (std::size_t nc = 0; nc < is.n * is.c; ++nc) {
                            T* gp = p.grad.data() + nc * is.plane();
                            for (std::size_t oh = 0; oh < os.h; ++oh) {
                              const auto& r = rows[oh];
                              const T ly = static_cast<T>(r.lambda);
                              for (std::size_t ow = 0; ow < os.w; ++ow, ++k) {
                                const auto& c = cols[ow];
                                const T lx = static_cast<T>(c.lambda);
                                const T g = self.grad[k];
                                gp[r.i0 * is.w + c.i0] += g * (T(1) - ly) * (T(1) - lx);
                                gp[r.i0 * is.w + c.i1] += g * (T(1) - ly) * lx;
                                gp[r.i1 * is.w + c.i0] += g * ly * (T(1) - lx);
                                gp[r.i1 * is.w + c.i1] += g * ly * lx;
                              }
                            }
                          }
                        });
}

/// Stacks b's channels after a's.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  detail::require(as.n == bs.n, "concat_channels: batch axis " + std::to_string(as.n) + " vs " +
                                    std::to_string(bs.n));
  detail::require(as.h == bs.h, "concat_channels: height axis " + std::to_string(as.h) + " vs " +
                                    std::to_string(bs.h));
  detail::require(as.w == bs.w, "concat_channels: width axis " + std::to_string(as.w) + " vs " +
                                    std::to_string(bs.w));
  const Shape os{as.n, as.c + bs.c, as.h, as.w};
  const std::size_t ablock = as.c * as.plane();
  const std::size_t bblock = bs.c * bs.plane();
  std::vector<T> out(os.numel());
  for (std::size_t n = 0; n < os.n; ++n) {
    std::copy_n(a.data().begin() + n * ablock, ablock, out.begin() + n * (ablock + bblock));
    std::copy_n(b.data().begin() + n * bblock, bblock,
                out.begin() + n * (ablock + bblock) + ablock);
  }
  return make_result<T>("concat_channels", os, std::move(out), {a, b},
                        [ablock, bblock, nb = os.n](Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          for (std::size_t n = 0; n < nb; ++n) {
                            const T* g = self.grad.data() + n * (ablock + bblock);
                            if (pa.requires_grad)
                              for (std::size_t i = 0; i < ablock; ++i) pa.grad[n * ablock + i] += g[i];
                            if (pb.requires_grad)
                              for (std::size_t i = 0; i < bblock; ++i)
                                pb.grad[n * bblock + i] += g[ablock + i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Global reductions
// ---------------------------------------------------------------------------

/// Mean over H, W per channel. Values are summed in sorted order, so the
/// result is bit-identical under any permutation of the pixels.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape is = x.shape();
  const Shape os{is.n, is.c, 1, 1};
  const std::size_t plane = is.plane();
  std::vector<T> out(os.numel()), scratch(plane);
  for (std::size_t nc = 0; nc < is.n * is.c; ++nc) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(nc * plane), plane, scratch.begin());
    std::sort(scratch.begin(), scratch.end());
    T acc = 0;
    for (T v : scratch) acc += v;
    out[nc] = acc / static_cast<T>(plane);
  }
  return make_result<T>("global_avg_pool", os, std::move(out), {x}, [plane](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t nc = 0; nc < self.grad.size(); ++nc) {
      const T g = self.grad[nc] / static_cast<T>(plane);
      for (std::size_t i = 0; i < plane; ++i) p.grad[nc * plane + i] += g;
    }
  });
}

/// Max over H, W per channel; gradient goes to the first maximum.
template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  const Shape is = x.shape();
  const Shape os{is.n, is.c, 1, 1};
  const std::size_t plane = is.plane();
  std::vector<T> out(os.numel());
  std::vector<std::size_t> argmax(os.numel());
  for (std::size_t nc = 0; nc < is.n * is.c; ++nc) {
    std::size_t best = nc * plane;
    for (std::size_t i = 1; i < plane; ++i)
      if (x.data()[nc * plane + i] > x.data()[best]) best = nc * plane + i;
    out[nc] = x.data()[best];
    argmax[nc] = best;
  }
  if (pattern::recorder)
    for (std::size_t a : argmax) pattern::fold(a);
  return make_result<T>("global_max_pool", os, std::move(out), {x},
                        [argmax = std::move(argmax)](Node<T>& self) {
                          auto& p = *self.parents[0];
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            p.grad[argmax[i]] += self.grad[i];
                        });
}

/// Mean over channels per pixel.
template <typename T>
Tensor<T> channel_avg_pool(const Tensor<T>& x) {
  const Shape is = x.shape();
  const Shape os{is.n, 1, is.h, is.w};
  const std::size_t plane = is.plane();
  std::vector<T> out(os.numel(), T(0));
  for (std::size_t n = 0; n < is.n; ++n) {
    T* op = out.data() + n * plane;
    for (std::size_t c = 0; c < is.c; ++c) {
      const T* ip = x.data().data() + (n * is.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) op[i] += ip[i];
    }
    for (std::size_t i = 0; i < plane; ++i) op[i] /= static_cast<T>(is.c);
  }
  return make_result<T>("channel_avg_pool", os, std::move(out), {x}, [is, plane](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t n = 0; n < is.n; ++n)
      for (std::size_t c = 0; c < is.c; ++c)
        for (std::size_t i = 0; i < plane; ++i)
          p.grad[(n * is.c + c) * plane + i] += self.grad[n * plane + i] / static_cast<T>(is.c);
  });
}

/// Max over channels per pixel; gradient goes to the lowest-index maximum.
template <typename T>
Tensor<T> channel_max_pool(const Tensor<T>& x) {
  const Shape is = x.shape();
  const Shape os{is.n, 1, is.h, is.w};
  const std::size_t plane = is.plane();
  std::vector<T> out(os.numel());
  std::vector<std::size_t> argmax(os.numel());
  for (std::size_t n = 0; n < is.n; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = n * is.c * plane + i;
      for (std::size_t c = 1; c < is.c; ++c) {
        const std::size_t j = (n * is.c + c) * plane + i;
        if (x.data()[j] > x.data()[best]) best = j;
      }
      out[n * plane + i] = x.data()[best];
      argmax[n * plane + i] = best;
    }
  if (pattern::recorder)
    for (std::size_t a : argmax) pattern::fold(a);
  return make_result<T>("channel_max_pool", os, std::move(out), {x},
                        [argmax = std::move(argmax)](Node<T>& self) {
                          auto& p = *self.parents[0];
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            p.grad[argmax[i]] += self.grad[i];
                        });
}

/// Affine map per batch element: x is N x Cin x 1 x 1, weight is Cout x Cin x 1 x 1.
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  detail::require(xs.h == 1 && xs.w == 1, "dense: input must be N x C x 1 x 1, got " + xs.str());
  detail::require(ws.h == 1 && ws.w == 1, "dense: weight must be Cout x Cin x 1 x 1, got " + ws.str());
  detail::require(ws.c == xs.c, "dense: input channel axis is " + std::to_string(xs.c) +
                                    " but weight expects " + std::to_string(ws.c));
  if (bias.defined())
    detail::require(bias.numel() == ws.n, "dense: bias has " + std::to_string(bias.numel()) +
                                              " values for " + std::to_string(ws.n) + " outputs");
  const Shape os{xs.n, ws.n, 1, 1};
  std::vector<T> out(os.numel());
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.n; ++o) {
      T acc = bias.defined() ? bias.data()[o] : T(0);
      for (std::size_t i = 0; i < ws.c; ++i) acc += weight.data()[o * ws.c + i] * x.data()[n * xs.c + i];
      out[n * ws.n + o] = acc;
    }
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>("dense", os, std::move(out), inputs, [xs, ws](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    Node<T>* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    for (std::size_t n = 0; n < xs.n; ++n)
      for (std::size_t o = 0; o < ws.n; ++o) {
        const T g = self.grad[n * ws.n + o];
        if (pb && pb->requires_grad) pb->grad[o] += g;
        for (std::size_t i = 0; i < ws.c; ++i) {
          if (px.requires_grad) px.grad[n * xs.c + i] += g * pw.data[o * ws.c + i];
          if (pw.requires_grad) pw.grad[o * ws.c + i] += g * px.data[n * xs.c + i];
        }
      }
  });
}

}  // namespace segnet
