#include <gtest/gtest.h>

#include "oracles.hpp"
#include "segnet/checks.hpp"
#include "segnet/skip_fusion.hpp"

using namespace segnet;

namespace {

const SkipMode kModes[] = {{false, false}, {false, true}, {true, false}, {true, true}};

SkipBlock<double> random_skip(SkipMode mode, std::size_t cn, std::size_t cn1, std::uint64_t seed) {
  Rng rng(seed);
  auto b = make_skip_block<double>(mode, cn, cn1, CbamConfig{}, rng);
  ParamList<double> ps;
  b.collect(ps, "s");
  for (auto& p : ps)
    if (p.name.ends_with(".bias"))
      for (auto& v : p.tensor.data()) v = rng.uniform(-0.2, 0.2);
  return b;
}

std::vector<double> conv_same(const std::vector<double>& x, Shape& s, const Conv2d<double>& c, bool act) {
  Shape os;
  auto y = oracle::conv(x, s, c.weight.data(), c.weight.shape(), c.bias.data(), 1,
                        static_cast<long>(c.kernel() / 2), os);
  s = os;
  if (act)
    for (auto& v : y) v = std::max(0.0, v);
  return y;
}

std::vector<double> concat_oracle(const std::vector<double>& a, Shape as, const std::vector<double>& b, Shape bs) {
  std::vector<double> out;
  const std::size_t plane = as.h * as.w;
  for (std::size_t n = 0; n < as.n; ++n) {
    out.insert(out.end(), a.begin() + static_cast<long>(n * as.c * plane), a.begin() + static_cast<long>((n + 1) * as.c * plane));
    out.insert(out.end(), b.begin() + static_cast<long>(n * bs.c * plane), b.begin() + static_cast<long>((n + 1) * bs.c * plane));
  }
  return out;
}

/// avg-pool -> conv -> relu -> conv -> relu, concat with the deeper level, 1x1 conv.
std::vector<double> dualpool_oracle(const Tensor<double>& e, const Tensor<double>& d, const SkipBlock<double>& p) {
  Shape s{e.shape().n, e.shape().c, e.shape().h / 2, e.shape().w / 2};
  auto a = conv_same(oracle::pool2(e.data(), e.shape(), false), s, p.avg_conv1, true);
  a = conv_same(a, s, p.avg_conv2, true);
  Shape cs{s.n, s.c + d.shape().c, s.h, s.w};
  auto cat = concat_oracle(a, s, d.data(), d.shape());
  return conv_same(cat, cs, p.fuse, false);
}

}  // namespace

TEST(DualPool, ShapeAndZeroInput) {
  auto b = random_skip({true, false}, 4, 6, 1);
  EXPECT_EQ(dualpool_fuse(oracle::random(Shape{2, 4, 8, 6}, 2), oracle::random(Shape{2, 6, 4, 3}, 3), b).shape(),
            (Shape{2, 6, 4, 3}));
  ParamList<double> ps;
  b.collect(ps, "s");
  for (auto& p : ps)
    if (p.name.ends_with(".bias"))
      for (auto& v : p.tensor.data()) v = 0;
  for (double v : dualpool_fuse(Tensor<double>(Shape{1, 4, 8, 8}, 0.0), Tensor<double>(Shape{1, 6, 4, 4}, 0.0), b).data())
    EXPECT_EQ(v, 0.0);
}

TEST(DualPool, MatchesCompositionOracle) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    auto b = random_skip({true, false}, 3, 5, 10 + s);
    auto e = oracle::random(Shape{1, 3, 6, 6}, 20 + s);
    auto d = oracle::random(Shape{1, 5, 3, 3}, 30 + s);
    EXPECT_LT(oracle::max_abs_diff(dualpool_fuse(e, d, b).data(), dualpool_oracle(e, d, b)), 1e-12);
  }
}

TEST(DualPool, ResolutionMismatchRejected) {
  auto b = random_skip({true, false}, 4, 6, 4);
  EXPECT_THROW(dualpool_fuse(oracle::random(Shape{1, 4, 8, 8}, 1), oracle::random(Shape{1, 6, 8, 8}, 2), b),
               std::invalid_argument);
  EXPECT_THROW(dualpool_fuse(oracle::random(Shape{1, 4, 8, 8}, 1), oracle::random(Shape{1, 5, 4, 4}, 2), b),
               std::invalid_argument);
}

TEST(SkipForward, PlainModeIsIdentityWithoutParameters) {
  auto b = random_skip({false, false}, 8, 16, 5);
  ParamList<double> ps;
  b.collect(ps, "s");
  EXPECT_TRUE(ps.empty());
  auto e = oracle::random(Shape{1, 8, 16, 16}, 6);
  const auto y = skip_forward(e, static_cast<const Tensor<double>*>(nullptr), b);
  EXPECT_EQ(y.data(), e.data());
  EXPECT_EQ(&y.node(), &e.node());
}

TEST(SkipForward, EveryModeHonoursTheShapeContract) {
  auto e = oracle::random(Shape{1, 8, 16, 16}, 7);
  auto d = oracle::random(Shape{1, 16, 8, 8}, 8);
  for (const auto& m : kModes) EXPECT_EQ(skip_forward(e, d, random_skip(m, 8, 16, 9)).shape(), e.shape());
}

TEST(SkipForward, ModeTableComposition) {
  auto e = oracle::random(Shape{1, 4, 8, 8}, 40);
  auto d = oracle::random(Shape{1, 6, 4, 4}, 41);
  {
    auto b = random_skip({false, true}, 4, 6, 42);
    const auto expect = b.reduce(concat_channels(e, cbam_forward(e, *b.attention)));
    EXPECT_EQ(skip_forward(e, d, b).data(), expect.data());
  }
  {
    auto b = random_skip({true, false}, 4, 6, 43);
    EXPECT_FALSE(b.attention.has_value());
    const auto expect = b.reduce(concat_channels(e, upsample2x(dualpool_fuse(e, d, b), UpsampleMode::bilinear)));
    EXPECT_EQ(skip_forward(e, d, b).data(), expect.data());
  }
  {
    auto b = random_skip({true, true}, 4, 6, 44);
    EXPECT_EQ(b.attention->channels, 6u);
    const auto x2 = cbam_forward(dualpool_fuse(e, d, b), *b.attention);
    const auto expect = b.reduce(concat_channels(e, upsample2x(x2, UpsampleMode::bilinear)));
    EXPECT_EQ(skip_forward(e, d, b).data(), expect.data());
  }
}

TEST(SkipForward, AveModeWithoutDeepFeatureRejected) {
  auto b = random_skip({true, true}, 4, 6, 50);
  EXPECT_THROW(skip_forward(oracle::random(Shape{1, 4, 8, 8}, 1), static_cast<const Tensor<double>*>(nullptr), b),
               std::invalid_argument);
  auto c = random_skip({false, true}, 4, 6, 51);
  EXPECT_NO_THROW(skip_forward(oracle::random(Shape{1, 4, 8, 8}, 1), static_cast<const Tensor<double>*>(nullptr), c));
}

TEST(SkipForward, ParamCountClosedForm) {
  for (const auto& m : kModes)
    for (auto [cn, cn1] : {std::pair<std::size_t, std::size_t>{4, 8}, {8, 16}, {16, 16}}) {
      ParamList<double> ps;
      random_skip(m, cn, cn1, 60).collect(ps, "s");
      EXPECT_EQ(count_params(ps), skip_param_count(m, cn, cn1));
    }
  // cn = 4, cn1 = 8, full mode: two 3x3 4->4 convs, 1x1 12->8, CBAM over 8, 1x1 12->4.
  EXPECT_EQ(skip_param_count({true, true}, 4, 8), 2u * (144 + 4) + (96 + 8) + cbam_param_count(8) + (48 + 4));
}

TEST(GradientOracle, EverySkipMode) {
  const auto results = skip_checks();
  EXPECT_GE(results.size(), 4u);
  for (const auto& c : results) {
    EXPECT_TRUE(c.report.passed) << c.name << " " << c.report.worst << " " << c.report.failure;
    EXPECT_LT(c.report.worst, kBlockTolerance) << c.name;
  }
}
