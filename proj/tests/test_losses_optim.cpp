#include <gtest/gtest.h>

#include <numbers>

#include "oracles.hpp"
#include "segnet/checks.hpp"
#include "segnet/losses.hpp"
#include "segnet/optim.hpp"

using namespace segnet;

namespace {

LabelBatch labels(std::size_t n, std::size_t h, std::size_t w, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  LabelBatch t{n, h, w, std::vector<std::uint8_t>(n * h * w)};
  for (auto& v : t.labels) v = static_cast<std::uint8_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
  return t;
}

/// Logits that put `margin` on the true class and 0 elsewhere.
Tensor<double> confident(const LabelBatch& t, std::size_t k, double margin) {
  Tensor<double> z(Shape{t.n, k, t.h, t.w}, -margin);
  for (std::size_t n = 0; n < t.n; ++n)
    for (std::size_t p = 0; p < t.h * t.w; ++p) z.data()[(n * k + t.labels[n * t.h * t.w + p]) * t.h * t.w + p] = margin;
  return z;
}

/// Textbook bias-corrected Adam on plain vectors.
struct RefAdam {
  double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& x, const std::vector<double>& g, double lr) {
    if (m.empty()) m.assign(x.size(), 0), v.assign(x.size(), 0);
    ++t;
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      x[i] -= lr * (m[i] / (1 - std::pow(b1, t))) / (std::sqrt(v[i] / (1 - std::pow(b2, t))) + eps);
    }
  }
};

}  // namespace

TEST(Loss, ParseNames) {
  for (const char* n : {"ce", "bce", "poly", "focal"}) EXPECT_EQ(LossKind::parse(n).name(), n);
  EXPECT_THROW(LossKind::parse("dice"), std::invalid_argument);
  const LossKind d{};
  EXPECT_EQ(d.gamma, 2.0);
  EXPECT_EQ(d.alpha, 0.25);
  EXPECT_EQ(d.epsilon, 1.0);
}

TEST(Loss, FocalWithNeutralParametersIsCrossEntropy) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto z = oracle::random(Shape{2, 4, 3, 5}, s, -3, 3);
    const auto t = labels(2, 3, 5, 4, 100 + s);
    LossKind f{LossType::focal, 0.0, 1.0};
    EXPECT_EQ(loss(f, z, t).item(), loss(LossKind{LossType::ce}, z, t).item());
  }
}

TEST(Loss, HalfProbabilityFocalValue) {
  Tensor<double> z(Shape{1, 2, 1, 1}, 0.0);
  const LabelBatch t{1, 1, 1, {0}};
  EXPECT_NEAR(loss(LossKind{LossType::focal}, z, t).item(), 0.25 * 0.25 * std::numbers::ln2, 1e-15);
  EXPECT_NEAR(loss(LossKind{LossType::focal}, z, t).item(), 0.043322, 1e-6);
  EXPECT_NEAR(loss(LossKind{LossType::ce}, z, t).item(), std::numbers::ln2, 1e-15);
  EXPECT_NEAR(loss(LossKind{LossType::poly}, z, t).item(), std::numbers::ln2 + 0.5, 1e-15);
  // bce: both sigmoid(0) = 0.5 terms contribute ln 2.
  EXPECT_NEAR(loss(LossKind{LossType::bce}, z, t).item(), std::numbers::ln2, 1e-15);
}

TEST(Loss, MatchesPerPixelFormulas) {
  auto z = oracle::random(Shape{1, 3, 2, 2}, 7, -2, 2);
  const auto t = labels(1, 2, 2, 3, 8);
  double ce = 0, focal = 0, poly = 0, bce = 0;
  for (std::size_t p = 0; p < 4; ++p) {
    double den = 0;
    for (std::size_t c = 0; c < 3; ++c) den += std::exp(z.data()[c * 4 + p]);
    const double pt = std::exp(z.data()[t.labels[p] * 4 + p]) / den;
    ce += -std::log(pt) / 4;
    focal += -0.25 * (1 - pt) * (1 - pt) * std::log(pt) / 4;
    poly += (-std::log(pt) + (1 - pt)) / 4;
    for (std::size_t c = 0; c < 3; ++c) {
      const double q = oracle::sigmoid(z.data()[c * 4 + p]);
      bce += -std::log(c == t.labels[p] ? q : 1 - q) / 12;
    }
  }
  EXPECT_NEAR(loss(LossKind{LossType::ce}, z, t).item(), ce, 1e-12);
  EXPECT_NEAR(loss(LossKind{LossType::focal}, z, t).item(), focal, 1e-12);
  EXPECT_NEAR(loss(LossKind{LossType::poly}, z, t).item(), poly, 1e-12);
  EXPECT_NEAR(loss(LossKind{LossType::bce}, z, t).item(), bce, 1e-12);
}

TEST(Loss, ConfidentPredictionsVanishAndAllAreNonNegative) {
  const auto t = labels(2, 4, 4, 5, 9);
  for (auto type : {LossType::ce, LossType::bce, LossType::poly, LossType::focal}) {
    const double v = loss(LossKind{type}, confident(t, 5, 40), t).item();
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1e-12) << LossKind{type}.name();
    for (std::uint64_t s = 0; s < 3; ++s) EXPECT_GE(loss(LossKind{type}, oracle::random(Shape{2, 5, 4, 4}, s, -4, 4), t).item(), 0.0);
  }
}

TEST(Loss, FocalModulationDecreasesInConfidence) {
  double prev = INFINITY;
  for (double pt = 0.05; pt < 1.0; pt += 0.05) {
    const double ratio = std::pow(1 - pt, 2.0);
    EXPECT_LT(ratio, prev);
    prev = ratio;
  }
}

TEST(Loss, OutOfRangeLabelNamesThePixel) {
  Tensor<double> z(Shape{1, 3, 2, 2}, 0.0);
  LabelBatch t{1, 2, 2, {0, 1, 2, 0}};
  t.labels[3] = 3;
  try {
    loss(LossKind{LossType::ce}, z, t);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("y=1, x=1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(loss(LossKind{LossType::ce}, z, LabelBatch{1, 2, 3, std::vector<std::uint8_t>(6)}), std::invalid_argument);
}

TEST(Loss, GradientOracle) {
  for (const auto& c : loss_checks()) {
    EXPECT_TRUE(c.report.passed) << c.name << " " << c.report.worst << " " << c.report.failure;
    EXPECT_LT(c.report.worst, kBlockTolerance) << c.name;
  }
}

TEST(Adam, MatchesReferenceOverFiveSteps) {
  Tensor<double> p(Shape{1, 1, 1, 3}, std::vector<double>{0.5, -1.0, 2.0}, true);
  ParamList<double> ps{{"p", p}};
  AdamState<double> st;
  RefAdam ref;
  std::vector<double> x = p.data();
  const std::vector<std::vector<double>> grads{{0.3, -2, 1e-3}, {0.1, -1, 0}, {-0.5, 4, 2}, {0.2, 0.2, 0.2}, {1, -1, 1}};
  for (const auto& g : grads) {
    p.node().grad = g;
    adam_step(ps, st, 1e-2);
    ref.step(x, g, 1e-2);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.data()[i], x[i], 1e-12);
  }
  EXPECT_EQ(st.step, 5u);
  for (double v : st.v.at(&p.node())) EXPECT_GE(v, 0.0);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  Tensor<double> p(Shape{1, 1, 1, 1}, 1.0, true);
  p.node().grad = {-7.0};
  AdamState<double> st;
  adam_step(ParamList<double>{{"p", p}}, st, 0.1);
  EXPECT_NEAR(p.item(), 1.1, 1e-8);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  Tensor<double> p(Shape{1, 1, 2, 2}, 0.7, true);
  p.node().grad.assign(4, 0.0);
  AdamState<double> st;
  adam_step(ParamList<double>{{"p", p}}, st, 0.1);
  for (double v : p.data()) EXPECT_EQ(v, 0.7);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, IndependentParametersUpdateIndependently) {
  Tensor<double> a(Shape{1, 1, 1, 1}, 0.0, true), b(Shape{1, 1, 1, 1}, 0.0, true);
  a.node().grad = {1.0};
  b.node().grad = {0.0};
  AdamState<double> st;
  adam_step(ParamList<double>{{"a", a}, {"b", b}}, st, 0.1);
  EXPECT_NE(a.item(), 0.0);
  EXPECT_EQ(b.item(), 0.0);
}

TEST(Adam, QuadraticConverges) {
  Tensor<double> th(Shape{1, 1, 1, 1}, 0.0, true);
  AdamState<double> st;
  std::size_t steps = 0;
  for (; steps < 2000 && std::abs(th.item() - 3.0) >= 0.01; ++steps) {
    Tensor<double> three(Shape{1, 1, 1, 1}, -3.0);
    auto d = add(th, three);
    auto l = sum(mul(d, d));
    th.node().grad.clear();
    backward(l);
    adam_step(ParamList<double>{{"theta", th}}, st, 0.05);
  }
  EXPECT_LT(std::abs(th.item() - 3.0), 0.01);
  EXPECT_LT(steps, 2000u);
}

TEST(Adam, NonFiniteGradientRejectedBeforeAnyUpdate) {
  Tensor<double> a(Shape{1, 1, 1, 1}, 1.0, true), b(Shape{1, 1, 1, 1}, 2.0, true);
  a.node().grad = {1.0};
  b.node().grad = {std::nan("")};
  AdamState<double> st;
  EXPECT_THROW(adam_step(ParamList<double>{{"a", a}, {"b", b}}, st, 0.1), NonFiniteGradient);
  EXPECT_EQ(a.item(), 1.0);
  EXPECT_EQ(st.step, 0u);
}

TEST(CosineLr, EndpointsMidpointAndMonotone) {
  const auto s = LrSchedule::with_floor_ratio(1e-4, 100);
  EXPECT_EQ(cosine_lr(s, 0), 0.0001);
  EXPECT_EQ(cosine_lr(s, 100), 1e-6);
  EXPECT_DOUBLE_EQ(cosine_lr(s, 50), (1e-4 + 1e-6) / 2);
  for (std::size_t e = 1; e <= 100; ++e) EXPECT_LE(cosine_lr(s, e), cosine_lr(s, e - 1));
  EXPECT_NEAR(cosine_lr(s, 25), 1e-6 + 0.5 * (1e-4 - 1e-6) * (1 + std::cos(std::numbers::pi / 4)), 1e-18);
  EXPECT_THROW(cosine_lr(s, 101), std::out_of_range);
}
