#include <gtest/gtest.h>

#include "oracles.hpp"
#include "segnet/gradcheck.hpp"
#include "segnet/ops.hpp"

using namespace segnet;

TEST(Shape, NumelPlaneAndText) {
  const Shape s{2, 3, 4, 5};
  EXPECT_EQ(s.numel(), 120u);
  EXPECT_EQ(s.plane(), 20u);
  EXPECT_EQ(s.str(), "2x3x4x5");
  EXPECT_EQ(Shape{}.numel(), 0u);
}

TEST(Tensor, ConstructionChecksLength) {
  EXPECT_THROW(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
  Tensor<double> t(Shape{1, 2, 2, 2}, 1.5);
  EXPECT_EQ(t.numel(), 8u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.at(0, 1, 1, 0), 1.5);
}

TEST(Tensor, CopiesShareStorageDetachDoesNot) {
  Tensor<double> a(Shape{1, 1, 1, 2}, 0.0, true);
  Tensor<double> b = a;
  b.data()[0] = 4;
  EXPECT_EQ(a.data()[0], 4);
  Tensor<double> c = a.detach();
  c.data()[0] = 9;
  EXPECT_EQ(a.data()[0], 4);
  EXPECT_FALSE(c.requires_grad());
}

TEST(Tensor, PrecisionModes) {
  static_assert(precision_of<float>() == Precision::train32);
  static_assert(precision_of<double>() == Precision::check64);
}

TEST(Backward, SumGivesOnes) {
  auto x = oracle::random(Shape{2, 3, 2, 2}, 1, -1, 1, true);
  auto l = sum(x);
  backward(l);
  ASSERT_TRUE(x.has_grad());
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
  auto x = oracle::random(Shape{1, 2, 3, 3}, 2, -1, 1, true);
  auto l = sum(mul(x, x));
  backward(l);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.data()[i]);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tensor<double> x(Shape{1, 1, 1, 1}, 3.0, true);
  auto y = add(x, x);  // dy/dx = 2
  auto l = sum(mul(y, x));  // 2x^2 -> 4x
  backward(l);
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, RejectsNonScalarNonFiniteAndReuse) {
  auto x = oracle::random(Shape{1, 1, 2, 2}, 3, -1, 1, true);
  auto y = scale(x, 2.0);
  EXPECT_THROW(backward(y), std::invalid_argument);
  Tensor<double> bad(Shape{1, 1, 1, 1}, std::nan(""), true);
  auto lb = scale(bad, 1.0);
  EXPECT_THROW(backward(lb), std::domain_error);
  auto l = sum(x);
  backward(l);
  EXPECT_THROW(backward(l), std::logic_error);
}

TEST(Backward, EveryRequiresGradLeafPopulated) {
  auto a = oracle::random(Shape{1, 2, 2, 2}, 4, -1, 1, true);
  auto b = oracle::random(Shape{1, 2, 2, 2}, 5, -1, 1, true);
  auto c = oracle::random(Shape{1, 2, 2, 2}, 6, -1, 1, false);
  auto l = sum(mul(add(a, c), b));
  backward(l);
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_FALSE(c.has_grad());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_DOUBLE_EQ(a.grad()[i], b.data()[i]);
    EXPECT_DOUBLE_EQ(b.grad()[i], a.data()[i] + c.data()[i]);
  }
}

TEST(Backward, InferenceGraphCarriesNoClosures) {
  auto a = oracle::random(Shape{1, 1, 2, 2}, 7);
  auto y = relu(scale(a, 2.0));
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, LinearGraphIsExact) {
  auto x = oracle::random(Shape{1, 2, 3, 3}, 8, -1, 1, true);
  const auto w = oracle::random(Shape{1, 2, 3, 3}, 9);
  auto r = grad_check({{"x", x}}, [=] { return sum(mul(scale(x, 3.0), w)); }, 1e-9);
  EXPECT_TRUE(r.passed) << r.worst;
  EXPECT_LT(r.worst, 1e-9);
}

TEST(GradCheck, CompositeConvReluPoolDense) {
  auto x = oracle::random(Shape{1, 2, 6, 6}, 10, -1, 1, true);
  auto w = oracle::random(Shape{3, 2, 3, 3}, 11, -1, 1, true);
  auto b = oracle::random(Shape{1, 3, 1, 1}, 12, -0.2, 0.2, true);
  auto wd = oracle::random(Shape{4, 3, 1, 1}, 13, -1, 1, true);
  const auto r = oracle::random(Shape{1, 4, 1, 1}, 14);
  auto f = [=] {
    auto h = max_pool2d(relu(conv2d(x, w, b, 1, Padding::same)));
    return sum(mul(dense(global_avg_pool(h), wd), r));
  };
  auto rep = grad_check({{"x", x}, {"w", w}, {"b", b}, {"wd", wd}}, f, 1e-5);
  EXPECT_TRUE(rep.passed) << rep.worst_name << " " << rep.worst << " " << rep.failure;
}

TEST(GradCheck, CorruptedRuleFails) {
  auto x = oracle::random(Shape{1, 2, 3, 3}, 15, -2, 2, true);
  const auto w = oracle::random(Shape{1, 2, 3, 3}, 16);
  auto f = [=] { return sum(mul(sigmoid(x), w)); };
  fault::flip_sigmoid_grad = true;
  const auto bad = grad_check({{"x", x}}, f, 1e-5);
  fault::flip_sigmoid_grad = false;
  EXPECT_FALSE(bad.passed);
  EXPECT_EQ(bad.worst_name, "x");
  EXPECT_TRUE(grad_check({{"x", x}}, f, 1e-5).passed);
}

TEST(GradCheck, NonFiniteLossIsReportedNotThrown) {
  Tensor<double> x(Shape{1, 1, 1, 1}, std::numeric_limits<double>::infinity(), true);
  const auto rep = grad_check({{"x", x}}, [=] { return sum(x); }, 1e-5);
  EXPECT_FALSE(rep.passed);
  EXPECT_FALSE(rep.failure.empty());
}

TEST(GradCheck, KinkCrossingProbesAreRetriedWithSmallerSteps) {
  // relu input at 5e-5: a 1e-4 step straddles the kink, a 1e-5 step does not.
  Tensor<double> x(Shape{1, 1, 1, 1}, 5e-5, true);
  const auto rep = grad_check({{"x", x}}, [=] { return sum(relu(x)); }, 1e-9);
  EXPECT_TRUE(rep.passed) << rep.worst;
  EXPECT_EQ(rep.entries[0].kinks_avoided, 1u);
  GradCheckOptions naive;
  naive.avoid_kinks = false;
  EXPECT_FALSE(grad_check({{"x", x}}, [=] { return sum(relu(x)); }, 1e-9, naive).passed);
}
