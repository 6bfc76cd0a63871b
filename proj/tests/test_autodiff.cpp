#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gcl4sr/autodiff.hpp"
#include "grad_cases.hpp"

namespace ad = gcl4sr::ad;
using gcl4sr::Rng;
using gcl4sr::Tensor;

namespace {

constexpr double kPerOpTolerance = 1e-4;

void expect_gradcheck(const oracle::ScalarFn& f, const std::vector<Tensor>& inputs, const char* what) {
  const auto r = oracle::check_gradients(f, inputs);
  EXPECT_LT(r.max_rel_error, kPerOpTolerance) << what << " abs err " << r.max_abs_error;
}

}  // namespace

TEST(CoreOps, SoftmaxOfZerosIsUniform) {
  ad::Tape t;
  auto y = ad::softmax_rows(t.constant(Tensor::row({0, 0, 0})));
  for (double v : y.value().values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(CoreOps, CosineOfVectorWithItselfIsOne) {
  ad::Tape t;
  auto x = t.constant(Tensor::matrix(2, 3, {1, -2, 0.5, 3, 3, 3}));
  auto c = ad::cosine_rows(x, x);
  EXPECT_NEAR(c.value()[0], 1.0, 1e-15);
  EXPECT_NEAR(c.value()[1], 1.0, 1e-15);
}

TEST(CoreOps, MatmulAllOnes) {
  ad::Tape t;
  auto y = ad::matmul(t.constant(Tensor::filled(2, 3, 1.0)), t.constant(Tensor::filled(3, 2, 1.0)));
  EXPECT_EQ(y.value(), Tensor::filled(2, 2, 3.0));
}

TEST(CoreOps, ShapeMismatchThrows) {
  ad::Tape t;
  auto a = t.constant(Tensor::zeros(2, 3));
  auto b = t.constant(Tensor::zeros(2, 3));
  EXPECT_THROW(ad::matmul(a, b), gcl4sr::ShapeError);
  EXPECT_THROW(ad::add(a, t.constant(Tensor::zeros(3, 2))), gcl4sr::ShapeError);
}

TEST(CoreOps, NonFiniteResultThrows) {
  ad::Tape t;
  auto x = t.constant(Tensor::row({1000.0}));
  EXPECT_THROW(ad::exp(x), gcl4sr::NumericError);
}

TEST(CoreOps, LogIsGuarded) {
  ad::Tape t;
  auto y = ad::log(t.constant(Tensor::row({0.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], std::log(1e-12));
}

TEST(CoreOps, MaskedSoftmaxZeroesMaskedEntries) {
  ad::Tape t;
  std::vector<bool> mask{true, false, true, true, true, false};
  auto y = ad::softmax_rows(t.constant(Tensor::matrix(2, 3, {1, 50, 1, 2, 2, -7})), &mask);
  EXPECT_DOUBLE_EQ(y.value()(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(y.value()(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(y.value()(1, 2), 0.0);
  std::vector<bool> all_masked(3, false);
  EXPECT_THROW(ad::softmax_rows(t.constant(Tensor::row({1, 2, 3})), &all_masked), gcl4sr::ShapeError);
}

TEST(Backward, SumOfSquares) {
  ad::Tape t;
  auto x = t.leaf(Tensor::row({1, 2, 3}));
  auto g = t.backward(ad::sum(ad::mul(x, x)));
  EXPECT_EQ(g[x], Tensor::row({2, 4, 6}));
}

TEST(Backward, UnreachableLeafHasZeroGradient) {
  ad::Tape t;
  auto x = t.leaf(Tensor::row({1, 2}));
  auto p = t.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  auto g = t.backward(ad::sum(x));
  EXPECT_EQ(g[p], Tensor::zeros(2, 2));
}

TEST(Backward, NonScalarLossThrows) {
  ad::Tape t;
  auto x = t.leaf(Tensor::row({1, 2}));
  EXPECT_THROW(t.backward(x), gcl4sr::ShapeError);
}

TEST(Backward, SharedInputsAccumulate) {
  ad::Tape t;
  auto x = t.leaf(Tensor::row({3.0}));
  // y = x*x + 2x  ->  dy/dx = 2x + 2 = 8
  auto y = ad::add(ad::mul(x, x), ad::scale(x, 2.0));
  EXPECT_DOUBLE_EQ(t.backward(ad::sum(y))[x][0], 8.0);
}

TEST(GradientCheck, EveryDifferentiableOp) {
  for (const auto& c : oracle::differentiable_op_cases()) expect_gradcheck(c.fn, c.inputs, c.name);
}

TEST(Properties, SoftmaxRowsSumToOne) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    ad::Tape t;
    auto y = ad::softmax_rows(t.constant(oracle::random_tensor(rng, 4, 7, 5.0)));
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (double v : y.value().row_span(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Properties, LayerNormStandardizesRows) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    ad::Tape t;
    auto x = t.constant(oracle::random_tensor(rng, 3, 16, 3.0));
    auto y = ad::layer_norm(x, t.constant(Tensor::filled(1, 16, 1.0)), t.constant(Tensor::zeros(1, 16)));
    for (std::size_t i = 0; i < 3; ++i) {
      double mu = 0.0, var = 0.0;
      for (double v : y.value().row_span(i)) mu += v;
      mu /= 16;
      for (double v : y.value().row_span(i)) var += (v - mu) * (v - mu);
      var /= 16;
      EXPECT_LT(std::abs(mu), 1e-10);
      EXPECT_NEAR(var, 1.0, 1e-6);
    }
  }
}

TEST(Properties, DropoutEvalIsIdentity) {
  ad::Tape t;
  Rng rng(1);
  auto x = t.constant(Tensor::row({1, 2, 3}));
  auto y = ad::dropout(x, 0.5, rng, false);
  EXPECT_EQ(y.value(), x.value());
  EXPECT_THROW(ad::dropout(x, 1.0, rng, true), gcl4sr::Error);
}

TEST(Properties, DropoutPreservesExpectation) {
  Rng rng(2);
  const int trials = 10000;
  double total = 0.0;
  ad::Tape t;
  auto x = t.constant(Tensor::row({2.0}));
  for (int i = 0; i < trials; ++i) total += ad::dropout(x, 0.2, rng, true).value()[0];
  EXPECT_NEAR(total / trials, 2.0, 0.02 * 2.0);
}

TEST(Properties, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(77);
    ad::Tape t;
    auto a = t.leaf(oracle::random_tensor(rng, 4, 4));
    auto y = ad::sum(ad::softmax_rows(ad::dropout(ad::matmul(a, a), 0.3, rng, true)));
    return t.backward(y)[a];
  };
  EXPECT_EQ(run(), run());
}

TEST(CoreOps, CosineOfZeroRowIsZero) {
  ad::Tape t;
  auto z = t.leaf(Tensor::matrix(2, 2, {0, 0, 1, 2}));
  auto x = t.leaf(Tensor::matrix(2, 2, {3, 4, 1, 2}));
  auto c = ad::cosine_rows(z, x);
  EXPECT_EQ(c.value()[0], 0.0);
  auto m = ad::cosine_matrix(z, x);
  EXPECT_EQ(m.value()(0, 1), 0.0);
  const auto g = t.backward(ad::add(ad::sum(c), ad::sum(m)));
  EXPECT_TRUE(g[z].all_finite());
}
