#include <gtest/gtest.h>

#include <cmath>

#include "gcl4sr/objectives.hpp"
#include "oracles.hpp"

using namespace gcl4sr;

TEST(LossMain, UniformScoresGiveLogV) {
  ad::Tape t;
  const std::vector<std::size_t> targets{3, 77};
  auto l = loss_main(t.constant(Tensor::zeros(2, 100)), targets);
  EXPECT_NEAR(l.value().item(), std::log(100.0), 1e-12);
  EXPECT_NEAR(l.value().item(), 4.6052, 1e-4);
}

TEST(LossMain, DominantTargetGivesZero) {
  ad::Tape t;
  Tensor s = Tensor::zeros(1, 5);
  s[2] = 60.0;
  const std::vector<std::size_t> targets{2};
  EXPECT_LT(loss_main(t.constant(s), targets).value().item(), 1e-20);
}

TEST(LossMain, MatchesScalarOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor s = oracle::random_tensor(rng, 3, 9, 3.0);
    std::vector<std::size_t> targets{rng.index(9), rng.index(9), rng.index(9)};
    ad::Tape t;
    EXPECT_NEAR(loss_main(t.constant(s), targets).value().item(), oracle::softmax_nll(oracle::to_mat(s), targets), 1e-10);
  }
}

TEST(LossGcl, SingleRowIsZero) {
  Rng rng(2);
  ad::Tape t;
  auto z1 = t.constant(oracle::random_tensor(rng, 1, 4));
  auto z2 = t.constant(oracle::random_tensor(rng, 1, 4));
  EXPECT_EQ(loss_gcl(z1, z2, 0.5).value().item(), 0.0);
}

TEST(LossGcl, OrthogonalPairClosedForm) {
  ad::Tape t;
  // z'_1 = z''_1 = e1, z''_2 = e2 orthogonal to it, z'_2 = e2
  auto z = t.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  const double expected = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
  EXPECT_NEAR(expected, 0.1269, 1e-4);
  EXPECT_NEAR(loss_gcl(z, z, 0.5, false).value().item(), expected, 1e-9);
  EXPECT_NEAR(loss_gcl(z, z, 0.5, true).value().item(), expected, 1e-9);
}

TEST(LossGcl, MatchesScriptedOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = oracle::random_tensor(rng, 5, 6), b = oracle::random_tensor(rng, 5, 6);
    const bool sym = trial % 2 == 0;
    ad::Tape t;
    EXPECT_NEAR(loss_gcl(t.constant(a), t.constant(b), 0.5, sym).value().item(),
                oracle::info_nce(oracle::to_mat(a), oracle::to_mat(b), 0.5, sym), 1e-9);
  }
}

TEST(LossGcl, InvariantToPositiveRowScaling) {
  Rng rng(4);
  Tensor a = oracle::random_tensor(rng, 4, 3), b = oracle::random_tensor(rng, 4, 3);
  ad::Tape t;
  const double before = loss_gcl(t.constant(a), t.constant(b), 0.5).value().item();
  for (std::size_t k = 0; k < 3; ++k) a(2, k) *= 7.5;
  const double after = loss_gcl(t.constant(a), t.constant(b), 0.5).value().item();
  EXPECT_NEAR(before, after, 1e-12);
}

TEST(LossMmd, IdenticalInputsGiveZero) {
  Rng rng(5);
  const Tensor e = oracle::random_tensor(rng, 4, 3);
  ad::Tape t;
  auto v = t.constant(e);
  EXPECT_NEAR(loss_mmd(v, v, v, 1.0).value().item(), 0.0, 1e-15);
}

TEST(LossMmd, SingleRowsThreeTermFormula) {
  ad::Tape t;
  auto x = t.constant(Tensor::row({1.0, 2.0}));
  auto y = t.constant(Tensor::row({0.0, 0.5}));
  const double d2 = 1.0 + 2.25;
  EXPECT_NEAR(mmd(x, y, 1.0).value().item(), 2.0 - 2.0 * std::exp(-d2 / 2.0), 1e-15);
}

TEST(LossMmd, MatchesTripleLoopOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor e = oracle::random_tensor(rng, 4, 3), q1 = oracle::random_tensor(rng, 4, 3),
                 q2 = oracle::random_tensor(rng, 4, 3);
    const double rho = 0.5 + rng.uniform();
    ad::Tape t;
    const double got = loss_mmd(t.constant(e), t.constant(q1), t.constant(q2), rho).value().item();
    const double ref = oracle::mmd(oracle::to_mat(e), oracle::to_mat(q1), rho) +
                       oracle::mmd(oracle::to_mat(e), oracle::to_mat(q2), rho);
    EXPECT_NEAR(got, ref, 1e-12);
  }
}

TEST(LossTotal, LinearCombination) {
  ad::Tape t;
  LossWeights w;
  w.lambda1 = 1.0;
  w.lambda2 = 0.0;
  const auto r = loss_total(t.constant(Tensor::scalar(2.0)), t.constant(Tensor::scalar(0.5)),
                            t.constant(Tensor::scalar(9.0)), w);
  EXPECT_DOUBLE_EQ(r.report.total, 2.5);
}

TEST(LossTotal, ZeroLambdasReturnMainBitExactly) {
  Rng rng(7);
  LossWeights w;
  w.lambda1 = w.lambda2 = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    ad::Tape t;
    const double m = rng.normal(0, 10), g = rng.normal(0, 10), d = rng.normal(0, 10);
    const auto r = loss_total(t.constant(Tensor::scalar(m)), t.constant(Tensor::scalar(g)),
                              t.constant(Tensor::scalar(d)), w);
    EXPECT_EQ(r.report.total, m);
  }
}

TEST(LossTotal, GradientDecomposes) {
  Rng rng(8);
  const Tensor s = oracle::random_tensor(rng, 2, 3), a = oracle::random_tensor(rng, 2, 3),
               b = oracle::random_tensor(rng, 2, 3);
  const std::vector<std::size_t> targets{1, 3};
  LossWeights w;
  w.lambda1 = 0.3;
  w.lambda2 = 0.7;
  auto grads_of = [&](int which) {
    ad::Tape t;
    auto vs = t.leaf(s), va = t.leaf(a), vb = t.leaf(b);
    auto main = loss_main(ad::matmul_nt(vs, ad::concat_rows({va, vb})), targets);
    auto gcl = loss_gcl(va, vb, w.tau);
    auto m = mmd(va, vb, w.rho);
    ad::Var loss = which == 0 ? main : which == 1 ? gcl : which == 2 ? m : loss_total(main, gcl, m, w).total;
    const auto g = t.backward(loss);
    return std::vector<Tensor>{g[vs], g[va], g[vb]};
  };
  const auto gm = grads_of(0), gg = grads_of(1), gd = grads_of(2), gt = grads_of(3);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < gt[k].size(); ++i)
      EXPECT_NEAR(gt[k][i], gm[k][i] + w.lambda1 * gg[k][i] + w.lambda2 * gd[k][i], 1e-12);
}

TEST(LossGradients, FiniteDifferences) {
  Rng rng(9);
  const std::vector<std::size_t> targets{0, 3};
  EXPECT_LT(oracle::check_gradients([&](ad::Tape&, const auto& v) { return loss_main(v[0], targets); },
                                    {oracle::random_tensor(rng, 2, 5)})
                .max_rel_error,
            1e-4);
  EXPECT_LT(oracle::check_gradients([](ad::Tape&, const auto& v) { return loss_gcl(v[0], v[1], 0.5); },
                                    {oracle::random_tensor(rng, 3, 4), oracle::random_tensor(rng, 3, 4)})
                .max_rel_error,
            1e-4);
  EXPECT_LT(oracle::check_gradients([](ad::Tape&, const auto& v) { return loss_mmd(v[0], v[1], v[2], 1.0); },
                                    {oracle::random_tensor(rng, 3, 4), oracle::random_tensor(rng, 3, 4),
                                     oracle::random_tensor(rng, 3, 4)})
                .max_rel_error,
            1e-4);
}
