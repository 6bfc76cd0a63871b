#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "gcl4sr/autodiff.hpp"
#include "gcl4sr/error.hpp"

namespace gcl4sr {

struct LossWeights {
  double lambda1 = 0.1;  // graph contrastive term
  double lambda2 = 0.1;  // MMD alignment term
  double tau = 0.5;
  double rho = 1.0;      // Gaussian kernel bandwidth
  bool gcl_symmetric = true;

  void validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw Error("loss weights: lambdas must be non-negative");
    if (!(tau > 0.0)) throw Error("loss weights: tau must be positive");
    if (!(rho > 0.0)) throw Error("loss weights: rho must be positive");
  }
};

/// Mean over rows of -log softmax(scores)[target]. `targets` are column
/// indices into the score rows.
inline ad::Var loss_main(const ad::Var& scores, std::span<const std::size_t> targets) {
  if (targets.size() != scores.rows()) throw ShapeError("loss_main: one target per row required");
  ad::Var probs = ad::softmax_rows(scores);
  return ad::scale(ad::mean(ad::log(ad::pick(probs, targets))), -1.0);
}

/// In-batch InfoNCE over cosine similarities: row i of `first` is pulled
/// toward row i of `second` and pushed from every other row. When
/// `symmetric`, the second->first direction is averaged in.
inline ad::Var loss_gcl(const ad::Var& first, const ad::Var& second, double tau, bool symmetric = true) {
  if (first.value().shape() != second.value().shape()) throw ShapeError("loss_gcl: view batches differ in shape");
  if (first.rows() == 0) throw ShapeError("loss_gcl: empty batch");
  if (!(tau > 0.0)) throw Error("loss_gcl: tau must be positive");
  const std::size_t b = first.rows();
  std::vector<std::size_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = i;
  auto direction = [&](const ad::Var& sim) {
    return ad::scale(ad::mean(ad::log(ad::pick(ad::softmax_rows(sim), diag))), -1.0);
  };
  ad::Var sim = ad::scale(ad::cosine_matrix(first, second), 1.0 / tau);
  ad::Var forward = direction(sim);
  if (!symmetric) return forward;
  ad::Var backward = direction(ad::transpose(sim));
  return ad::scale(ad::add(forward, backward), 0.5);
}

/// Biased (diagonal-inclusive) squared MMD with Gaussian kernel
/// exp(-|x - y|^2 / (2 rho^2)).
inline ad::Var mmd(const ad::Var& x, const ad::Var& y, double rho) {
  if (x.rows() == 0 || y.rows() == 0) throw ShapeError("mmd: empty sample");
  const double c = -1.0 / (2.0 * rho * rho);
  auto kernel_mean = [&](const ad::Var& a, const ad::Var& b) {
    return ad::mean(ad::exp(ad::scale(ad::pairwise_sqdist(a, b), c)));
  };
  return ad::sub(ad::add(kernel_mean(x, x), kernel_mean(y, y)), ad::scale(kernel_mean(x, y), 2.0));
}

/// MMD(E0, Q') + MMD(E0, Q'').
inline ad::Var loss_mmd(const ad::Var& local, const ad::Var& gated_first, const ad::Var& gated_second, double rho) {
  return ad::add(mmd(local, gated_first, rho), mmd(local, gated_second, rho));
}

struct BatchLossReport {
  double total = 0.0;
  double main = 0.0;
  double gcl = 0.0;
  double mmd = 0.0;
};

struct TotalLoss {
  ad::Var total;
  BatchLossReport report;
};

/// total = main + lambda1 * gcl + lambda2 * mmd.
inline TotalLoss loss_total(const ad::Var& main, const ad::Var& gcl, const ad::Var& mmd_term, const LossWeights& w) {
  ad::Var total = ad::add(ad::add(main, ad::scale(gcl, w.lambda1)), ad::scale(mmd_term, w.lambda2));
  return {total, {total.value().item(), main.value().item(), gcl.value().item(), mmd_term.value().item()}};
}

}  // namespace gcl4sr
