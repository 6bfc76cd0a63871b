#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gcl4sr/autodiff.hpp"
#include "gcl4sr/corpus.hpp"
#include "gcl4sr/error.hpp"
#include "gcl4sr/evalkit.hpp"
#include "gcl4sr/model.hpp"
#include "gcl4sr/objectives.hpp"
#include "gcl4sr/rng.hpp"
#include "gcl4sr/witg.hpp"

namespace gcl4sr {

enum class Ablation {
  kFull,             // all three loss terms
  kNoGcl,            // lambda1 = 0
  kNoGclNoMmd,       // lambda1 = lambda2 = 0
  kUnweightedEdges,  // first GNN layer sees weight 1 on every edge
  kBackboneOnly,     // transformer branch only, no graph inputs to fusion
};

inline const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kNoGcl: return "no_gcl";
    case Ablation::kNoGclNoMmd: return "no_gcl_no_mmd";
    case Ablation::kUnweightedEdges: return "unweighted_edges";
    case Ablation::kBackboneOnly: return "backbone_only";
  }
  return "?";
}

/// Row label used in the ablation grid.
inline const char* ablation_label(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kNoGcl: return "w/o-G";
    case Ablation::kNoGclNoMmd: return "w/o-GM";
    case Ablation::kUnweightedEdges: return "w/o-W";
    case Ablation::kBackboneOnly: return "backbone-only";
  }
  return "?";
}

inline Ablation parse_ablation(const std::string& s) {
  for (Ablation a : {Ablation::kFull, Ablation::kNoGcl, Ablation::kNoGclNoMmd, Ablation::kUnweightedEdges,
                     Ablation::kBackboneOnly}) {
    if (s == ablation_name(a) || s == ablation_label(a)) return a;
  }
  throw Error("unknown ablation '" + s + "'");
}

struct TrainConfig {
  // Model shape.
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t max_len = 50;
  double dropout = 0.2;

  // Optimizer.
  std::size_t batch_size = 64;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double l2 = 5e-5;
  std::size_t max_epochs = 300;
  std::size_t patience = 20;
  std::size_t lr_decay_interval = 20;
  double lr_decay_factor = 0.5;

  std::uint64_t seed = 42;
  std::uint64_t eval_seed = 7;
  std::size_t eval_interval = 1;

  LossWeights weights;
  bool rho_median_heuristic = false;
  SamplerConfig sampler;
  bool resample_per_epoch = true;
  Ablation ablation = Ablation::kFull;

  ModelConfig model_config(std::size_t item_count, std::size_t user_count) const {
    ModelConfig m;
    m.item_count = item_count;
    m.user_count = user_count;
    m.dim = dim;
    m.heads = heads;
    m.layers = layers;
    m.max_len = max_len;
    m.dropout = dropout;
    return m;
  }

  void validate() const {
    if (batch_size == 0) throw Error("train config: batch_size must be positive");
    if (!(learning_rate >= 0.0)) throw Error("train config: learning_rate must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw Error("train config: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw Error("train config: eps must be positive");
    if (!(l2 >= 0.0)) throw Error("train config: l2 must be non-negative");
    if (lr_decay_interval == 0 || !(lr_decay_factor > 0.0)) throw Error("train config: invalid lr decay");
    if (eval_interval == 0) throw Error("train config: eval_interval must be positive");
    if (sampler.depth < 1 || sampler.size < 1) throw Error("train config: sampler depth/size must be >= 1");
    weights.validate();
  }
};

/// Effective settings for an ablation variant.
struct EffectiveConfig {
  LossWeights weights;
  bool unweighted_edges = false;
  bool backbone_only = false;
};

inline EffectiveConfig apply_ablation(const TrainConfig& cfg) {
  EffectiveConfig e{cfg.weights, false, false};
  switch (cfg.ablation) {
    case Ablation::kFull: break;
    case Ablation::kNoGcl: e.weights.lambda1 = 0.0; break;
    case Ablation::kNoGclNoMmd:
      e.weights.lambda1 = 0.0;
      e.weights.lambda2 = 0.0;
      break;
    case Ablation::kUnweightedEdges: e.unweighted_edges = true; break;
    case Ablation::kBackboneOnly:
      e.weights.lambda1 = 0.0;
      e.weights.lambda2 = 0.0;
      e.backbone_only = true;
      break;
  }
  return e;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;

  explicit AdamState(std::span<const Tensor> values) {
    for (const Tensor& v : values) {
      first_moment.emplace_back(v.shape());
      second_moment.emplace_back(v.shape());
    }
  }
  explicit AdamState(const ModelParams& params) : AdamState(params.values()) {}
};

struct AdamSettings {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Bias-corrected Adam with decoupled weight decay:
///   p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
inline void adam_update(std::span<Tensor> values, AdamState& state, std::span<const Tensor> grads,
                        const AdamSettings& s) {
  if (grads.size() != values.size() || state.first_moment.size() != values.size()) {
    throw ShapeError("adam_update: one gradient and moment pair per array required");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(s.beta1, t);
  const double bc2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < values.size(); ++i) {
    Tensor& p = values[i];
    const Tensor& g = grads[i];
    if (g.shape() != p.shape()) throw ShapeError("adam_update: gradient shape mismatch at array " + std::to_string(i));
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
      v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= s.learning_rate * (mhat / (std::sqrt(vhat) + s.eps) + s.weight_decay * p[j]);
    }
  }
}

/// Adam over every model array; the padding embedding row is forced back
/// to zero afterwards.
inline void adam_step(ModelParams& params, AdamState& state, std::span<const Tensor> grads, const AdamSettings& s) {
  adam_update(params.values(), state, grads, s);
  params.zero_padding_row();
}

/// Step decay: lr * factor^(epoch / interval).
inline double learning_rate_at(const TrainConfig& cfg, std::size_t epoch) {
  return cfg.learning_rate * std::pow(cfg.lr_decay_factor, static_cast<double>(epoch / cfg.lr_decay_interval));
}

// ---------------------------------------------------------------------------
// Batch loss

struct ViewPair {
  SampledView first;
  SampledView second;
};

inline ViewPair sample_view_pair(const TransitionGraph& graph, const TrainingPair& row, const SamplerConfig& sampler,
                                 std::uint64_t epoch) {
  return {sample_view(graph, row.user, row.prefix(), sampler, 1, epoch),
          sample_view(graph, row.user, row.prefix(), sampler, 2, epoch)};
}

/// Median of pairwise Euclidean distances among the rows of a and b
/// (stacked); 1 when degenerate.
inline double median_pairwise_distance(const Tensor& a, const Tensor& b) {
  std::vector<const double*> rows;
  for (std::size_t i = 0; i < a.rows(); ++i) rows.push_back(a.row_span(i).data());
  for (std::size_t i = 0; i < b.rows(); ++i) rows.push_back(b.row_span(i).data());
  std::vector<double> d;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += (rows[i][k] - rows[j][k]) * (rows[i][k] - rows[j][k]);
      d.push_back(std::sqrt(s));
    }
  if (d.empty()) return 1.0;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  const double med = d[d.size() / 2];
  return med > 0.0 ? med : 1.0;
}

struct BatchLoss {
  TotalLoss loss;
  ad::Var main, gcl, mmd;
};

/// Builds the three-term objective for a batch of rows on `net`'s tape.
/// Auxiliary terms are computed once per row on the row's own prefix.
inline BatchLoss batch_loss(Network& net, std::span<const TrainingPair> rows, std::span<const ViewPair> views,
                            const EffectiveConfig& eff, bool rho_median_heuristic = false) {
  if (rows.empty()) throw Error("batch_loss: empty batch");
  if (views.size() != rows.size()) throw Error("batch_loss: one view pair per row required");
  std::vector<ad::Var> scores, z_first, z_second, mmd_terms;
  std::vector<std::size_t> targets;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const TrainingPair& row = rows[r];
    if (row.target == kPadding) throw Error("batch_loss: padding target");
    targets.push_back(row.target - 1);
    if (eff.backbone_only) {
      ad::Var seq = net.transformer_encode(row.prefix());
      ad::Var zeros = net.tape().constant(Tensor::zeros(seq.rows(), seq.cols()));
      scores.push_back(net.fuse_and_score(zeros, zeros, seq).scores);
      continue;
    }
    RowOutputs out = net.forward(row.user, row.prefix(), views[r].first, views[r].second);
    scores.push_back(out.scores);
    z_first.push_back(ad::masked_mean_rows(out.graph_first));
    z_second.push_back(ad::masked_mean_rows(out.graph_second));
    const double rho = rho_median_heuristic
                           ? median_pairwise_distance(out.local.value(), out.gated_first.value())
                           : eff.weights.rho;
    mmd_terms.push_back(loss_mmd(out.local, out.gated_first, out.gated_second, rho));
  }
  BatchLoss b;
  b.main = loss_main(ad::concat_rows(scores), targets);
  if (eff.backbone_only) {
    b.gcl = net.tape().constant(Tensor::scalar(0.0));
    b.mmd = net.tape().constant(Tensor::scalar(0.0));
  } else {
    b.gcl = loss_gcl(ad::concat_rows(z_first), ad::concat_rows(z_second), eff.weights.tau, eff.weights.gcl_symmetric);
    b.mmd = ad::scale(ad::sum(ad::concat_rows(mmd_terms)), 1.0 / static_cast<double>(rows.size()));
  }
  b.loss = loss_total(b.main, b.gcl, b.mmd, eff.weights);
  return b;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double mean_total = 0.0;
  double mean_main = 0.0;
  double mean_gcl = 0.0;
  double mean_mmd = 0.0;
  std::optional<double> valid_hr10;
};

struct TrainResult {
  ModelParams best;
  ModelParams last;
  std::size_t best_epoch = 0;  // 0 = initial parameters
  double best_valid_hr10 = -1.0;
  std::vector<EpochRecord> history;
  std::vector<BatchLossReport> steps;
};

inline std::vector<TrainingPair> training_pairs(const SplitDataset& split, std::size_t max_len) {
  std::vector<TrainingPair> pairs;
  for (const auto& s : split.train) {
    auto p = expand_subsequences(s, max_len);
    pairs.insert(pairs.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  }
  return pairs;
}

inline EvalConfig eval_config_for(const TrainConfig& cfg) {
  EvalConfig e;
  e.sampler = cfg.sampler;
  e.eval_seed = cfg.eval_seed;
  e.unweighted_edges = apply_ablation(cfg).unweighted_edges;
  return e;
}

namespace detail {
inline std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

/// Scores every real item with the backbone-only path (no graph branch).
inline Tensor score_backbone(const ModelParams& params, std::span<const ItemIndex> prefix) {
  ad::Tape tape;
  Network net(tape, params, ForwardOptions{});
  ad::Var seq = net.transformer_encode(prefix);
  ad::Var zeros = tape.constant(Tensor::zeros(seq.rows(), seq.cols()));
  return net.fuse_and_score(zeros, zeros, seq).scores.value();
}

/// Validation/test metrics honoring the ablation's forward path.
inline MetricReport evaluate_variant(const ModelParams& params, const SplitDataset& split, const TransitionGraph& graph,
                                     EvalMode mode, const TrainConfig& cfg,
                                     std::vector<std::size_t> cutoffs = {10, 20}, std::string fingerprint = {}) {
  EvalConfig ec = eval_config_for(cfg);
  ec.cutoffs = std::move(cutoffs);
  if (!apply_ablation(cfg).backbone_only) return evaluate(params, split, graph, mode, ec, std::move(fingerprint));
  std::vector<RankResult> results;
  for (std::size_t r = 0; r < split.train.size(); ++r) {
    if (!split.evaluable(r)) continue;
    std::vector<ItemIndex> prefix = split.train[r].items;
    ItemIndex target = split.valid_target[r];
    if (mode == EvalMode::kTest) {
      prefix.push_back(target);
      target = split.test_target[r];
    }
    const Tensor scores = score_backbone(params, truncate_prefix(prefix, params.config().max_len));
    results.push_back(rank_target(scores.values(), target, split.train[r].user));
  }
  if (results.empty()) throw Error("evaluate: no evaluable users");
  return summarize(results, ec.cutoffs, std::move(fingerprint));
}

/// Mini-batch multi-task training with early stopping on validation HR@10.
///
/// `log`, when given, receives one line per step and one per evaluation.
/// Returns the parameters with the best validation HR@10 (the initial
/// parameters count as epoch 0), plus the last parameters.
inline TrainResult train(const SplitDataset& split, const TransitionGraph& graph, const TrainConfig& cfg,
                         std::ostream* log = nullptr) {
  cfg.validate();
  const EffectiveConfig eff = apply_ablation(cfg);
  const std::vector<TrainingPair> pairs = training_pairs(split, cfg.max_len);
  if (pairs.empty()) throw Error("train: no training pairs (every training sequence has fewer than 2 items)");
  const bool can_validate = split.evaluable_count() > 0;

  TrainResult result;
  ModelParams params = ModelParams::initialized(cfg.model_config(split.item_count, split.user_count), cfg.seed);
  AdamState adam(params);
  result.best = params;

  auto validate = [&](std::size_t epoch) -> std::optional<double> {
    if (!can_validate) return std::nullopt;
    const MetricReport rep = evaluate_variant(params, split, graph, EvalMode::kValid, cfg);
    if (log) {
      *log << "eval epoch=" << epoch << " split=valid";
      for (std::size_t i = 0; i < rep.cutoffs.size(); ++i) {
        *log << " hr@" << rep.cutoffs[i] << '=' << detail::fmt17(rep.values[i].hit_ratio) << " ndcg@"
             << rep.cutoffs[i] << '=' << detail::fmt17(rep.values[i].ndcg);
      }
      *log << '\n';
    }
    return rep.hr(10);
  };

  if (auto v = validate(0)) result.best_valid_hr10 = *v;

  std::vector<std::size_t> order(pairs.size());
  std::size_t since_improvement = 0;
  std::vector<TrainingPair> batch_rows;
  std::vector<ViewPair> batch_views;
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = learning_rate_at(cfg, epoch - 1);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle = Rng::stream(cfg.seed, streams::kShuffle, {epoch});
    shuffle.shuffle(order);
    const std::uint64_t view_epoch = cfg.resample_per_epoch ? epoch : 0;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = lr;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch_rows.clear();
      batch_views.clear();
      for (std::size_t i = start; i < end; ++i) {
        batch_rows.push_back(pairs[order[i]]);
        if (!eff.backbone_only) batch_views.push_back(sample_view_pair(graph, pairs[order[i]], cfg.sampler, view_epoch));
      }
      if (eff.backbone_only) batch_views.resize(batch_rows.size());
      ++step;
      ad::Tape tape;
      Network net(tape, params, ForwardOptions{true, eff.unweighted_edges},
                  Rng::stream(cfg.seed, streams::kDropout, {step}));
      const BatchLoss b = batch_loss(net, batch_rows, batch_views, eff, cfg.rho_median_heuristic);
      const BatchLossReport& rep = b.loss.report;
      if (!std::isfinite(rep.total)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           " (main=" + detail::fmt17(rep.main) + " gcl=" + detail::fmt17(rep.gcl) +
                           " mmd=" + detail::fmt17(rep.mmd) + ")");
      }
      const ad::Gradients grads = tape.backward(b.loss.total);
      std::vector<Tensor> g;
      g.reserve(params.count());
      for (const auto& v : net.vars()) g.push_back(grads[v]);
      adam_step(params, adam, g, AdamSettings{lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.l2});

      result.steps.push_back(rep);
      rec.mean_total += rep.total;
      rec.mean_main += rep.main;
      rec.mean_gcl += rep.gcl;
      rec.mean_mmd += rep.mmd;
      ++batches;
      if (log) {
        *log << "step=" << step << " epoch=" << epoch << " lr=" << detail::fmt17(lr)
             << " main=" << detail::fmt17(rep.main) << " gcl=" << detail::fmt17(rep.gcl)
             << " mmd=" << detail::fmt17(rep.mmd) << " total=" << detail::fmt17(rep.total) << '\n';
      }
    }
    const double nb = static_cast<double>(batches);
    rec.mean_total /= nb;
    rec.mean_main /= nb;
    rec.mean_gcl /= nb;
    rec.mean_mmd /= nb;

    if (epoch % cfg.eval_interval == 0 || epoch == cfg.max_epochs) {
      rec.valid_hr10 = validate(epoch);
      if (rec.valid_hr10) {
        if (*rec.valid_hr10 > result.best_valid_hr10) {
          result.best_valid_hr10 = *rec.valid_hr10;
          result.best = params;
          result.best_epoch = epoch;
          since_improvement = 0;
        } else {
          since_improvement += cfg.eval_interval;
        }
      } else {
        result.best = params;
        result.best_epoch = epoch;
      }
    }
    result.history.push_back(rec);
    if (can_validate && cfg.patience > 0 && since_improvement >= cfg.patience) break;
  }
  result.last = std::move(params);
  return result;
}

}  // namespace gcl4sr
