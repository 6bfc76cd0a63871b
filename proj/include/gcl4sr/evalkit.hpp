#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gcl4sr/autodiff.hpp"
#include "gcl4sr/corpus.hpp"
#include "gcl4sr/error.hpp"
#include "gcl4sr/model.hpp"
#include "gcl4sr/witg.hpp"

namespace gcl4sr {

struct RankResult {
  UserIndex user = 0;
  ItemIndex target = kPadding;
  std::size_t rank = 0;  // 1-based among all real items
};

/// Rank of `target` among all real items sorted by descending score, ties
/// broken by ascending item index. `scores[j]` belongs to item j + 1.
inline std::size_t rank_of(std::span<const double> scores, ItemIndex target) {
  if (target == kPadding || target > scores.size()) {
    throw Error("rank_target: target " + std::to_string(target) + " outside 1.." + std::to_string(scores.size()));
  }
  const double s = scores[target - 1];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > s || (scores[j] == s && j + 1 < target)) ++rank;
  }
  return rank;
}

inline RankResult rank_target(std::span<const double> scores, ItemIndex target, UserIndex user = 0) {
  return {user, target, rank_of(scores, target)};
}

struct CutoffMetrics {
  double hit_ratio = 0.0;
  double ndcg = 0.0;
};

/// HR@K = mean[rank <= K]; NDCG@K = mean[rank <= K ? 1 / log2(rank + 1) : 0].
inline CutoffMetrics metrics(std::span<const RankResult> results, std::size_t k) {
  if (k < 1) throw Error("metrics: K must be >= 1");
  if (results.empty()) throw Error("metrics: no ranked users");
  double hits = 0.0, gain = 0.0;
  for (const auto& r : results) {
    if (r.rank <= k) {
      hits += 1.0;
      gain += 1.0 / std::log2(static_cast<double>(r.rank) + 1.0);
    }
  }
  const double n = static_cast<double>(results.size());
  return {hits / n, gain / n};
}

struct MetricReport {
  std::vector<std::size_t> cutoffs;
  std::vector<CutoffMetrics> values;  // aligned with cutoffs
  std::size_t user_count = 0;
  std::string fingerprint;

  const CutoffMetrics& at(std::size_t k) const {
    for (std::size_t i = 0; i < cutoffs.size(); ++i)
      if (cutoffs[i] == k) return values[i];
    throw Error("metric report has no cutoff K=" + std::to_string(k));
  }
  double hr(std::size_t k) const { return at(k).hit_ratio; }
  double ndcg(std::size_t k) const { return at(k).ndcg; }
};

inline MetricReport summarize(std::span<const RankResult> results, std::vector<std::size_t> cutoffs,
                              std::string fingerprint = {}) {
  MetricReport r;
  std::sort(cutoffs.begin(), cutoffs.end());
  cutoffs.erase(std::unique(cutoffs.begin(), cutoffs.end()), cutoffs.end());
  r.cutoffs = std::move(cutoffs);
  for (std::size_t k : r.cutoffs) r.values.push_back(metrics(results, k));
  r.user_count = results.size();
  r.fingerprint = std::move(fingerprint);
  return r;
}

/// Machine-readable form: one "key=value" per line.
inline void write_report_kv(std::ostream& out, const MetricReport& r) {
  out << std::setprecision(17);
  out << "users=" << r.user_count << '\n';
  if (!r.fingerprint.empty()) out << "fingerprint=" << r.fingerprint << '\n';
  for (std::size_t i = 0; i < r.cutoffs.size(); ++i) {
    out << "hr@" << r.cutoffs[i] << '=' << r.values[i].hit_ratio << '\n';
    out << "ndcg@" << r.cutoffs[i] << '=' << r.values[i].ndcg << '\n';
  }
}

/// Aligned plain-text table.
inline void write_report_table(std::ostream& out, const MetricReport& r) {
  out << std::left << std::setw(10) << "metric";
  for (std::size_t k : r.cutoffs) out << std::right << std::setw(10) << ("@" + std::to_string(k));
  out << '\n' << std::left << std::setw(10) << "HR";
  out << std::fixed << std::setprecision(4);
  for (const auto& v : r.values) out << std::right << std::setw(10) << v.hit_ratio;
  out << '\n' << std::left << std::setw(10) << "NDCG";
  for (const auto& v : r.values) out << std::right << std::setw(10) << v.ndcg;
  out << '\n' << std::defaultfloat << std::setprecision(6) << "users: " << r.user_count << '\n';
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(std::span<const double> xs) {
  if (xs.empty()) throw Error("mean_std: no values");
  MeanStd m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return m;
}

/// One row of a comparison grid: a variant and its per-seed reports.
/// A non-empty `error` marks a variant that failed to finish.
struct GridRow {
  std::string label;
  std::vector<MetricReport> runs;
  std::string error;
};

/// Comparison grid, one row per variant, cells "mean +/- std" over runs.
inline void write_grid(std::ostream& out, std::span<const GridRow> rows, std::span<const std::size_t> cutoffs) {
  out << std::left << std::setw(16) << "variant";
  for (std::size_t k : cutoffs) {
    out << std::right << std::setw(20) << ("HR@" + std::to_string(k)) << std::setw(20) << ("NDCG@" + std::to_string(k));
  }
  out << std::setw(6) << "runs" << '\n';
  for (const auto& row : rows) {
    out << std::left << std::setw(16) << row.label;
    if (!row.error.empty() && row.runs.empty()) {
      out << "failed: " << row.error << '\n';
      continue;
    }
    for (std::size_t k : cutoffs) {
      std::vector<double> hr, nd;
      for (const auto& r : row.runs) {
        hr.push_back(r.hr(k));
        nd.push_back(r.ndcg(k));
      }
      for (const auto& ms : {mean_std(hr), mean_std(nd)}) {
        char cell[48];
        std::snprintf(cell, sizeof cell, "%.4f +/- %.4f", ms.mean, ms.std);
        out << std::right << std::setw(20) << cell;
      }
    }
    out << std::setw(6) << row.runs.size();
    if (!row.error.empty()) out << "  (failed: " << row.error << ')';
    out << '\n';
  }
  out << std::left;
}

// ---------------------------------------------------------------------------
// Model evaluation

enum class EvalMode { kValid, kTest };

struct EvalConfig {
  SamplerConfig sampler;          // depth and size; seed is replaced by eval_seed
  std::uint64_t eval_seed = 0;
  bool unweighted_edges = false;
  std::vector<std::size_t> cutoffs{10, 20};
};

/// Sampler settings for evaluation: a dedicated stream derived from the
/// evaluation seed so metrics are stable across retries.
inline SamplerConfig evaluation_sampler(const EvalConfig& cfg) {
  SamplerConfig s = cfg.sampler;
  s.seed = splitmix64(cfg.eval_seed ^ fnv1a64(streams::kEvaluation));
  return s;
}

struct ScoreRequest {
  UserIndex user = 0;
  std::span<const ItemIndex> prefix;  // already truncated to max_len
};

/// Scores all real items for each request. Requests share one
/// inference-only tape per chunk.
inline std::vector<Tensor> score_prefixes(const ModelParams& params, const TransitionGraph& graph,
                                          std::span<const ScoreRequest> requests, const EvalConfig& cfg,
                                          std::size_t chunk = 64) {
  const SamplerConfig sampler = evaluation_sampler(cfg);
  std::vector<Tensor> out;
  out.reserve(requests.size());
  for (std::size_t lo = 0; lo < requests.size(); lo += chunk) {
    ad::Tape tape;
    Network net(tape, params, ForwardOptions{false, cfg.unweighted_edges, false});
    for (std::size_t r = lo; r < std::min(requests.size(), lo + chunk); ++r) {
      const auto& q = requests[r];
      const SampledView first = sample_view(graph, q.user, q.prefix, sampler, 1);
      const SampledView second = sample_view(graph, q.user, q.prefix, sampler, 2);
      out.push_back(net.forward(q.user, q.prefix, first, second).scores.value());
    }
  }
  return out;
}

inline Tensor score_prefix(const ModelParams& params, const TransitionGraph& graph, UserIndex user,
                           std::span<const ItemIndex> prefix, const EvalConfig& cfg) {
  const ScoreRequest q{user, prefix};
  return std::move(score_prefixes(params, graph, std::span(&q, 1), cfg).front());
}

inline std::span<const ItemIndex> truncate_prefix(std::span<const ItemIndex> items, std::size_t max_len) {
  return items.size() <= max_len ? items : items.last(max_len);
}

/// Ranks each evaluable user's held-out item. Validation input is the
/// training prefix; test input additionally carries the validation item.
/// Valid mode never reads test targets.
inline std::vector<RankResult> rank_split(const ModelParams& params, const SplitDataset& split,
                                          const TransitionGraph& graph, EvalMode mode, const EvalConfig& cfg) {
  std::vector<std::vector<ItemIndex>> prefixes;
  std::vector<ItemIndex> targets;
  std::vector<UserIndex> users;
  for (std::size_t r = 0; r < split.train.size(); ++r) {
    if (!split.evaluable(r)) continue;
    std::vector<ItemIndex> prefix = split.train[r].items;
    ItemIndex target = split.valid_target[r];
    if (mode == EvalMode::kTest) {
      prefix.push_back(split.valid_target[r]);
      target = split.test_target[r];
    }
    prefixes.push_back(std::move(prefix));
    targets.push_back(target);
    users.push_back(split.train[r].user);
  }
  std::vector<ScoreRequest> requests;
  requests.reserve(prefixes.size());
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    requests.push_back({users[i], truncate_prefix(prefixes[i], params.config().max_len)});
  }
  const auto scores = score_prefixes(params, graph, requests, cfg);
  std::vector<RankResult> out;
  out.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out.push_back(rank_target(scores[i].values(), targets[i], users[i]));
  return out;
}

inline MetricReport evaluate(const ModelParams& params, const SplitDataset& split, const TransitionGraph& graph,
                             EvalMode mode, const EvalConfig& cfg, std::string fingerprint = {}) {
  const auto results = rank_split(params, split, graph, mode, cfg);
  if (results.empty()) throw Error("evaluate: no evaluable users (every sequence is shorter than 3)");
  return summarize(results, cfg.cutoffs, std::move(fingerprint));
}

/// Ranks the target of each training pair given its own prefix.
inline std::vector<RankResult> rank_pairs(const ModelParams& params, std::span<const TrainingPair> pairs,
                                          const TransitionGraph& graph, const EvalConfig& cfg) {
  std::vector<ScoreRequest> requests;
  requests.reserve(pairs.size());
  for (const auto& p : pairs) requests.push_back({p.user, p.prefix()});
  const auto scores = score_prefixes(params, graph, requests, cfg);
  std::vector<RankResult> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) out.push_back(rank_target(scores[i].values(), pairs[i].target, pairs[i].user));
  return out;
}

}  // namespace gcl4sr
