#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gcl4sr/autodiff.hpp"
#include "gcl4sr/corpus.hpp"
#include "gcl4sr/error.hpp"
#include "gcl4sr/rng.hpp"
#include "gcl4sr/tensor.hpp"
#include "gcl4sr/witg.hpp"

namespace gcl4sr {

struct ModelConfig {
  std::size_t item_count = 0;  // |V|; the embedding table has |V| + 1 rows
  std::size_t user_count = 0;
  std::size_t dim = 64;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t max_len = 50;
  double dropout = 0.2;

  void validate() const {
    if (item_count == 0 || user_count == 0) throw Error("model config: empty vocabulary");
    if (dim == 0 || heads == 0 || dim % heads != 0) throw Error("model config: dim must be a positive multiple of heads");
    if (layers == 0 || max_len == 0) throw Error("model config: layers and max_len must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("model config: dropout must lie in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Slot indices of every learnable array inside ModelParams.
struct ParamSlots {
  struct Layer {
    std::vector<std::size_t> query, key, value;  // one d x d/h matrix per head
    std::size_t output = 0;                      // W^h, d x d
    std::size_t ln1_gain = 0, ln1_bias = 0;
    std::size_t ffn_w1 = 0, ffn_b1 = 0, ffn_w2 = 0, ffn_b2 = 0;
    std::size_t ln2_gain = 0, ln2_bias = 0;

    friend bool operator==(const Layer&, const Layer&) = default;
  };
  std::size_t item_embedding = 0, user_embedding = 0, position_embedding = 0;
  std::size_t gnn_w1 = 0, gnn_b1 = 0, gnn_w2 = 0, gnn_b2 = 0;
  std::size_t gate_w1 = 0, gate_w2 = 0;
  std::size_t fuse_transform = 0, fuse_projection = 0, fuse_query = 0;
  std::vector<Layer> layers;

  friend bool operator==(const ParamSlots&, const ParamSlots&) = default;
};

/// All learnable arrays, stored in a fixed registration order with names.
class ModelParams {
 public:
  ModelParams() = default;

  /// Allocates every array with its exact shape; values are zero.
  explicit ModelParams(const ModelConfig& config) : config_(config) {
    config.validate();
    const std::size_t d = config.dim, dh = config.dim / config.heads;
    slots_.item_embedding = add("item_embedding", config.item_count + 1, d);
    slots_.user_embedding = add("user_embedding", config.user_count, d);
    slots_.position_embedding = add("position_embedding", config.max_len, d);
    slots_.gnn_w1 = add("gnn.w1", d, d);
    slots_.gnn_b1 = add("gnn.b1", 1, d);
    slots_.gnn_w2 = add("gnn.w2", 2 * d, d);
    slots_.gnn_b2 = add("gnn.b2", 1, d);
    slots_.gate_w1 = add("gate.w1", d, 1);
    slots_.gate_w2 = add("gate.w2", config.max_len, d);
    for (std::size_t l = 0; l < config.layers; ++l) {
      const std::string p = "encoder." + std::to_string(l) + ".";
      ParamSlots::Layer layer;
      for (std::size_t h = 0; h < config.heads; ++h) {
        const std::string hs = std::to_string(h);
        layer.query.push_back(add(p + "query." + hs, d, dh));
        layer.key.push_back(add(p + "key." + hs, d, dh));
        layer.value.push_back(add(p + "value." + hs, d, dh));
      }
      layer.output = add(p + "output", d, d);
      layer.ln1_gain = add(p + "ln1.gain", 1, d);
      layer.ln1_bias = add(p + "ln1.bias", 1, d);
      layer.ffn_w1 = add(p + "ffn.w1", d, d);
      layer.ffn_b1 = add(p + "ffn.b1", 1, d);
      layer.ffn_w2 = add(p + "ffn.w2", d, d);
      layer.ffn_b2 = add(p + "ffn.b2", 1, d);
      layer.ln2_gain = add(p + "ln2.gain", 1, d);
      layer.ln2_bias = add(p + "ln2.bias", 1, d);
      slots_.layers.push_back(std::move(layer));
    }
    slots_.fuse_transform = add("fuse.transform", 3 * d, d);
    slots_.fuse_projection = add("fuse.projection", d, d);
    slots_.fuse_query = add("fuse.query", d, 1);
  }

  /// Random initialization: embeddings ~ N(0, 1/d), weight matrices
  /// Xavier-normal, biases 0, layer-norm gains 1. Padding row stays zero.
  static ModelParams initialized(const ModelConfig& config, std::uint64_t seed) {
    ModelParams p(config);
    Rng rng = Rng::stream(seed, streams::kInit);
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(config.dim));
    for (std::size_t i = 0; i < p.values_.size(); ++i) {
      Tensor& t = p.values_[i];
      const std::string& name = p.names_[i];
      const bool is_embedding = name.ends_with("embedding");
      const bool is_bias = name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2");
      const bool is_gain = name.ends_with(".gain");
      if (is_gain) {
        t.fill(1.0);
      } else if (is_bias) {
        t.fill(0.0);
      } else {
        const double stddev = is_embedding ? emb_std : std::sqrt(2.0 / static_cast<double>(t.rows() + t.cols()));
        for (double& v : t.values()) v = rng.normal(0.0, stddev);
      }
    }
    p.zero_padding_row();
    return p;
  }

  const ModelConfig& config() const noexcept { return config_; }
  const ParamSlots& slots() const noexcept { return slots_; }
  std::size_t count() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const Tensor& value(std::size_t i) const { return values_.at(i); }
  Tensor& value(std::size_t i) { return values_.at(i); }
  std::span<const Tensor> values() const noexcept { return values_; }
  std::span<Tensor> values() noexcept { return values_; }

  std::size_t find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return i;
    throw Error("no parameter named '" + std::string(name) + "'");
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  void zero_padding_row() {
    for (double& v : values_[slots_.item_embedding].row_span(kPadding)) v = 0.0;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
    names_.push_back(std::move(name));
    values_.push_back(Tensor::zeros(rows, cols));
    return values_.size() - 1;
  }

  ModelConfig config_;
  ParamSlots slots_;
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

/// Per-row network outputs needed by the prediction and auxiliary losses.
struct RowOutputs {
  ad::Var scores;        // 1 x |V|, column j scores item j + 1
  ad::Var graph_first;   // H', n x d (before gating)
  ad::Var graph_second;  // H''
  ad::Var gated_first;   // Q'
  ad::Var gated_second;  // Q''
  ad::Var local;         // E_S^(0), n x d
  ad::Var sequence;      // H^L, n x d
  ad::Var fused;         // M, 1 x d
  ad::Var attention;     // pooling weights, 1 x n
};

struct ForwardOptions {
  bool train = false;
  /// Replaces normalized edge weights with 1 in the first GNN layer.
  bool unweighted_edges = false;
  /// Parameters are bound as constants when false (inference only).
  bool gradients = true;
};

/// Binds ModelParams onto a tape for one forward/backward pass.
///
/// Transformer positions are counted from the start of the prefix, and only
/// the n real positions are computed; padded slots of a window would be
/// masked out of every attention row and pooling step, so they never
/// influence a real position's output.
class Network {
 public:
  Network(ad::Tape& tape, const ModelParams& params, ForwardOptions options, Rng dropout_rng = Rng(0))
      : tape_(tape), params_(params), options_(options), dropout_rng_(std::move(dropout_rng)) {
    vars_.reserve(params.count());
    for (std::size_t i = 0; i < params.count(); ++i) vars_.push_back(options.gradients ? tape.leaf(params.value(i)) : tape.constant(params.value(i)));
    std::vector<std::size_t> real(params.config().item_count);
    for (std::size_t j = 0; j < real.size(); ++j) real[j] = j + 1;
    real_items_ = ad::gather_rows(var(slots().item_embedding), real);
  }

  const ad::Var& var(std::size_t slot) const { return vars_.at(slot); }
  const std::vector<ad::Var>& vars() const noexcept { return vars_; }
  const ModelConfig& config() const noexcept { return params_.config(); }
  const ParamSlots& slots() const noexcept { return params_.slots(); }
  ad::Tape& tape() noexcept { return tape_; }

  /// Two-layer shared GNN on one view; returns rows for the anchors in
  /// sequence order (n x d). Layer 2 is evaluated only at the anchors and
  /// layer 1 only at the anchors and their view neighbors.
  ad::Var gnn_encode(const SampledView& view) {
    const std::size_t m = view.nodes.size();

    // Distinct anchor rows, then every neighbor of an anchor; `slot1[v]` is
    // v's row in the layer-1 output or npos.
    constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::vector<std::size_t> slot1(m, npos), rows1;
    for (std::size_t a : view.anchor_rows) {
      if (slot1[a] == npos) {
        slot1[a] = rows1.size();
        rows1.push_back(a);
      }
    }
    const std::size_t anchor_count = rows1.size();
    for (std::size_t i = 0; i < anchor_count; ++i) {
      for (std::size_t u : view.neighbor_index[rows1[i]]) {
        if (slot1[u] == npos) {
          slot1[u] = rows1.size();
          rows1.push_back(u);
        }
      }
    }

    // Layer 1 pre-activation: sum_u w (h0_u W1) + h0_v W1, read from rows
    // of E W1 (computed once per tape).
    std::vector<ad::WeightedEdge> weighted;
    for (std::size_t i = 0; i < rows1.size(); ++i) weighted.push_back({i, view.nodes[rows1[i]], 1.0});
    for (const auto& e : view.edges) {
      const double w = options_.unweighted_edges ? 1.0 : e.normalized;
      if (slot1[e.a] != npos) weighted.push_back({slot1[e.a], view.nodes[e.b], w});
      if (slot1[e.b] != npos) weighted.push_back({slot1[e.b], view.nodes[e.a], w});
    }
    ad::Var agg1 = ad::propagate(projected_items(), std::move(weighted), rows1.size());
    ad::Var h1 = ad::relu(ad::add_row(agg1, var(slots().gnn_b1)));

    std::vector<ad::WeightedEdge> mean_edges;
    for (std::size_t i = 0; i < anchor_count; ++i) {
      const auto& nbrs = view.neighbor_index[rows1[i]];
      const double inv = nbrs.empty() ? 0.0 : 1.0 / static_cast<double>(nbrs.size());
      for (std::size_t u : nbrs) mean_edges.push_back({i, slot1[u], inv});
    }
    std::vector<std::size_t> anchor_slots(anchor_count);
    for (std::size_t i = 0; i < anchor_count; ++i) anchor_slots[i] = i;
    ad::Var self2 = anchor_count == rows1.size() ? h1 : ad::gather_rows(h1, anchor_slots);
    ad::Var agg2 = ad::propagate(h1, std::move(mean_edges), anchor_count);
    ad::Var h2 = ad::relu(
        ad::add_row(ad::matmul(ad::concat_cols({self2, agg2}), var(slots().gnn_w2)), var(slots().gnn_b2)));

    std::vector<std::size_t> out_rows;
    out_rows.reserve(view.anchor_rows.size());
    for (std::size_t a : view.anchor_rows) out_rows.push_back(slot1[a]);
    return ad::gather_rows(h2, out_rows);
  }

  /// Q = H * sigmoid(H W_g1 + W_g2[0:n] p_u^T), gate broadcast across features.
  ad::Var user_gate(const ad::Var& h, UserIndex user) {
    const std::size_t n = h.rows();
    if (n > config().max_len) throw ShapeError("user_gate: sequence longer than max_len");
    std::vector<std::size_t> positions(n);
    for (std::size_t t = 0; t < n; ++t) positions[t] = t;
    const std::size_t u[1] = {user};
    ad::Var p_u = ad::gather_rows(var(slots().user_embedding), u);
    ad::Var pos_rows = ad::gather_rows(var(slots().gate_w2), positions);
    ad::Var gate = ad::sigmoid(ad::add(ad::matmul(h, var(slots().gate_w1)), ad::matmul_nt(pos_rows, p_u)));
    return ad::mul_col(h, gate);
  }

  /// Causal multi-head self-attention stack over the prefix (n x d output).
  /// `attention_out`, when given, receives each layer's per-head weights.
  ad::Var transformer_encode(std::span<const ItemIndex> prefix, std::vector<Tensor>* attention_out = nullptr) {
    const std::size_t n = prefix.size();
    if (n == 0 || n > config().max_len) throw ShapeError("transformer_encode: prefix length out of range");
    const std::size_t d = config().dim;
    std::vector<std::size_t> positions(n);
    for (std::size_t t = 0; t < n; ++t) positions[t] = t;
    ad::Var x = ad::add(ad::gather_rows(var(slots().item_embedding), prefix),
                        ad::gather_rows(var(slots().position_embedding), positions));
    x = drop(x);

    std::vector<bool> causal(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) causal[i * n + j] = j <= i;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(d));

    for (const auto& layer : slots().layers) {
      std::vector<ad::Var> heads;
      for (std::size_t h = 0; h < layer.query.size(); ++h) {
        ad::Var q = ad::matmul(x, var(layer.query[h]));
        ad::Var k = ad::matmul(x, var(layer.key[h]));
        ad::Var v = ad::matmul(x, var(layer.value[h]));
        ad::Var att = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_scale), &causal);
        if (attention_out) attention_out->push_back(att.value());
        heads.push_back(ad::matmul(att, v));
      }
      ad::Var attended = ad::matmul(ad::concat_cols(heads), var(layer.output));
      x = ad::layer_norm(ad::add(x, drop(attended)), var(layer.ln1_gain), var(layer.ln1_bias));
      ad::Var ffn = ad::add_row(
          ad::matmul(ad::relu(ad::add_row(ad::matmul(x, var(layer.ffn_w1)), var(layer.ffn_b1))), var(layer.ffn_w2)),
          var(layer.ffn_b2));
      x = ad::layer_norm(ad::add(x, drop(ffn)), var(layer.ln2_gain), var(layer.ln2_bias));
    }
    return x;
  }

  struct Fused {
    ad::Var fused;      // 1 x d
    ad::Var attention;  // 1 x n
    ad::Var scores;     // 1 x |V|
  };

  /// M = AttNet(concat(Q', Q'', H^L) W_T); scores = M E^T over real items.
  /// AttNet is additive pooling: alpha = softmax_t((G A_f) a_f), M = sum alpha_t G_t.
  Fused fuse_and_score(const ad::Var& q_first, const ad::Var& q_second, const ad::Var& sequence) {
    if (q_first.rows() == 0) throw ShapeError("fuse_and_score: no positions to pool");
    ad::Var g = ad::matmul(ad::concat_cols({q_first, q_second, sequence}), var(slots().fuse_transform));
    ad::Var logits = ad::matmul(ad::matmul(g, var(slots().fuse_projection)), var(slots().fuse_query));
    ad::Var alpha = ad::softmax_rows(ad::transpose(logits));
    ad::Var m = ad::matmul(alpha, g);
    return {m, alpha, ad::matmul_nt(m, real_items_)};
  }

  /// Full forward for one prefix with its two sampled views.
  RowOutputs forward(UserIndex user, std::span<const ItemIndex> prefix, const SampledView& first,
                     const SampledView& second) {
    RowOutputs out;
    out.graph_first = gnn_encode(first);
    out.graph_second = gnn_encode(second);
    if (out.graph_first.rows() != prefix.size() || out.graph_second.rows() != prefix.size()) {
      throw ShapeError("forward: view anchors do not match the prefix");
    }
    out.gated_first = user_gate(out.graph_first, user);
    out.gated_second = user_gate(out.graph_second, user);
    out.local = ad::gather_rows(var(slots().item_embedding), prefix);
    out.sequence = transformer_encode(prefix);
    Fused f = fuse_and_score(out.gated_first, out.gated_second, out.sequence);
    out.fused = f.fused;
    out.attention = f.attention;
    out.scores = f.scores;
    return out;
  }

 private:
  const ad::Var& projected_items() {
    if (!projected_items_) projected_items_ = ad::matmul(var(slots().item_embedding), var(slots().gnn_w1));
    return *projected_items_;
  }

  ad::Var drop(const ad::Var& x) { return ad::dropout(x, config().dropout, dropout_rng_, options_.train); }

  ad::Tape& tape_;
  const ModelParams& params_;
  ForwardOptions options_;
  Rng dropout_rng_;
  std::vector<ad::Var> vars_;
  ad::Var real_items_;
  std::optional<ad::Var> projected_items_;
};

}  // namespace gcl4sr
