#pragma once

#include <algorithm>
#include <array>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gcl4sr/corpus.hpp"
#include "gcl4sr/error.hpp"
#include "gcl4sr/rng.hpp"

namespace gcl4sr {

/// Largest hop distance k that contributes 1/k to an edge weight.
inline constexpr std::size_t kMaxHop = 3;

struct GraphEdge {
  ItemIndex neighbor = 0;
  double weight = 0.0;      // raw accumulated sum of 1/k terms
  double normalized = 0.0;  // w * (1/deg(i) + 1/deg(j))

  friend bool operator==(const GraphEdge&, const GraphEdge&) = default;
};

/// Undirected weighted item transition graph over items 1..node_count.
/// Slot 0 (padding) exists in the adjacency array but never has edges.
class TransitionGraph {
 public:
  TransitionGraph() : adjacency_(1) {}
  explicit TransitionGraph(std::size_t node_count) : adjacency_(node_count + 1) {}

  std::size_t node_count() const noexcept { return adjacency_.size() - 1; }

  std::span<const GraphEdge> neighbors(ItemIndex v) const {
    if (v >= adjacency_.size()) return {};
    return adjacency_[v];
  }
  std::size_t degree(ItemIndex v) const { return neighbors(v).size(); }

  std::size_t edge_count() const noexcept {
    std::size_t twice = 0;
    for (const auto& a : adjacency_) twice += a.size();
    return twice / 2;
  }

  /// Edge lookup by binary search over the sorted adjacency of `a`.
  const GraphEdge* find(ItemIndex a, ItemIndex b) const {
    const auto nbrs = neighbors(a);
    auto it = std::lower_bound(nbrs.begin(), nbrs.end(), b,
                               [](const GraphEdge& e, ItemIndex x) { return e.neighbor < x; });
    if (it == nbrs.end() || it->neighbor != b) return nullptr;
    return &*it;
  }

  /// Inserts both directions of an edge; adjacency must be re-sorted with
  /// `finalize` afterwards.
  void add_edge(ItemIndex a, ItemIndex b, double weight, double normalized) {
    if (a == b) throw Error("transition graph: self-loop on item " + std::to_string(a));
    if (a == kPadding || b == kPadding || a > node_count() || b > node_count()) {
      throw Error("transition graph: edge endpoint out of range");
    }
    adjacency_[a].push_back({b, weight, normalized});
    adjacency_[b].push_back({a, weight, normalized});
  }

  void finalize() {
    for (auto& a : adjacency_) {
      std::sort(a.begin(), a.end(), [](const GraphEdge& x, const GraphEdge& y) { return x.neighbor < y.neighbor; });
    }
  }

  friend bool operator==(const TransitionGraph&, const TransitionGraph&) = default;

 private:
  std::vector<std::vector<GraphEdge>> adjacency_;
};

/// Builds the WITG: every pair (v_t, v_{t+k}), k = 1..3, in every sequence
/// adds 1/k to the undirected edge weight; weights are then normalized by
/// the endpoints' (unweighted) degrees.
///
/// Per-k hit counts are accumulated as integers and combined once at the
/// end, so the result does not depend on sequence order.
inline TransitionGraph build_witg(std::span<const Sequence> sequences, std::size_t item_count) {
  std::map<std::pair<ItemIndex, ItemIndex>, std::array<std::uint64_t, kMaxHop>> hits;
  for (const auto& s : sequences) {
    for (std::size_t t = 0; t < s.items.size(); ++t) {
      for (std::size_t k = 1; k <= kMaxHop && t + k < s.items.size(); ++k) {
        ItemIndex a = s.items[t], b = s.items[t + k];
        if (a == kPadding || b == kPadding || a == b) continue;
        if (a > item_count || b > item_count) throw Error("build_witg: item index beyond vocabulary");
        if (a > b) std::swap(a, b);
        ++hits[{a, b}][k - 1];
      }
    }
  }
  std::vector<std::size_t> deg(item_count + 1, 0);
  for (const auto& [key, counts] : hits) {
    ++deg[key.first];
    ++deg[key.second];
  }
  TransitionGraph g(item_count);
  for (const auto& [key, counts] : hits) {
    double w = 0.0;
    for (std::size_t k = 0; k < kMaxHop; ++k) w += static_cast<double>(counts[k]) / static_cast<double>(k + 1);
    const double norm = w * (1.0 / static_cast<double>(deg[key.first]) + 1.0 / static_cast<double>(deg[key.second]));
    g.add_edge(key.first, key.second, w, norm);
  }
  g.finalize();
  return g;
}

inline TransitionGraph build_witg(const std::vector<Sequence>& sequences, std::size_t item_count) {
  return build_witg(std::span<const Sequence>(sequences), item_count);
}

// ---------------------------------------------------------------------------
// Augmented views

struct SamplerConfig {
  std::size_t depth = 2;  // M
  std::size_t size = 20;  // N, per frontier node and step
  std::uint64_t seed = 0;
};

struct ViewEdge {
  std::size_t a = 0;  // local node indices, a < b
  std::size_t b = 0;
  double normalized = 0.0;
};

/// Subgraph of the WITG around one sequence. Node-local indices refer to
/// positions in `nodes` (sorted ascending by item index).
struct SampledView {
  std::vector<ItemIndex> anchor_items;
  std::vector<std::size_t> anchor_rows;  // local index of each anchor
  std::vector<ItemIndex> nodes;
  std::vector<ViewEdge> edges;
  std::vector<std::vector<std::size_t>> neighbor_index;

  std::size_t local(ItemIndex item) const {
    auto it = std::lower_bound(nodes.begin(), nodes.end(), item);
    if (it == nodes.end() || *it != item) throw Error("item " + std::to_string(item) + " is not a node of the view");
    return static_cast<std::size_t>(it - nodes.begin());
  }
};

/// Stable identity of a sequence (user + content) used to key sampling
/// streams.
inline std::uint64_t sequence_key(UserIndex user, std::span<const ItemIndex> items) {
  std::uint64_t h = splitmix64(user + 0x51ED270B0A2F1C3DULL);
  for (ItemIndex i : items) h = splitmix64(h ^ i);
  return splitmix64(h ^ items.size());
}

/// Builds a view from an explicit node set: every parent edge with both
/// endpoints in `nodes` is kept with its normalized weight. Zero-weight
/// edges carry no transition and are left out.
inline SampledView induced_view(const TransitionGraph& graph, std::span<const ItemIndex> anchors,
                                std::vector<ItemIndex> nodes) {
  SampledView view;
  view.anchor_items.assign(anchors.begin(), anchors.end());
  nodes.insert(nodes.end(), anchors.begin(), anchors.end());
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  view.nodes = std::move(nodes);
  view.neighbor_index.resize(view.nodes.size());
  for (std::size_t li = 0; li < view.nodes.size(); ++li) {
    for (const GraphEdge& e : graph.neighbors(view.nodes[li])) {
      if (e.neighbor <= view.nodes[li] || e.normalized == 0.0) continue;
      auto it = std::lower_bound(view.nodes.begin(), view.nodes.end(), e.neighbor);
      if (it == view.nodes.end() || *it != e.neighbor) continue;
      const auto lj = static_cast<std::size_t>(it - view.nodes.begin());
      view.edges.push_back({li, lj, e.normalized});
      view.neighbor_index[li].push_back(lj);
      view.neighbor_index[lj].push_back(li);
    }
  }
  for (auto& nbrs : view.neighbor_index) std::sort(nbrs.begin(), nbrs.end());
  for (ItemIndex a : view.anchor_items) view.anchor_rows.push_back(view.local(a));
  return view;
}

/// Depth-M, size-N uniform neighborhood sampling from every anchor.
///
/// At each step every frontier node draws min(N, degree) distinct neighbors
/// uniformly (edge weights ignored); the drawn nodes form the next frontier.
/// Anchors missing from the graph end up as isolated view nodes. The
/// stream is keyed by (seed, sequence identity, draw, epoch).
inline SampledView sample_view(const TransitionGraph& graph, UserIndex user, std::span<const ItemIndex> anchors,
                               const SamplerConfig& cfg, std::uint64_t draw, std::uint64_t epoch = 0) {
  if (cfg.depth < 1 || cfg.size < 1) throw Error("sampler config: depth and size must be >= 1");
  if (anchors.empty()) throw Error("sample_view: empty sequence");
  Rng rng = Rng::stream(cfg.seed, streams::kSampling, {sequence_key(user, anchors), draw, epoch});
  std::vector<ItemIndex> sampled;
  std::vector<ItemIndex> frontier, next;
  for (ItemIndex anchor : anchors) {
    frontier.assign(1, anchor);
    for (std::size_t step = 0; step < cfg.depth && !frontier.empty(); ++step) {
      next.clear();
      for (ItemIndex v : frontier) {
        const auto nbrs = graph.neighbors(v);
        for (std::size_t p : rng.sample_without_replacement(nbrs.size(), cfg.size)) {
          const ItemIndex u = nbrs[p].neighbor;
          if (std::find(next.begin(), next.end(), u) == next.end()) next.push_back(u);
        }
      }
      sampled.insert(sampled.end(), next.begin(), next.end());
      frontier.swap(next);
    }
  }
  return induced_view(graph, anchors, std::move(sampled));
}

inline SampledView sample_view(const TransitionGraph& graph, const Sequence& seq, const SamplerConfig& cfg,
                               std::uint64_t draw, std::uint64_t epoch = 0) {
  return sample_view(graph, seq.user, seq.items, cfg, draw, epoch);
}

// ---------------------------------------------------------------------------
// Stats and serialization

struct StatsReport {
  std::size_t node_count = 0;
  std::size_t active_nodes = 0;  // nodes with at least one edge
  std::size_t edge_count = 0;
  std::map<std::size_t, std::size_t> degree_histogram;  // degree -> #active nodes
  std::array<double, 5> raw_weight_quantiles{};         // min, q25, median, q75, max
  std::array<double, 5> normalized_weight_quantiles{};
};

namespace detail {
inline std::array<double, 5> quantiles(std::vector<double> v) {
  std::array<double, 5> q{};
  if (v.empty()) return q;
  std::sort(v.begin(), v.end());
  const double fractions[5] = {0.0, 0.25, 0.5, 0.75, 1.0};
  for (std::size_t i = 0; i < 5; ++i) {
    // nearest-rank on the sorted values
    const auto idx = static_cast<std::size_t>(fractions[i] * static_cast<double>(v.size() - 1) + 0.5);
    q[i] = v[idx];
  }
  return q;
}
}  // namespace detail

inline StatsReport graph_stats(const TransitionGraph& graph) {
  StatsReport r;
  r.node_count = graph.node_count();
  r.edge_count = graph.edge_count();
  std::vector<double> raw, norm;
  for (ItemIndex v = 1; v <= graph.node_count(); ++v) {
    const auto nbrs = graph.neighbors(v);
    if (nbrs.empty()) continue;
    ++r.active_nodes;
    ++r.degree_histogram[nbrs.size()];
    for (const auto& e : nbrs) {
      if (e.neighbor < v) continue;
      raw.push_back(e.weight);
      norm.push_back(e.normalized);
    }
  }
  r.raw_weight_quantiles = detail::quantiles(std::move(raw));
  r.normalized_weight_quantiles = detail::quantiles(std::move(norm));
  return r;
}

inline void write_stats(std::ostream& out, const StatsReport& r) {
  out << "nodes=" << r.node_count << '\n'
      << "active_nodes=" << r.active_nodes << '\n'
      << "edges=" << r.edge_count << '\n';
  out << "degree_histogram=";
  bool first = true;
  for (const auto& [deg, count] : r.degree_histogram) {
    out << (first ? "" : ",") << deg << ':' << count;
    first = false;
  }
  out << '\n';
  const char* names[5] = {"min", "q25", "median", "q75", "max"};
  for (std::size_t i = 0; i < 5; ++i) out << "raw_weight_" << names[i] << '=' << r.raw_weight_quantiles[i] << '\n';
  for (std::size_t i = 0; i < 5; ++i)
    out << "normalized_weight_" << names[i] << '=' << r.normalized_weight_quantiles[i] << '\n';
}

namespace detail {
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

/// Edge-list body: one "i j w w_hat" line per undirected edge, i < j,
/// ascending by (i, j).
inline std::string graph_body(const TransitionGraph& graph) {
  std::string body;
  for (ItemIndex v = 1; v <= graph.node_count(); ++v) {
    for (const auto& e : graph.neighbors(v)) {
      if (e.neighbor < v) continue;
      body += std::to_string(v) + ' ' + std::to_string(e.neighbor) + ' ' + detail::format_double(e.weight) + ' ' +
              detail::format_double(e.normalized) + '\n';
    }
  }
  return body;
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

inline std::uint64_t graph_hash(const TransitionGraph& graph) {
  return fnv1a64(std::to_string(graph.node_count()) + '\n' + graph_body(graph));
}

/// Header: "# witg nodes=<N> edges=<E> hash=<16 hex digits>".
inline void write_graph(std::ostream& out, const TransitionGraph& graph) {
  out << "# witg nodes=" << graph.node_count() << " edges=" << graph.edge_count()
      << " hash=" << hex64(graph_hash(graph)) << '\n'
      << graph_body(graph);
}

inline TransitionGraph read_graph(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw IoError("graph file: missing header");
  std::size_t nodes = 0, edges = 0;
  char hash_buf[17] = {};
  if (std::sscanf(header.c_str(), "# witg nodes=%zu edges=%zu hash=%16s", &nodes, &edges, hash_buf) != 3) {
    throw IoError("graph file: malformed header '" + header + "'");
  }
  TransitionGraph g(nodes);
  std::string line;
  std::size_t seen = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ItemIndex a = 0, b = 0;
    std::string w, wn;
    if (!(ls >> a >> b >> w >> wn)) throw IoError("graph file: malformed edge line '" + line + "'");
    g.add_edge(a, b, std::stod(w), std::stod(wn));
    ++seen;
  }
  g.finalize();
  if (seen != edges) throw IoError("graph file: header promises " + std::to_string(edges) + " edges, found " + std::to_string(seen));
  if (hex64(graph_hash(g)) != hash_buf) throw IoError("graph file: content hash mismatch");
  return g;
}

inline void save_graph(const std::filesystem::path& path, const TransitionGraph& graph) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write graph file: " + path.string());
  write_graph(out, graph);
}

inline TransitionGraph load_graph(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open graph file: " + path.string());
  return read_graph(in);
}

}  // namespace gcl4sr
