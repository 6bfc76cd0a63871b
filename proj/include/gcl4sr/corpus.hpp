#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gcl4sr/error.hpp"
#include "gcl4sr/rng.hpp"

namespace gcl4sr {

/// Dense item index. 0 is the padding slot and never names a real item.
using ItemIndex = std::size_t;
using UserIndex = std::size_t;
inline constexpr ItemIndex kPadding = 0;

struct InteractionRecord {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

enum class LogFormat { kTsv, kCsv };

inline LogFormat log_format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? LogFormat::kCsv : LogFormat::kTsv;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line, LogFormat format) {
  std::vector<std::string_view> out;
  if (format == LogFormat::kCsv) {
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        out.push_back(trim(line.substr(start, i - start)));
        start = i + 1;
      }
    }
    return out;
  }
  // TSV: tabs or runs of spaces.
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == '\t' || line[i] == ' ' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != '\t' && line[i] != ' ' && line[i] != '\r') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

}  // namespace detail

/// Parses one interaction record per non-blank line (user, item, timestamp),
/// preserving file order.
inline std::vector<InteractionRecord> parse_log(std::istream& in, LogFormat format, const std::string& source = "<stream>") {
  std::vector<InteractionRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_fields(line, format);
    auto fail = [&](const std::string& why) {
      return IoError(source + ":" + std::to_string(line_no) + ": " + why);
    };
    if (fields.size() != 3) throw fail("expected 3 columns (user, item, timestamp), got " + std::to_string(fields.size()));
    if (fields[0].empty() || fields[1].empty()) throw fail("empty user or item id");
    std::int64_t ts = 0;
    const auto ts_field = fields[2];
    const auto [ptr, ec] = std::from_chars(ts_field.data(), ts_field.data() + ts_field.size(), ts);
    if (ec != std::errc() || ptr != ts_field.data() + ts_field.size()) {
      throw fail("non-numeric timestamp '" + std::string(ts_field) + "'");
    }
    if (ts < 0) throw fail("negative timestamp");
    records.push_back({std::string(fields[0]), std::string(fields[1]), ts});
  }
  return records;
}

inline std::vector<InteractionRecord> load_log(const std::filesystem::path& path, LogFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open interaction log: " + path.string());
  return parse_log(in, format, path.string());
}

/// Bidirectional opaque-id <-> dense-index maps. Items use 1..item_count,
/// users 0..user_count-1.
class Vocabulary {
 public:
  Vocabulary() : item_ids_{""} {}

  ItemIndex add_item(const std::string& id) {
    auto [it, inserted] = item_index_.try_emplace(id, item_ids_.size());
    if (inserted) item_ids_.push_back(id);
    return it->second;
  }
  UserIndex add_user(const std::string& id) {
    auto [it, inserted] = user_index_.try_emplace(id, user_ids_.size());
    if (inserted) user_ids_.push_back(id);
    return it->second;
  }

  std::size_t item_count() const noexcept { return item_ids_.size() - 1; }
  std::size_t user_count() const noexcept { return user_ids_.size(); }

  const std::string& item_id(ItemIndex i) const {
    if (i == kPadding || i >= item_ids_.size()) throw Error("no item with dense index " + std::to_string(i));
    return item_ids_[i];
  }
  const std::string& user_id(UserIndex u) const { return user_ids_.at(u); }

  std::optional<ItemIndex> find_item(const std::string& id) const {
    auto it = item_index_.find(id);
    if (it == item_index_.end()) return std::nullopt;
    return it->second;
  }
  std::optional<UserIndex> find_user(const std::string& id) const {
    auto it = user_index_.find(id);
    if (it == user_index_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::vector<std::string> item_ids_;
  std::vector<std::string> user_ids_;
  std::unordered_map<std::string, ItemIndex> item_index_;
  std::unordered_map<std::string, UserIndex> user_index_;
};

/// Time-ordered, duplicate-free item list of one user.
struct Sequence {
  UserIndex user = 0;
  std::vector<ItemIndex> items;

  friend bool operator==(const Sequence&, const Sequence&) = default;
};

struct Corpus {
  Vocabulary vocab;
  std::vector<Sequence> sequences;  // indexed by user
};

/// Groups records per user, orders them by timestamp (stable), drops repeated
/// items, then applies iterative k-core filtering to a fixed point.
///
/// Users and items are numbered in order of first appearance among the
/// surviving records.
inline Corpus build_sequences(const std::vector<InteractionRecord>& records, std::size_t k_core) {
  if (k_core < 1) throw Error("k_core must be >= 1");

  std::vector<std::string> user_order;
  std::unordered_map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t r = 0; r < records.size(); ++r) {
    auto [it, inserted] = by_user.try_emplace(records[r].user);
    if (inserted) user_order.push_back(records[r].user);
    it->second.push_back(r);
  }

  // user id -> deduplicated item ids in time order
  std::vector<std::pair<std::string, std::vector<std::string>>> seqs;
  seqs.reserve(user_order.size());
  for (const auto& user : user_order) {
    auto& rows = by_user[user];
    std::stable_sort(rows.begin(), rows.end(),
                     [&](std::size_t a, std::size_t b) { return records[a].timestamp < records[b].timestamp; });
    std::vector<std::string> items;
    std::unordered_map<std::string, bool> seen;
    for (std::size_t r : rows) {
      if (seen.try_emplace(records[r].item, true).second) items.push_back(records[r].item);
    }
    seqs.emplace_back(user, std::move(items));
  }

  // Every (user, item) pair is now unique, so item support = #users holding it.
  for (bool changed = true; changed;) {
    changed = false;
    std::unordered_map<std::string, std::size_t> item_support;
    for (const auto& [user, items] : seqs)
      for (const auto& item : items) ++item_support[item];
    for (auto& [user, items] : seqs) {
      const auto before = items.size();
      std::erase_if(items, [&](const std::string& item) { return item_support[item] < k_core; });
      changed = changed || items.size() != before;
    }
    const auto before = seqs.size();
    std::erase_if(seqs, [&](const auto& s) { return s.second.size() < k_core || s.second.empty(); });
    changed = changed || seqs.size() != before;
  }
  if (seqs.empty()) throw Error("interaction log is empty after filtering (k_core=" + std::to_string(k_core) + ")");

  Corpus corpus;
  for (const auto& [user, items] : seqs) {
    Sequence s;
    s.user = corpus.vocab.add_user(user);
    for (const auto& item : items) s.items.push_back(corpus.vocab.add_item(item));
    corpus.sequences.push_back(std::move(s));
  }
  return corpus;
}

/// Reconstructs one record per sequence position (timestamps = positions).
inline std::vector<InteractionRecord> to_records(const Corpus& corpus) {
  std::vector<InteractionRecord> out;
  for (const auto& s : corpus.sequences)
    for (std::size_t t = 0; t < s.items.size(); ++t)
      out.push_back({corpus.vocab.user_id(s.user), corpus.vocab.item_id(s.items[t]), static_cast<std::int64_t>(t)});
  return out;
}

/// Leave-one-out split. Users with fewer than 3 items keep their whole
/// sequence for training and have no held-out targets.
struct SplitDataset {
  std::size_t item_count = 0;
  std::size_t user_count = 0;
  std::vector<Sequence> full;
  std::vector<Sequence> train;
  std::vector<ItemIndex> valid_target;  // kPadding when the user is not evaluable
  std::vector<ItemIndex> test_target;

  bool evaluable(std::size_t row) const { return test_target[row] != kPadding; }

  std::size_t evaluable_count() const {
    return static_cast<std::size_t>(std::count_if(test_target.begin(), test_target.end(),
                                                  [](ItemIndex t) { return t != kPadding; }));
  }
  std::size_t train_only_count() const { return full.size() - evaluable_count(); }
};

inline SplitDataset split_leave_one_out(const std::vector<Sequence>& sequences, std::size_t item_count,
                                        std::size_t user_count) {
  SplitDataset out;
  out.item_count = item_count;
  out.user_count = user_count;
  for (const auto& s : sequences) {
    out.full.push_back(s);
    if (s.items.size() >= 3) {
      Sequence train{s.user, {s.items.begin(), s.items.end() - 2}};
      out.train.push_back(std::move(train));
      out.valid_target.push_back(s.items[s.items.size() - 2]);
      out.test_target.push_back(s.items.back());
    } else {
      out.train.push_back(s);
      out.valid_target.push_back(kPadding);
      out.test_target.push_back(kPadding);
    }
  }
  return out;
}

inline SplitDataset split_leave_one_out(const Corpus& corpus) {
  return split_leave_one_out(corpus.sequences, corpus.vocab.item_count(), corpus.vocab.user_count());
}

/// One training example: a prefix right-aligned in a max_len window (left
/// padding with kPadding) and the item that followed it.
struct TrainingPair {
  UserIndex user = 0;
  std::vector<ItemIndex> window;
  std::size_t length = 0;  // real (unpadded) positions
  ItemIndex target = kPadding;

  std::span<const ItemIndex> prefix() const { return {window.data() + (window.size() - length), length}; }
};

/// Right-aligns the last `max_len` items of `items` into a padded window.
inline std::vector<ItemIndex> make_window(std::span<const ItemIndex> items, std::size_t max_len) {
  std::vector<ItemIndex> window(max_len, kPadding);
  const std::size_t n = std::min(items.size(), max_len);
  std::copy(items.end() - static_cast<std::ptrdiff_t>(n), items.end(), window.end() - static_cast<std::ptrdiff_t>(n));
  return window;
}

/// All (S[1:k], v[k+1]) pairs over the most recent max_len + 1 items.
inline std::vector<TrainingPair> expand_subsequences(const Sequence& seq, std::size_t max_len) {
  if (max_len < 1) throw Error("max_len must be >= 1");
  const std::size_t keep = std::min(seq.items.size(), max_len + 1);
  std::span<const ItemIndex> items(seq.items.data() + (seq.items.size() - keep), keep);
  std::vector<TrainingPair> out;
  if (keep < 2) return out;
  out.reserve(keep - 1);
  for (std::size_t k = 1; k < keep; ++k) {
    TrainingPair p;
    p.user = seq.user;
    p.window = make_window(items.first(k), max_len);
    p.length = k;
    p.target = items[k];
    out.push_back(std::move(p));
  }
  return out;
}

/// Split manifest: one line per user "user-id<TAB>train-length<TAB>valid<TAB>test",
/// with "-" for absent targets.
inline void write_split_manifest(std::ostream& out, const SplitDataset& split, const Vocabulary& vocab) {
  for (std::size_t r = 0; r < split.full.size(); ++r) {
    out << vocab.user_id(split.full[r].user) << '\t' << split.train[r].items.size() << '\t'
        << (split.evaluable(r) ? vocab.item_id(split.valid_target[r]) : "-") << '\t'
        << (split.evaluable(r) ? vocab.item_id(split.test_target[r]) : "-") << '\n';
  }
}

// ---------------------------------------------------------------------------
// Prepared-corpus persistence: items.tsv, users.tsv, sequences.tsv.

inline void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  std::ofstream items(dir / "items.tsv"), users(dir / "users.tsv"), seqs(dir / "sequences.tsv");
  if (!items || !users || !seqs) throw IoError("cannot write prepared corpus into " + dir.string());
  for (ItemIndex i = 1; i <= corpus.vocab.item_count(); ++i) items << i << '\t' << corpus.vocab.item_id(i) << '\n';
  for (UserIndex u = 0; u < corpus.vocab.user_count(); ++u) users << u << '\t' << corpus.vocab.user_id(u) << '\n';
  for (const auto& s : corpus.sequences) {
    seqs << s.user;
    for (ItemIndex i : s.items) seqs << '\t' << i;
    seqs << '\n';
  }
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  auto open = [&](const char* name) {
    std::ifstream in(dir / name);
    if (!in) throw IoError("prepared corpus file missing: " + (dir / name).string());
    return in;
  };
  Corpus corpus;
  auto read_ids = [&](const char* name, auto add) {
    auto in = open(name);
    std::string line;
    std::size_t expect = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw IoError(std::string(name) + ": malformed line");
      const std::size_t idx = std::stoull(line.substr(0, tab));
      if (add(line.substr(tab + 1)) != idx) throw IoError(std::string(name) + ": indices out of order");
      ++expect;
    }
    return expect;
  };
  read_ids("items.tsv", [&](const std::string& id) { return corpus.vocab.add_item(id); });
  read_ids("users.tsv", [&](const std::string& id) { return corpus.vocab.add_user(id); });
  auto in = open("sequences.tsv");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Sequence s;
    ls >> s.user;
    ItemIndex i;
    while (ls >> i) {
      if (i == kPadding || i > corpus.vocab.item_count()) throw IoError("sequences.tsv: item index out of range");
      s.items.push_back(i);
    }
    if (s.user >= corpus.vocab.user_count()) throw IoError("sequences.tsv: user index out of range");
    corpus.sequences.push_back(std::move(s));
  }
  if (corpus.sequences.empty()) throw IoError("prepared corpus in " + dir.string() + " has no sequences");
  return corpus;
}

// ---------------------------------------------------------------------------
// Synthetic logs with planted first-order transitions.

/// Row-stochastic item transition matrix over items 0..n-1 (dense).
using TransitionMatrix = std::vector<std::vector<double>>;

/// i -> i+1 (mod n) with probability 1.
inline TransitionMatrix cyclic_transitions(std::size_t n) {
  TransitionMatrix m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) m[i][(i + 1) % n] = 1.0;
  return m;
}

/// Each item gets `out_degree` distinct random successors with equal mass.
inline TransitionMatrix random_sparse_transitions(std::size_t n, std::size_t out_degree, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, streams::kSynthetic, {0x7472616e73ULL});
  TransitionMatrix m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) others.push_back(j);
    const auto picks = rng.sample_without_replacement(others.size(), std::min(out_degree, others.size()));
    for (std::size_t p : picks) m[i][others[p]] = 1.0 / static_cast<double>(picks.size());
  }
  return m;
}

struct SynthConfig {
  std::size_t item_count = 10;
  std::size_t user_count = 20;
  std::size_t min_length = 5;
  std::size_t max_length = 10;
  /// Probability that a step ignores the planted matrix and picks uniformly.
  double noise = 0.0;
  /// Planted transitions; cyclic successor when empty.
  TransitionMatrix transitions;
};

/// Emits per-user Markov walks as records (user "u<k>", item "i<k>",
/// timestamps increasing within each user). Deterministic in (config, seed).
inline std::vector<InteractionRecord> generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.item_count == 0) throw Error("synthetic config: item_count must be positive");
  if (cfg.user_count == 0) throw Error("synthetic config: user_count must be positive");
  if (!(cfg.noise >= 0.0 && cfg.noise <= 1.0)) throw Error("synthetic config: noise must lie in [0, 1]");
  if (cfg.min_length < 1 || cfg.min_length > cfg.max_length) throw Error("synthetic config: invalid length range");
  const TransitionMatrix trans = cfg.transitions.empty() ? cyclic_transitions(cfg.item_count) : cfg.transitions;
  if (trans.size() != cfg.item_count) throw Error("synthetic config: transition matrix size mismatch");
  for (const auto& row : trans) {
    if (row.size() != cfg.item_count) throw Error("synthetic config: transition matrix must be square");
    double s = 0.0;
    for (double p : row) {
      if (p < 0.0) throw Error("synthetic config: negative transition probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw Error("synthetic config: transition rows must sum to 1");
  }

  Rng rng = Rng::stream(seed, streams::kSynthetic);
  std::vector<InteractionRecord> out;
  std::int64_t clock = 0;
  for (std::size_t u = 0; u < cfg.user_count; ++u) {
    const std::size_t len = cfg.min_length + static_cast<std::size_t>(rng.index(cfg.max_length - cfg.min_length + 1));
    std::size_t cur = static_cast<std::size_t>(rng.index(cfg.item_count));
    const std::string user = "u" + std::to_string(u);
    for (std::size_t t = 0; t < len; ++t) {
      out.push_back({user, "i" + std::to_string(cur), clock++});
      if (rng.bernoulli(cfg.noise)) {
        cur = static_cast<std::size_t>(rng.index(cfg.item_count));
      } else {
        double r = rng.uniform();
        std::size_t next = cfg.item_count - 1;
        for (std::size_t j = 0; j < cfg.item_count; ++j) {
          r -= trans[cur][j];
          if (r < 0.0) {
            next = j;
            break;
          }
        }
        // Guard against rounding leaving r >= 0 on a zero-probability tail.
        while (trans[cur][next] == 0.0 && next > 0) --next;
        cur = next;
      }
    }
  }
  return out;
}

inline void write_log(std::ostream& out, const std::vector<InteractionRecord>& records, LogFormat format) {
  const char sep = format == LogFormat::kCsv ? ',' : '\t';
  for (const auto& r : records) out << r.user << sep << r.item << sep << r.timestamp << '\n';
}

}  // namespace gcl4sr
