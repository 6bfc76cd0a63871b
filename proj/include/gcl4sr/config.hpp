#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gcl4sr/corpus.hpp"
#include "gcl4sr/error.hpp"
#include "gcl4sr/trainer.hpp"

// Config files are plain text, one "key = value" per line; '#' starts a
// comment. Unknown keys are rejected. Any key can be overridden from the
// environment as GCL4SR_<KEY> (upper case), and CLI flags override both.

namespace gcl4sr {

inline constexpr const char* kEnvPrefix = "GCL4SR_";

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::istream& in, const std::string& source = "<config>") {
  KeyValues kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto text = detail::trim(line);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) throw IoError(source + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key(detail::trim(text.substr(0, eq)));
    const std::string value(detail::trim(text.substr(eq + 1)));
    if (key.empty()) throw IoError(source + ":" + std::to_string(line_no) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

inline KeyValues load_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  return parse_key_values(in, path.string());
}

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw Error("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw Error("config: key '" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_count(const std::string& key, const std::string& v) {
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw Error("config: key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return std::stoull(v);
}

struct Binder {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

/// Shortest text that parses back to exactly `v`.
inline std::string real_str(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
Binder count_binder(const std::string& key, T& field) {
  return {[&field, key](const std::string& v) { field = static_cast<T>(parse_count(key, v)); },
          [&field] { return std::to_string(field); }};
}

inline Binder real_binder(const std::string& key, double& field) {
  return {[&field, key](const std::string& v) { field = parse_real(key, v); }, [&field] { return real_str(field); }};
}

inline Binder bool_binder(const std::string& key, bool& field) {
  return {[&field, key](const std::string& v) { field = parse_bool(key, v); },
          [&field] { return std::string(field ? "true" : "false"); }};
}

inline std::map<std::string, Binder> train_binders(TrainConfig& c) {
  std::map<std::string, Binder> b;
  b["dim"] = count_binder("dim", c.dim);
  b["heads"] = count_binder("heads", c.heads);
  b["layers"] = count_binder("layers", c.layers);
  b["max_len"] = count_binder("max_len", c.max_len);
  b["dropout"] = real_binder("dropout", c.dropout);
  b["batch_size"] = count_binder("batch_size", c.batch_size);
  b["learning_rate"] = real_binder("learning_rate", c.learning_rate);
  b["beta1"] = real_binder("beta1", c.beta1);
  b["beta2"] = real_binder("beta2", c.beta2);
  b["eps"] = real_binder("eps", c.eps);
  b["l2"] = real_binder("l2", c.l2);
  b["max_epochs"] = count_binder("max_epochs", c.max_epochs);
  b["patience"] = count_binder("patience", c.patience);
  b["lr_decay_interval"] = count_binder("lr_decay_interval", c.lr_decay_interval);
  b["lr_decay_factor"] = real_binder("lr_decay_factor", c.lr_decay_factor);
  b["seed"] = count_binder("seed", c.seed);
  b["eval_seed"] = count_binder("eval_seed", c.eval_seed);
  b["eval_interval"] = count_binder("eval_interval", c.eval_interval);
  b["lambda1"] = real_binder("lambda1", c.weights.lambda1);
  b["lambda2"] = real_binder("lambda2", c.weights.lambda2);
  b["tau"] = real_binder("tau", c.weights.tau);
  b["rho"] = real_binder("rho", c.weights.rho);
  b["gcl_symmetric"] = bool_binder("gcl_symmetric", c.weights.gcl_symmetric);
  b["rho_median_heuristic"] = bool_binder("rho_median_heuristic", c.rho_median_heuristic);
  b["sampler_depth"] = count_binder("sampler_depth", c.sampler.depth);
  b["sampler_size"] = count_binder("sampler_size", c.sampler.size);
  b["resample_per_epoch"] = bool_binder("resample_per_epoch", c.resample_per_epoch);
  b["ablation"] = {[&c](const std::string& v) { c.ablation = parse_ablation(v); },
                   [&c] { return std::string(ablation_name(c.ablation)); }};
  return b;
}

}  // namespace detail

/// Applies key-values onto `cfg`; unknown keys are an error.
inline void apply_key_values(TrainConfig& cfg, const KeyValues& kv) {
  auto binders = detail::train_binders(cfg);
  for (const auto& [key, value] : kv) {
    auto it = binders.find(key);
    if (it == binders.end()) throw Error("config: unknown key '" + key + "'");
    it->second.set(value);
  }
}

/// Collects GCL4SR_<KEY> environment overrides for the known keys.
inline KeyValues environment_overrides(const std::vector<std::string>& keys) {
  KeyValues kv;
  for (const auto& key : keys) {
    std::string env = kEnvPrefix;
    for (char ch : key) env.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    if (const char* v = std::getenv(env.c_str())) kv[key] = v;
  }
  return kv;
}

inline std::vector<std::string> train_config_keys() {
  TrainConfig scratch;
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::train_binders(scratch)) keys.push_back(k);
  return keys;
}

inline KeyValues to_key_values(const TrainConfig& cfg) {
  TrainConfig copy = cfg;
  KeyValues kv;
  for (const auto& [k, b] : detail::train_binders(copy)) kv[k] = b.get();
  return kv;
}

inline void write_key_values(std::ostream& out, const KeyValues& kv) {
  for (const auto& [k, v] : kv) out << k << " = " << v << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic-corpus settings (keys prefixed "synth_" share the same file).

struct SynthSettings {
  SynthConfig config;
  std::string pattern = "cyclic";  // cyclic | random
  std::size_t out_degree = 3;
  std::uint64_t seed = 1;
};

inline SynthSettings parse_synth_settings(const KeyValues& kv) {
  SynthSettings s;
  for (const auto& [key, v] : kv) {
    if (key == "synth_items") s.config.item_count = detail::parse_count(key, v);
    else if (key == "synth_users") s.config.user_count = detail::parse_count(key, v);
    else if (key == "synth_min_length") s.config.min_length = detail::parse_count(key, v);
    else if (key == "synth_max_length") s.config.max_length = detail::parse_count(key, v);
    else if (key == "synth_noise") s.config.noise = detail::parse_real(key, v);
    else if (key == "synth_pattern") s.pattern = v;
    else if (key == "synth_out_degree") s.out_degree = detail::parse_count(key, v);
    else if (key == "synth_seed") s.seed = detail::parse_count(key, v);
    else throw Error("config: unknown synth key '" + key + "'");
  }
  if (s.pattern != "cyclic" && s.pattern != "random") throw Error("config: synth_pattern must be cyclic or random");
  return s;
}

/// Materializes the planted transition matrix for the chosen pattern.
inline SynthConfig resolve_synth(const SynthSettings& s) {
  SynthConfig c = s.config;
  if (c.item_count == 0) throw Error("synthetic config: item_count must be positive");
  c.transitions = s.pattern == "cyclic" ? cyclic_transitions(c.item_count)
                                        : random_sparse_transitions(c.item_count, s.out_degree, s.seed);
  return c;
}

/// Splits a mixed file into train keys and synth_ keys.
inline std::pair<KeyValues, KeyValues> partition_keys(const KeyValues& kv) {
  KeyValues train, synth;
  for (const auto& [k, v] : kv) (k.starts_with("synth_") ? synth : train)[k] = v;
  return {train, synth};
}

// ---------------------------------------------------------------------------
// Everything one settings file can hold.

struct Settings {
  TrainConfig train;
  SynthSettings synth;
  std::size_t k_core = 5;         // prepare
  std::size_t ablate_seeds = 1;   // ablate: consecutive seeds from train.seed
  bool ablate_backbone = false;   // ablate: add the backbone-only row
};

inline const std::vector<std::string>& run_keys() {
  static const std::vector<std::string> keys{"k_core", "ablate_seeds", "ablate_backbone"};
  return keys;
}

inline const std::vector<std::string>& synth_keys() {
  static const std::vector<std::string> keys{"synth_items",      "synth_users", "synth_min_length",
                                             "synth_max_length", "synth_noise", "synth_pattern",
                                             "synth_out_degree", "synth_seed"};
  return keys;
}

inline std::vector<std::string> all_config_keys() {
  std::vector<std::string> keys = train_config_keys();
  keys.insert(keys.end(), run_keys().begin(), run_keys().end());
  keys.insert(keys.end(), synth_keys().begin(), synth_keys().end());
  return keys;
}

inline Settings parse_settings(KeyValues kv) {
  Settings s;
  for (const auto& key : run_keys()) {
    auto it = kv.find(key);
    if (it == kv.end()) continue;
    if (key == "k_core") s.k_core = detail::parse_count(key, it->second);
    if (key == "ablate_seeds") s.ablate_seeds = detail::parse_count(key, it->second);
    if (key == "ablate_backbone") s.ablate_backbone = detail::parse_bool(key, it->second);
    kv.erase(it);
  }
  if (s.ablate_seeds == 0) throw Error("config: ablate_seeds must be positive");
  const auto [train_kv, synth_kv] = partition_keys(kv);
  apply_key_values(s.train, train_kv);
  s.synth = parse_synth_settings(synth_kv);
  s.train.validate();
  return s;
}

/// File (optional) overlaid with GCL4SR_<KEY> environment variables.
inline Settings load_settings(const std::filesystem::path& file) {
  KeyValues kv;
  if (!file.empty()) kv = load_key_values(file);
  for (auto& [k, v] : environment_overrides(all_config_keys())) kv[k] = v;
  return parse_settings(std::move(kv));
}

}  // namespace gcl4sr
