// gcl4sr: data preparation, graph construction, training, evaluation and
// ablation from the command line.
//
// Settings resolve as: built-in defaults < --config file < GCL4SR_<KEY>
// environment variables < individual flags.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gcl4sr/gcl4sr.hpp"

namespace fs = std::filesystem;
using namespace gcl4sr;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string graph;
  std::string checkpoint;
  std::string mode = "test";
  std::vector<std::size_t> k{10, 20};
  std::vector<std::string> argv;
};

Settings resolve_settings(const Options& o) {
  Settings s = load_settings(o.config);
  if (o.seed) {
    s.train.seed = *o.seed;
    s.synth.seed = *o.seed;
  }
  return s;
}

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a64(data));
}

std::string dir_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".tsv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += f.filename().string() + ':' + file_hash(f) + ';';
  return hex64(fnv1a64(acc));
}

/// Exclusive claim on an output directory for the lifetime of the object.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".gcl4sr.lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw IoError("output directory is locked by another run: " + path_.string());
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto written = ::write(fd_, pid.data(), pid.size());
  }
  ~DirLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

/// Records inputs, settings and produced artifacts; written as manifest.txt.
class Manifest {
 public:
  Manifest(const Options& o, std::string command) : out_(o.out), start_(std::chrono::steady_clock::now()) {
    kv_.emplace_back("command", std::move(command));
    std::string line;
    for (const auto& a : o.argv) line += (line.empty() ? "" : " ") + a;
    kv_.emplace_back("argv", line);
  }
  void set(const std::string& k, const std::string& v) { kv_.emplace_back(k, v); }
  void input(const std::string& name, const fs::path& p) {
    set("input." + name, p.string());
    set("input." + name + ".hash", fs::is_directory(p) ? dir_hash(p) : file_hash(p));
  }
  void settings(const KeyValues& kv) {
    for (const auto& [k, v] : kv) set("config." + k, v);
  }
  void artifact(const fs::path& p) { artifacts_.push_back(p); }

  void write() const {
    std::ofstream m(out_ / "manifest.txt");
    if (!m) throw IoError("cannot write manifest in " + out_.string());
    for (const auto& [k, v] : kv_) m << k << '=' << v << '\n';
    for (const auto& a : artifacts_) {
      m << "artifact." << fs::relative(a, out_).generic_string() << '=' << file_hash(a) << '\n';
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    m << "elapsed_seconds=" << secs << '\n';
  }

 private:
  fs::path out_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::pair<std::string, std::string>> kv_;
  std::vector<fs::path> artifacts_;
};

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw Error(std::string("missing required flag ") + flag);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
}

std::string report_kv(const MetricReport& r) {
  std::ostringstream os;
  write_report_kv(os, r);
  return os.str();
}

SplitDataset load_split(const std::string& data) {
  require(data, "--data");
  return split_leave_one_out(load_corpus(data));
}

TransitionGraph load_or_build_graph(const Options& o, const SplitDataset& split) {
  TransitionGraph g = o.graph.empty() ? build_witg(split.train, split.item_count) : load_graph(o.graph);
  if (g.node_count() != split.item_count) {
    throw Error("graph has " + std::to_string(g.node_count()) + " items but the prepared data has " +
                std::to_string(split.item_count));
  }
  return g;
}

std::string config_fingerprint(const TrainConfig& c) {
  std::ostringstream os;
  write_key_values(os, to_key_values(c));
  return hex64(fnv1a64(os.str()));
}

// ---------------------------------------------------------------------------

int cmd_synth(const Options& o) {
  require(o.out, "--out");
  const Settings s = resolve_settings(o);
  const fs::path out(o.out);
  DirLock lock(out);
  Manifest man(o, "synth");
  const SynthConfig sc = resolve_synth(s.synth);
  const auto records = generate_synthetic(sc, s.synth.seed);
  const fs::path log = out / "interactions.tsv";
  {
    std::ofstream f(log);
    if (!f) throw IoError("cannot write " + log.string());
    write_log(f, records, LogFormat::kTsv);
  }
  man.set("synth_items", std::to_string(sc.item_count));
  man.set("synth_users", std::to_string(sc.user_count));
  man.set("synth_pattern", s.synth.pattern);
  man.set("synth_noise", detail::real_str(sc.noise));
  man.set("synth_seed", std::to_string(s.synth.seed));
  man.set("interactions", std::to_string(records.size()));
  man.artifact(log);
  man.write();
  std::cout << "wrote " << records.size() << " interactions to " << log.string() << '\n';
  return 0;
}

int cmd_prepare(const Options& o) {
  require(o.data, "--data");
  require(o.out, "--out");
  const Settings s = resolve_settings(o);
  const auto records = load_log(o.data, log_format_from_path(o.data));
  const Corpus corpus = build_sequences(records, s.k_core);
  const fs::path out(o.out);
  DirLock lock(out);
  Manifest man(o, "prepare");
  man.input("log", o.data);
  save_corpus(out, corpus);
  const SplitDataset split = split_leave_one_out(corpus);
  {
    std::ofstream f(out / "split.tsv");
    write_split_manifest(f, split, corpus.vocab);
  }
  std::size_t interactions = 0;
  for (const auto& seq : corpus.sequences) interactions += seq.items.size();
  man.set("k_core", std::to_string(s.k_core));
  man.set("raw_records", std::to_string(records.size()));
  man.set("users", std::to_string(corpus.vocab.user_count()));
  man.set("items", std::to_string(corpus.vocab.item_count()));
  man.set("interactions", std::to_string(interactions));
  man.set("evaluable_users", std::to_string(split.evaluable_count()));
  for (const char* f : {"items.tsv", "users.tsv", "sequences.tsv", "split.tsv"}) man.artifact(out / f);
  man.write();
  std::cout << "users=" << corpus.vocab.user_count() << " items=" << corpus.vocab.item_count()
            << " interactions=" << interactions << '\n';
  return 0;
}

int cmd_build_graph(const Options& o) {
  require(o.out, "--out");
  const SplitDataset split = load_split(o.data);
  const TransitionGraph g = build_witg(split.train, split.item_count);
  const fs::path out(o.out);
  DirLock lock(out);
  Manifest man(o, "build-graph");
  man.input("data", o.data);
  save_graph(out / "graph.witg", g);
  std::ostringstream stats;
  write_stats(stats, graph_stats(g));
  write_text(out / "graph_stats.txt", stats.str());
  man.set("graph_hash", hex64(graph_hash(g)));
  man.artifact(out / "graph.witg");
  man.artifact(out / "graph_stats.txt");
  man.write();
  std::cout << stats.str() << "graph_hash=" << hex64(graph_hash(g)) << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  require(o.out, "--out");
  const Settings s = resolve_settings(o);
  const SplitDataset split = load_split(o.data);
  const TransitionGraph graph = load_or_build_graph(o, split);
  const fs::path out(o.out);
  DirLock lock(out);
  Manifest man(o, "train");
  man.input("data", o.data);
  if (!o.graph.empty()) man.input("graph", o.graph);
  const KeyValues resolved = to_key_values(s.train);
  man.settings(resolved);
  {
    std::ostringstream cfg;
    write_key_values(cfg, resolved);
    write_text(out / "config.txt", cfg.str());
  }

  std::ofstream log(out / "metrics.log");
  if (!log) throw IoError("cannot write metrics log in " + out.string());
  const TrainResult res = train(split, graph, s.train, &log);
  save_checkpoint(out / "best.ckpt", res.best);
  save_checkpoint(out / "last.ckpt", res.last);

  const std::string fp = config_fingerprint(s.train);
  const MetricReport valid = evaluate_variant(res.best, split, graph, EvalMode::kValid, s.train, o.k, fp);
  const MetricReport test = evaluate_variant(res.best, split, graph, EvalMode::kTest, s.train, o.k, fp);
  for (std::size_t i = 0; i < test.cutoffs.size(); ++i) {
    log << "final split=test hr@" << test.cutoffs[i] << '=' << detail::fmt17(test.values[i].hit_ratio) << " ndcg@"
        << test.cutoffs[i] << '=' << detail::fmt17(test.values[i].ndcg) << '\n';
  }
  log.close();
  write_text(out / "report_valid.txt", report_kv(valid));
  write_text(out / "report_test.txt", report_kv(test));

  man.set("seed", std::to_string(s.train.seed));
  man.set("best_epoch", std::to_string(res.best_epoch));
  man.set("epochs_run", std::to_string(res.history.size()));
  man.set("steps", std::to_string(res.steps.size()));
  man.set("best_checkpoint_hash", hex64(checkpoint_hash(res.best)));
  for (const char* f : {"config.txt", "metrics.log", "best.ckpt", "last.ckpt", "report_valid.txt", "report_test.txt"}) {
    man.artifact(out / f);
  }
  man.write();
  std::cout << "best_epoch=" << res.best_epoch << " epochs=" << res.history.size() << '\n';
  write_report_table(std::cout, test);
  return 0;
}

int cmd_eval(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  const Settings s = resolve_settings(o);
  EvalMode mode;
  if (o.mode == "valid") {
    mode = EvalMode::kValid;
  } else if (o.mode == "test") {
    mode = EvalMode::kTest;
  } else {
    throw Error("--mode must be valid or test, got '" + o.mode + "'");
  }
  const ModelParams params = load_checkpoint(o.checkpoint);
  const SplitDataset split = load_split(o.data);
  if (params.config().item_count != split.item_count || params.config().user_count != split.user_count) {
    throw Error("checkpoint vocabulary does not match the prepared data");
  }
  const TransitionGraph graph = load_or_build_graph(o, split);
  const std::string fp = hex64(checkpoint_hash(params));
  const MetricReport rep = evaluate_variant(params, split, graph, mode, s.train, o.k, fp);
  const std::string text = report_kv(rep);
  std::cout << text;
  if (!o.out.empty()) {
    const fs::path out(o.out);
    DirLock lock(out);
    Manifest man(o, "eval");
    man.input("checkpoint", o.checkpoint);
    man.input("data", o.data);
    if (!o.graph.empty()) man.input("graph", o.graph);
    man.set("mode", o.mode);
    man.set("eval_seed", std::to_string(s.train.eval_seed));
    const fs::path report = out / ("eval_" + o.mode + ".txt");
    write_text(report, text);
    man.artifact(report);
    man.write();
  }
  return 0;
}

int cmd_ablate(const Options& o) {
  require(o.out, "--out");
  const Settings s = resolve_settings(o);
  const SplitDataset split = load_split(o.data);
  const TransitionGraph graph = load_or_build_graph(o, split);
  const fs::path out(o.out);
  DirLock lock(out);
  Manifest man(o, "ablate");
  man.input("data", o.data);
  if (!o.graph.empty()) man.input("graph", o.graph);
  man.settings(to_key_values(s.train));
  man.set("ablate_seeds", std::to_string(s.ablate_seeds));

  std::vector<Ablation> variants{Ablation::kFull, Ablation::kNoGcl, Ablation::kNoGclNoMmd, Ablation::kUnweightedEdges};
  if (s.ablate_backbone) variants.push_back(Ablation::kBackboneOnly);
  std::vector<GridRow> rows;
  bool failed = false;
  const fs::path grid_path = out / "ablation.txt";
  auto write_grid_file = [&] {
    std::ostringstream os;
    write_grid(os, rows, o.k);
    write_text(grid_path, os.str());
    return os.str();
  };
  for (Ablation a : variants) {
    GridRow row;
    row.label = ablation_label(a);
    const fs::path vdir = out / ablation_name(a);
    fs::create_directories(vdir);
    for (std::size_t i = 0; i < s.ablate_seeds; ++i) {
      TrainConfig cfg = s.train;
      cfg.ablation = a;
      cfg.seed = s.train.seed + i;
      try {
        const TrainResult res = train(split, graph, cfg);
        MetricReport rep = evaluate_variant(res.best, split, graph, EvalMode::kTest, cfg, o.k, config_fingerprint(cfg));
        const fs::path rp = vdir / ("seed_" + std::to_string(cfg.seed) + ".txt");
        write_text(rp, report_kv(rep));
        man.artifact(rp);
        row.runs.push_back(std::move(rep));
      } catch (const Error& e) {
        row.error = e.what();
        failed = true;
        std::cerr << "gcl4sr: variant " << ablation_name(a) << " seed " << cfg.seed << " failed: " << e.what() << '\n';
        break;
      }
    }
    rows.push_back(std::move(row));
    write_grid_file();
  }
  const std::string grid = write_grid_file();
  man.artifact(grid_path);
  man.write();
  std::cout << grid;
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GCL4SR sequential recommendation: prepare, build-graph, train, eval, ablate, synth"};
  app.require_subcommand(1);
  Options o;
  o.argv.assign(argv, argv + argc);

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value settings file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "overrides the configured seed");
    sub->add_option("--out", o.out, "output directory");
  };
  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--data", o.data, "prepared data directory");
    sub->add_option("--graph", o.graph, "serialized transition graph (built from --data when omitted)");
    sub->add_option("--k", o.k, "metric cutoffs")->delimiter(',');
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic interaction log");
  add_common(synth);
  auto* prepare = app.add_subcommand("prepare", "filter, index and split an interaction log");
  add_common(prepare);
  prepare->add_option("--data", o.data, "interaction log (.tsv or .csv)");
  auto* build = app.add_subcommand("build-graph", "build the weighted item transition graph");
  add_common(build);
  build->add_option("--data", o.data, "prepared data directory");
  auto* trn = app.add_subcommand("train", "train a model");
  add_common(trn);
  add_data(trn);
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev);
  add_data(ev);
  ev->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  ev->add_option("--mode", o.mode, "valid or test")->check(CLI::IsMember({"valid", "test"}));
  auto* abl = app.add_subcommand("ablate", "train every ablation variant and print the comparison grid");
  add_common(abl);
  add_data(abl);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(o);
    if (*prepare) return cmd_prepare(o);
    if (*build) return cmd_build_graph(o);
    if (*trn) return cmd_train(o);
    if (*ev) return cmd_eval(o);
    if (*abl) return cmd_ablate(o);
  } catch (const std::exception& e) {
    std::cerr << "gcl4sr: error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
