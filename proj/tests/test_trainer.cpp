#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "gcl4sr/gcl4sr.hpp"

using namespace gcl4sr;

namespace {

struct Fixture {
  SplitDataset split;
  TransitionGraph graph;
};

Fixture tiny_fixture(std::size_t items = 8, std::size_t users = 12, double noise = 0.2) {
  SynthConfig sc;
  sc.item_count = items;
  sc.user_count = users;
  sc.min_length = 5;
  sc.max_length = 8;
  sc.noise = noise;
  Fixture f;
  f.split = split_leave_one_out(build_sequences(generate_synthetic(sc, 11), 1));
  f.graph = build_witg(f.split.train, f.split.item_count);
  return f;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.dim = 8;
  c.max_len = 6;
  c.batch_size = 16;
  c.learning_rate = 0.01;
  c.max_epochs = 3;
  c.patience = 10;
  c.sampler.size = 3;
  return c;
}

std::vector<Tensor> copy_values(const ModelParams& p) { return {p.values().begin(), p.values().end()}; }

}  // namespace

TEST(Adam, ZeroLearningRateLeavesParamsUnchanged) {
  ModelParams p = ModelParams::initialized(ModelConfig{6, 4, 8, 2, 1, 5, 0.0}, 3);
  const auto before = copy_values(p);
  AdamState st(p);
  std::vector<Tensor> g;
  for (const Tensor& v : p.values()) g.push_back(Tensor(v.shape(), 0.5));
  adam_step(p, st, g, AdamSettings{0.0, 0.9, 0.999, 1e-8, 0.5});
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(p.value(i), before[i]);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  std::vector<Tensor> values{Tensor::row({1.0, -2.0, 3.0})};
  std::vector<Tensor> grads{Tensor::row({0.5, -4.0, 1e-3})};
  AdamState st{std::span<const Tensor>(values)};
  const AdamSettings s{0.1, 0.9, 0.999, 1e-8, 0.0};
  adam_update(values, st, grads, s);
  const double expect[3] = {1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8),
                            3.0 - 0.1 * 1e-3 / (1e-3 + 1e-8)};
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(values[0][j], expect[j], 1e-12);
}

TEST(Adam, ZeroGradientWithoutDecayIsNoOp) {
  std::vector<Tensor> values{Tensor::row({1.0, 2.0})};
  const Tensor before = values[0];
  std::vector<Tensor> grads{Tensor(values[0].shape())};
  AdamState st{std::span<const Tensor>(values)};
  for (int i = 0; i < 5; ++i) adam_update(values, st, grads, AdamSettings{0.1, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(values[0], before);
}

TEST(Adam, DescendsQuadraticBowl) {
  std::vector<Tensor> x{Tensor::row({3.0, -2.0, 1.5})};
  AdamState st{std::span<const Tensor>(x)};
  for (int i = 0; i < 200; ++i) {
    std::vector<Tensor> g{x[0]};
    for (std::size_t j = 0; j < 3; ++j) g[0][j] *= 2.0;
    adam_update(x, st, g, AdamSettings{0.1, 0.9, 0.999, 1e-8, 0.0});
  }
  double norm = 0;
  for (std::size_t j = 0; j < 3; ++j) norm += x[0][j] * x[0][j];
  EXPECT_LT(std::sqrt(norm), 0.1);
}

TEST(Adam, GradientShapeMismatchThrows) {
  std::vector<Tensor> values{Tensor(Shape{2, 2})};
  std::vector<Tensor> grads{Tensor(Shape{2, 3})};
  AdamState st{std::span<const Tensor>(values)};
  EXPECT_THROW(adam_update(values, st, grads, AdamSettings{}), ShapeError);
}

TEST(Schedule, StepDecayHalvesEachInterval) {
  TrainConfig c;
  c.learning_rate = 0.01;
  c.lr_decay_interval = 4;
  c.lr_decay_factor = 0.5;
  EXPECT_EQ(learning_rate_at(c, 0), 0.01);
  EXPECT_EQ(learning_rate_at(c, 3), 0.01);
  EXPECT_EQ(learning_rate_at(c, 4), 0.005);
  EXPECT_EQ(learning_rate_at(c, 9), 0.0025);
}

TEST(Ablation, EffectiveWeights) {
  TrainConfig c;
  c.weights.lambda1 = 0.3;
  c.weights.lambda2 = 0.7;
  c.ablation = Ablation::kNoGcl;
  EXPECT_EQ(apply_ablation(c).weights.lambda1, 0.0);
  EXPECT_EQ(apply_ablation(c).weights.lambda2, 0.7);
  c.ablation = Ablation::kNoGclNoMmd;
  EXPECT_EQ(apply_ablation(c).weights.lambda2, 0.0);
  c.ablation = Ablation::kUnweightedEdges;
  EXPECT_TRUE(apply_ablation(c).unweighted_edges);
  EXPECT_EQ(apply_ablation(c).weights.lambda1, 0.3);
  for (Ablation a : {Ablation::kFull, Ablation::kNoGcl, Ablation::kNoGclNoMmd, Ablation::kUnweightedEdges,
                     Ablation::kBackboneOnly}) {
    EXPECT_EQ(parse_ablation(ablation_name(a)), a);
  }
  EXPECT_THROW(parse_ablation("nope"), Error);
}

TEST(Train, DeterministicForFixedSeed) {
  const Fixture f = tiny_fixture();
  const TrainConfig c = tiny_config();
  std::ostringstream a, b;
  const TrainResult r1 = train(f.split, f.graph, c, &a);
  const TrainResult r2 = train(f.split, f.graph, c, &b);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_FALSE(a.str().empty());
  EXPECT_EQ(checkpoint_hash(r1.best), checkpoint_hash(r2.best));
  EXPECT_EQ(checkpoint_hash(r1.last), checkpoint_hash(r2.last));
}

TEST(Train, DifferentSeedsDiverge) {
  const Fixture f = tiny_fixture();
  TrainConfig c = tiny_config();
  const TrainResult r1 = train(f.split, f.graph, c);
  c.seed += 1;
  const TrainResult r2 = train(f.split, f.graph, c);
  EXPECT_NE(checkpoint_hash(r1.last), checkpoint_hash(r2.last));
}

TEST(Train, ZeroLambdasMakeTotalEqualMain) {
  const Fixture f = tiny_fixture();
  TrainConfig c = tiny_config();
  c.ablation = Ablation::kNoGclNoMmd;
  const TrainResult r = train(f.split, f.graph, c);
  ASSERT_FALSE(r.steps.empty());
  for (const auto& s : r.steps) {
    EXPECT_EQ(s.total, s.main);
    EXPECT_GT(s.gcl, 0.0);
  }
}

TEST(Train, PaddingRowStaysZero) {
  const Fixture f = tiny_fixture();
  const TrainResult r = train(f.split, f.graph, tiny_config());
  const Tensor& e = r.last.value(r.last.slots().item_embedding);
  for (std::size_t j = 0; j < e.cols(); ++j) EXPECT_EQ(e(0, j), 0.0);
}

TEST(Train, BestCheckpointHasBestValidation) {
  const Fixture f = tiny_fixture(10, 20, 0.3);
  TrainConfig c = tiny_config();
  c.max_epochs = 4;
  const TrainResult r = train(f.split, f.graph, c);
  double best = -1.0;
  for (const auto& e : r.history) {
    if (e.valid_hr10) best = std::max(best, *e.valid_hr10);
  }
  EXPECT_GE(r.best_valid_hr10, best);
  const MetricReport rep = evaluate_variant(r.best, f.split, f.graph, EvalMode::kValid, c);
  EXPECT_EQ(rep.hr(10), r.best_valid_hr10);
}

TEST(Train, ZeroEpochsReturnsInitialParams) {
  const Fixture f = tiny_fixture();
  TrainConfig c = tiny_config();
  c.max_epochs = 0;
  const TrainResult r = train(f.split, f.graph, c);
  const ModelParams init = ModelParams::initialized(c.model_config(f.split.item_count, f.split.user_count), c.seed);
  EXPECT_EQ(checkpoint_hash(r.best), checkpoint_hash(init));
  EXPECT_EQ(r.best_epoch, 0u);
  EXPECT_TRUE(r.steps.empty());
}

TEST(Train, EarlyStopsAfterPatience) {
  const Fixture f = tiny_fixture();
  TrainConfig c = tiny_config();
  c.learning_rate = 0.0;
  c.l2 = 0.0;
  c.patience = 2;
  c.max_epochs = 50;
  const TrainResult r = train(f.split, f.graph, c);
  EXPECT_EQ(r.history.size(), 2u);
  EXPECT_EQ(r.best_epoch, 0u);
}

TEST(Train, UnweightedEdgesMatchFullOnUniformGraph) {
  TransitionGraph g(3);
  g.add_edge(1, 2, 1.0, 1.0);
  g.add_edge(2, 3, 0.5, 1.0);
  g.add_edge(1, 3, 1.0 / 3.0, 1.0);
  g.finalize();
  ModelParams p = ModelParams::initialized(ModelConfig{3, 1, 8, 2, 1, 5, 0.0}, 9);
  const std::vector<ItemIndex> prefix{1, 2, 3};
  const SamplerConfig sc{2, 4, 1};
  const SampledView v1 = sample_view(g, 0, prefix, sc, 1);
  const SampledView v2 = sample_view(g, 0, prefix, sc, 2);
  ad::Tape ta, tb;
  Network a(ta, p, ForwardOptions{false, false});
  Network b(tb, p, ForwardOptions{false, true});
  const Tensor sa = a.forward(0, prefix, v1, v2).scores.value();
  const Tensor sb = b.forward(0, prefix, v1, v2).scores.value();
  EXPECT_EQ(sa, sb);
}

TEST(Train, RejectsInvalidConfig) {
  const Fixture f = tiny_fixture();
  TrainConfig c = tiny_config();
  c.batch_size = 0;
  EXPECT_THROW(train(f.split, f.graph, c), Error);
  c = tiny_config();
  c.weights.tau = 0.0;
  EXPECT_THROW(train(f.split, f.graph, c), Error);
}

// Full batch, fixed views and no dropout give a deterministic objective.
TEST(Train, CyclicCorpusLossFallsAndFits) {
  SynthConfig sc;
  sc.item_count = 10;
  sc.user_count = 20;
  sc.min_length = 6;
  sc.max_length = 10;
  const SplitDataset split = split_leave_one_out(build_sequences(generate_synthetic(sc, 3), 1));
  const TransitionGraph graph = build_witg(split.train, split.item_count);
  TrainConfig c;
  c.dim = 16;
  c.max_epochs = 200;
  c.patience = 0;
  c.learning_rate = 0.005;
  c.lr_decay_interval = 50;
  c.dropout = 0.0;
  c.batch_size = 1000;
  c.resample_per_epoch = false;
  c.seed = 5;
  const TrainResult r = train(split, graph, c);
  ASSERT_EQ(r.history.size(), 200u);
  constexpr std::size_t kWindow = 10;
  double prev = 1e300;
  for (std::size_t start = 3; start + kWindow <= r.history.size(); start += kWindow) {
    double sum = 0.0;
    for (std::size_t i = start; i < start + kWindow; ++i) sum += r.history[i].mean_total;
    EXPECT_LT(sum / kWindow, prev) << "window starting at epoch " << start + 1;
    prev = sum / kWindow;
  }
  const MetricReport rep = summarize(rank_pairs(r.last, training_pairs(split, c.max_len), graph, eval_config_for(c)), {1});
  EXPECT_GE(rep.hr(1), 0.9);
}
