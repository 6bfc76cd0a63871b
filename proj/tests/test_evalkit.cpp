#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gcl4sr/evalkit.hpp"
#include "oracles.hpp"

using namespace gcl4sr;

namespace {

double loop_hr(const std::vector<RankResult>& r, std::size_t k) {
  double s = 0;
  for (const auto& x : r) s += x.rank <= k ? 1.0 : 0.0;
  return s / static_cast<double>(r.size());
}

double loop_ndcg(const std::vector<RankResult>& r, std::size_t k) {
  double s = 0;
  for (const auto& x : r)
    if (x.rank <= k) s += std::log(2.0) / std::log(static_cast<double>(x.rank) + 1.0);
  return s / static_cast<double>(r.size());
}

SplitDataset small_split(std::size_t items, std::size_t users, std::uint64_t seed) {
  SynthConfig sc;
  sc.item_count = items;
  sc.user_count = users;
  sc.noise = 1.0;
  auto corpus = build_sequences(generate_synthetic(sc, seed), 1);
  return split_leave_one_out(corpus);
}

}  // namespace

TEST(RankTarget, UniqueMaximumIsFirst) {
  const std::vector<double> s{0.1, 0.9, 0.3};
  EXPECT_EQ(rank_target(s, 2).rank, 1u);
}

TEST(RankTarget, TiesBreakByItemIndex) {
  const std::vector<double> s(10, 0.25);
  EXPECT_EQ(rank_target(s, 5).rank, 5u);
  EXPECT_EQ(rank_target(s, 1).rank, 1u);
  EXPECT_EQ(rank_target(s, 10).rank, 10u);
}

TEST(RankTarget, OutOfRangeTargetThrows) {
  const std::vector<double> s{1, 2};
  EXPECT_THROW(rank_target(s, 0), Error);
  EXPECT_THROW(rank_target(s, 3), Error);
}

TEST(RankTarget, MatchesFullSortOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(60);
    std::vector<double> s(n);
    // coarse values so ties are common
    for (double& v : s) v = static_cast<double>(rng.index(8)) / 4.0;
    const ItemIndex target = 1 + rng.index(n);
    EXPECT_EQ(rank_target(s, target).rank, oracle::rank_by_sort(s, target));
  }
}

TEST(Metrics, AllFirstIsPerfect) {
  const std::vector<RankResult> r{{0, 1, 1}, {1, 2, 1}};
  const auto m = metrics(r, 10);
  EXPECT_EQ(m.hit_ratio, 1.0);
  EXPECT_EQ(m.ndcg, 1.0);
}

TEST(Metrics, RankTwoNdcg) {
  const std::vector<RankResult> r{{0, 1, 2}};
  const auto m = metrics(r, 10);
  EXPECT_EQ(m.hit_ratio, 1.0);
  EXPECT_NEAR(m.ndcg, 1.0 / std::log2(3.0), 1e-15);
  EXPECT_NEAR(m.ndcg, 0.6309, 1e-4);
}

TEST(Metrics, ContractErrors) {
  const std::vector<RankResult> none;
  EXPECT_THROW(metrics(none, 10), Error);
  const std::vector<RankResult> one{{0, 1, 1}};
  EXPECT_THROW(metrics(one, 0), Error);
}

TEST(Metrics, MatchLoopOracleAndInvariants) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<RankResult> r;
    for (int u = 0; u < 100; ++u) r.push_back({static_cast<UserIndex>(u), 1, 1 + rng.index(40)});
    for (std::size_t k : {1, 5, 10, 20}) {
      const auto m = metrics(r, k);
      EXPECT_NEAR(m.hit_ratio, loop_hr(r, k), 1e-12);
      EXPECT_NEAR(m.ndcg, loop_ndcg(r, k), 1e-12);
    }
    const auto rep = summarize(r, {20, 10});
    EXPECT_EQ(rep.cutoffs, (std::vector<std::size_t>{10, 20}));
    EXPECT_LE(rep.ndcg(10), rep.hr(10));
    EXPECT_LE(rep.ndcg(20), rep.hr(20));
    EXPECT_LE(rep.hr(10), rep.hr(20));
    EXPECT_LE(rep.ndcg(10), rep.ndcg(20));
  }
}

TEST(Report, KeyValueAndTable) {
  const std::vector<RankResult> r{{0, 1, 1}, {1, 1, 15}};
  const auto rep = summarize(r, {10, 20}, "abc");
  std::ostringstream kv, table;
  write_report_kv(kv, rep);
  EXPECT_EQ(kv.str(), "users=2\nfingerprint=abc\nhr@10=0.5\nndcg@10=0.5\nhr@20=1\nndcg@20=0.625\n");
  write_report_table(table, rep);
  EXPECT_NE(table.str().find("HR"), std::string::npos);
  EXPECT_NE(table.str().find("0.5000"), std::string::npos);
}

TEST(Evaluate, DeterministicUnderFixedEvalSeed) {
  const auto split = small_split(20, 40, 2);
  const auto graph = build_witg(split.train, split.item_count);
  ModelConfig mc{split.item_count, split.user_count, 8, 2, 1, 20, 0.0};
  const auto params = ModelParams::initialized(mc, 1);
  EvalConfig ec;
  ec.sampler = {2, 4, 0};
  ec.eval_seed = 3;
  const auto a = rank_split(params, split, graph, EvalMode::kTest, ec);
  const auto b = rank_split(params, split, graph, EvalMode::kTest, ec);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].rank, b[i].rank);
}

TEST(Evaluate, ValidNeverReadsTestTargets) {
  auto split = small_split(20, 40, 5);
  const auto graph = build_witg(split.train, split.item_count);
  ModelConfig mc{split.item_count, split.user_count, 8, 2, 1, 20, 0.0};
  const auto params = ModelParams::initialized(mc, 1);
  EvalConfig ec;
  const auto before = evaluate(params, split, graph, EvalMode::kValid, ec);
  for (auto& t : split.test_target)
    if (t != kPadding) t = t % split.item_count + 1;
  const auto after = evaluate(params, split, graph, EvalMode::kValid, ec);
  for (std::size_t i = 0; i < before.values.size(); ++i) {
    EXPECT_EQ(before.values[i].hit_ratio, after.values[i].hit_ratio);
    EXPECT_EQ(before.values[i].ndcg, after.values[i].ndcg);
  }
}

TEST(Evaluate, TestPrefixCarriesValidationItem) {
  // one user, items 1..5: valid input [1,2,3] -> 4, test input [1,2,3,4] -> 5
  const auto split = split_leave_one_out({Sequence{0, {1, 2, 3, 4, 5}}}, 5, 1);
  const auto graph = build_witg(split.train, 5);
  ModelConfig mc{5, 1, 8, 2, 1, 10, 0.0};
  const auto params = ModelParams::initialized(mc, 4);
  EvalConfig ec;
  const auto r = rank_split(params, split, graph, EvalMode::kTest, ec);
  const std::vector<ItemIndex> prefix{1, 2, 3, 4};
  const Tensor scores = score_prefix(params, graph, 0, prefix, ec);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].target, 5u);
  EXPECT_EQ(r[0].rank, rank_of(scores.values(), 5));
}

TEST(Grid, MeanStdAndLayout) {
  const MeanStd ms = mean_std(std::vector<double>{1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(ms.mean, 2.0);
  EXPECT_DOUBLE_EQ(ms.std, 1.0);
  EXPECT_EQ(mean_std(std::vector<double>{0.5}).std, 0.0);

  const std::vector<RankResult> top{{0, 1, 1}}, miss{{0, 1, 30}};
  const std::vector<std::size_t> ks{10};
  std::vector<GridRow> rows(2);
  rows[0].label = "full";
  rows[0].runs = {summarize(top, ks), summarize(miss, ks)};
  rows[1].label = "w/o W";
  rows[1].error = "boom";
  std::ostringstream os;
  write_grid(os, rows, ks);
  const std::string text = os.str();
  EXPECT_NE(text.find("0.5000 +/- 0.7071"), std::string::npos);
  EXPECT_NE(text.find("failed: boom"), std::string::npos);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}
