// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>
#include <set>

#include "ftp/routing.hpp"
#include "test_util.hpp"

namespace ftp {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_blocks = 4;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 13;
  c.max_seq_len = 16;
  return c;
}

ModelWeights noisy_model(std::uint64_t seed) {
  auto w = init_weights(tiny_config(), seed);
  std::mt19937_64 rng(seed * 7 + 1);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& nt : w.named_tensors()) {
    if (nt.role == "norm") continue;
    Tensor t = nt.tensor;
    for (auto& v : t.data()) v = u(rng);
  }
  return w;
}

std::vector<TokenId> tokens_of(std::size_t L, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenId> t(L);
  for (auto& v : t) v = rng() % tiny_config().vocab_size;
  return t;
}

TEST(StaticRankTest, Examples) {
  EXPECT_EQ(static_rank(1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(static_rank(5), (std::vector<std::size_t>{0, 4, 3, 2, 1}));
  for (std::size_t L = 2; L < 40; ++L) {
    auto r = static_rank(L);
    EXPECT_EQ(r.back(), 1u);
    EXPECT_EQ(std::set<std::size_t>(r.begin(), r.end()).size(), L);
    EXPECT_EQ(*std::max_element(r.begin(), r.end()), L - 1);
  }
}

TEST(StaticSelectTest, Examples) {
  auto g = static_select(5, 0.0);
  EXPECT_EQ(g.computed(), 5u);
  g = static_select(5, 0.4);
  EXPECT_EQ(g.gates, (std::vector<std::uint8_t>{1, 0, 0, 1, 1}));
  g = static_select(4, 1.0);
  EXPECT_EQ(g.computed(), 0u);
  EXPECT_EQ(static_select(10, 0.25).skipped(), 3u);  // 2.5 rounds up
  EXPECT_EQ(static_select(10, 0.24).skipped(), 2u);
  EXPECT_THROW(static_select(4, 1.5), ConfigError);
}

TEST(AttentionScoreTest, Examples) {
  auto one = Tensor({1, 1, 2}, {0.4, 1.0});
  EXPECT_DOUBLE_EQ(attention_score(one)[0], 0.7);
  auto c = Tensor::full({3, 3, 2}, -1.25);
  auto s = attention_score(c);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(s[i], -1.25);
}

TEST(AttentionScoreTest, MatchesDoubleLoop) {
  std::mt19937_64 rng(2);
  auto raw = testing::random_tensor({4, 4, 2}, rng, false, -3, 3);
  auto s = attention_score(raw);
  for (std::size_t i = 0; i < 4; ++i) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      if (j > i) continue;
      for (std::size_t h = 0; h < 2; ++h) {
        total += raw[i * 8 + j * 2 + h];
        ++n;
      }
    }
    EXPECT_NEAR(s[i], total / static_cast<double>(n), 1e-12);
  }
}

TEST(FactorTest, Examples) {
  auto cfg = SparsityConfig{0.3, {0.0, 0.45, 0.2, 0.0}};
  AttentionScoreTable eq(2);
  auto f = extract_factors(1, eq, cfg, 2);
  EXPECT_EQ(f[0].r_a, 0.0);
  EXPECT_EQ(f[1].r_a, 1.0);

  AttentionScoreTable t(5);
  const std::vector<std::size_t> rows{0, 1, 2, 3, 4};
  const std::vector<double> sc{0.3, -1.0, 2.0, 0.3, 0.1};
  t.update(rows, sc);
  f = extract_factors(2, t, cfg, 5);
  const std::vector<double> p{0, .25, .5, .75, 1}, ra{.5, 0, 1, .75, .25};
  for (std::size_t j = 0; j < 5; ++j) {
    EXPECT_DOUBLE_EQ(f[j].p, p[j]);
    EXPECT_DOUBLE_EQ(f[j].r_a, ra[j]);
    EXPECT_EQ(f[j].s_a, sc[j]);
    EXPECT_EQ(f[j].s_r, 0.2);
  }
  AttentionScoreTable single(1);
  f = extract_factors(0, single, cfg, 1);
  EXPECT_EQ(f[0].p, 0.0);
  EXPECT_EQ(f[0].r_a, 0.0);
  EXPECT_THROW(extract_factors(0, single, cfg, 2), DimensionError);
}

TEST(ScoreTableTest, SkippedTokensKeepScoresAndAge) {
  AttentionScoreTable t(3);
  const std::vector<std::size_t> all{0, 1, 2}, some{0, 2};
  t.update(all, std::vector<double>{1, 2, 3});
  t.update(some, std::vector<double>{5, 6});
  EXPECT_EQ(std::vector<double>(t.scores().begin(), t.scores().end()), (std::vector<double>{5, 2, 6}));
  EXPECT_EQ(t.staleness()[1], 1u);
  EXPECT_EQ(t.staleness()[0], 0u);
}

TEST(DynamicScoreTest, ZeroWeightsAreUniform) {
  auto w = DynamicRouterWeights::zeros();
  std::mt19937_64 rng(1);
  auto s = dynamic_score(testing::random_tensor({6, 4}, rng, false), w);
  for (auto v : s.values()) EXPECT_EQ(v, 0.5);
}

TEST(DynamicScoreTest, RowsSumToOne) {
  auto w = DynamicRouterWeights::init(9);
  std::mt19937_64 rng(3);
  auto s = dynamic_score(testing::random_tensor({20, 4}, rng, false, -5, 5), w);
  for (std::size_t j = 0; j < 20; ++j) EXPECT_NEAR(s.at(j, 0) + s.at(j, 1), 1.0, 1e-12);
}

TEST(DynamicScoreTest, GradientWrtW1MatchesFiniteDifferences) {
  auto w = DynamicRouterWeights::init(5, true);
  std::mt19937_64 rng(6);
  auto f = testing::random_tensor({5, 4}, rng, false);
  auto target = testing::random_tensor({5, 2}, rng, false);
  auto r = testing::check_gradient([&] { return sum(mul(dynamic_score(f, w), target)); }, w.w1, 1e-4);
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(GateTest, ArgmaxAndTies) {
  auto soft = Tensor::matrix(3, 2, {0.2, 0.8, 0.5, 0.5, 0.9, 0.1});
  auto g = gate_with_st(soft);
  EXPECT_EQ(g.gates, (std::vector<std::uint8_t>{1, 1, 0}));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(g.st[j], g.gates[j]);
}

TEST(GateTest, StraightThroughPassesGradientUnchanged) {
  std::mt19937_64 rng(2);
  auto soft = testing::random_tensor({4, 2}, rng, true, 0.0, 1.0);
  auto weights = testing::random_tensor({4}, rng, false);
  backward(sum(mul(select_col(soft, 1), weights)));
  const std::vector<double> plain(soft.grad().begin(), soft.grad().end());
  soft.zero_grad();
  backward(sum(mul(gate_with_st(soft).st, weights)));
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_EQ(soft.grad()[i], plain[i]);
}

TEST(TopkTest, SkipsLowestProbabilities) {
  const std::vector<double> p{0.9, 0.1, 0.4, 0.1, 0.7};
  auto g = topk_gate(p, 0.4);
  EXPECT_EQ(g.gates, (std::vector<std::uint8_t>{1, 0, 1, 0, 1}));
  g = topk_gate(p, 0.6);
  EXPECT_EQ(g.gates, (std::vector<std::uint8_t>{1, 0, 0, 0, 1}));
  const std::vector<double> flat(4, 0.5);
  EXPECT_EQ(topk_gate(flat, 0.25).gates, (std::vector<std::uint8_t>{0, 1, 1, 1}));
}

TEST(RoutedBlockTest, AllOnesIsDense) {
  auto w = noisy_model(3);
  std::mt19937_64 rng(4);
  auto x = testing::random_tensor({6, 8}, rng, false);
  auto dense = block_forward(x, w.blocks[1], 2).y;
  auto routed = routed_block_forward(x, w.blocks[1], 2, GateVector::all(6)).y;
  for (std::size_t i = 0; i < dense.size(); ++i) EXPECT_EQ(routed[i], dense[i]);
}

TEST(RoutedBlockTest, AllZerosIsIdentity) {
  auto w = noisy_model(3);
  std::mt19937_64 rng(4);
  auto x = testing::random_tensor({6, 8}, rng, false);
  auto y = routed_block_forward(x, w.blocks[1], 2, static_select(6, 1.0)).y;
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(RoutedBlockTest, PartialGateEqualsGatherScatter) {
  auto w = noisy_model(8);
  std::mt19937_64 rng(5);
  auto x = testing::random_tensor({4, 8}, rng, false);
  GateVector g = GateVector::all(4);
  g.gates = {1, 0, 1, 1};
  auto y = routed_block_forward(x, w.blocks[2], 2, g).y;
  // Oracle: run the sub-sequence through the block on its own.
  auto sub = Tensor::zeros({3, 8});
  const std::size_t rows[3] = {0, 2, 3};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) sub.data()[r * 8 + c] = x.at(rows[r], c);
  auto ys = block_forward(sub, w.blocks[2], 2).y;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(y.at(rows[r], c), ys.at(r, c), 1e-12);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(y.at(1, c), x.at(1, c));
}

TEST(RoutedModelTest, ZeroConfigMatchesDense) {
  auto w = noisy_model(11);
  auto toks = tokens_of(10, 1);
  auto dense = model_forward(toks, w).logits;
  for (auto router : {Router::static_router()}) {
    auto r = routed_model_forward(toks, w, router, SparsityConfig::zeros(4));
    for (std::size_t i = 0; i < dense.size(); ++i) EXPECT_NEAR(r.logits[i], dense[i], 1e-10);
  }
  auto rw = DynamicRouterWeights::init(2);
  auto r = routed_model_forward(toks, w, Router::dynamic_router(rw), SparsityConfig::zeros(4));
  for (std::size_t i = 0; i < dense.size(); ++i) EXPECT_NEAR(r.logits[i], dense[i], 1e-10);
}

TEST(RoutedModelTest, StaticActiveCounts) {
  auto w = noisy_model(12);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t L : {1u, 2u, 7u, 16u}) {
    SparsityConfig c{0.0, {0.0, u(rng), u(rng), 0.0}};
    auto r = routed_model_forward(tokens_of(L, L), w, Router::static_router(), c);
    for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(r.active_counts[b], L - skip_count(L, c.ratios[b]));
  }
}

TEST(RoutedModelTest, InvariantsHoldForRandomConfigs) {
  auto w = noisy_model(13);
  auto rw = DynamicRouterWeights::init(17);
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t L = 1 + rng() % 16;
    SparsityConfig c{0.0, {0.0, u(rng), u(rng), 0.0}};
    const bool dyn = trial % 2 == 1;
    auto router = dyn ? Router::dynamic_router(rw) : Router::static_router();
    auto r = routed_model_forward(tokens_of(L, trial), w, router, c);
    std::vector<double> expected_score(L, 0.0);
    for (std::size_t b = 0; b < 4; ++b) {
      EXPECT_EQ(r.active_counts[b], L - skip_count(L, c.ratios[b]));
      const auto& in = r.hidden[b];
      const auto& outh = r.hidden[b + 1];
      for (std::size_t j = 0; j < L; ++j) {
        if (r.gates[b].gates[j]) continue;
        for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(outh.at(j, k), in.at(j, k));
      }
      // Freshness oracle: recompute the block's scores on its sub-sequence.
      if (!r.selected[b].empty()) {
        auto sub = block_forward(gather_rows(in, r.selected[b]), w.blocks[b], 2);
        auto sc = attention_score(sub.raw_scores);
        for (std::size_t i = 0; i < r.selected[b].size(); ++i) expected_score[r.selected[b][i]] = sc[i];
      }
    }
    for (std::size_t j = 0; j < L; ++j) EXPECT_NEAR(r.table.scores()[j], expected_score[j], 1e-12);
  }
}

TEST(RoutedModelTest, ConfigLengthMismatch) {
  auto w = noisy_model(1);
  EXPECT_THROW(routed_model_forward(tokens_of(4, 1), w, Router::static_router(), SparsityConfig::zeros(3)),
               ConfigError);
}

TEST(RoutedModelTest, TrainingModeGradientReachesRouter) {
  auto w = noisy_model(21);
  auto rw = DynamicRouterWeights::init(3, true);
  rw.b2.data()[1] = 0.3;  // some tokens compute, so gate gradients exist
  auto toks = tokens_of(9, 4);
  SparsityConfig c{0.3, {0.0, 0.5, 0.5, 0.0}};
  auto loss_fn = [&] {
    auto r = routed_model_forward(toks, w, Router::dynamic_router(rw), c, RouteMode::Training);
    return sum(mul(r.logits, r.logits));
  };
  backward(loss_fn());
  auto r = routed_model_forward(toks, w, Router::dynamic_router(rw), c, RouteMode::Training);
  ASSERT_GT(r.gates[1].computed(), 0u);
  double norm = 0.0;
  for (auto g : rw.w2.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

}  // namespace
}  // namespace ftp
