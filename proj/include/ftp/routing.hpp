// SPDX-License-Identifier: Apache-2.0
//
// Token routing: the static priority router, the attention score table,
// router input factors, the dynamic perceptron router with straight-through
// gates, and routed forward passes where skipped tokens ride the residual
// stream and take no part in the block's attention.
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "ftp/model.hpp"
#include "ftp/sparsity.hpp"

namespace ftp {

/// Compute/skip decisions for one block. gates[j] == 1 means token j is
/// computed. `st` is the differentiable gate (forward value == gates) and
/// is only defined for dynamically routed blocks in training mode.
struct GateVector {
  std::vector<std::uint8_t> gates;
  std::vector<double> compute_prob;
  Tensor st;

  std::size_t size() const { return gates.size(); }
  std::size_t computed() const { return static_cast<std::size_t>(std::count(gates.begin(), gates.end(), 1)); }
  std::size_t skipped() const { return size() - computed(); }

  static GateVector all(std::size_t L) { return {std::vector<std::uint8_t>(L, 1), std::vector<double>(L, 1.0), {}}; }
};

// ---------------------------------------------------------------------------
// Static router

/// Importance order, most important first: 0, L-1, L-2, ..., 1.
inline std::vector<std::size_t> static_rank(std::size_t L) {
  std::vector<std::size_t> order;
  order.reserve(L);
  if (L == 0) return order;
  order.push_back(0);
  for (std::size_t j = L - 1; j >= 1; --j) order.push_back(j);
  return order;
}

/// Skips the skip_count(L, s) least important tokens of static_rank(L).
inline GateVector static_select(std::size_t L, double s) {
  if (s < 0.0 || s > 1.0) throw ConfigError("static_select: ratio outside [0, 1]");
  GateVector g = GateVector::all(L);
  const auto order = static_rank(L);
  const auto k = skip_count(L, s);
  for (std::size_t r = 0; r < k; ++r) {
    g.gates[order[L - 1 - r]] = 0;
    g.compute_prob[order[L - 1 - r]] = 0.0;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Attention scores

/// Per-query score from raw (pre-softmax) scores[L x L x H]: mean over heads,
/// then mean over the causally visible keys 0..i.
inline Tensor attention_score(const Tensor& raw_scores) {
  detail::require_rank(raw_scores, 3, "attention_score");
  const auto L = raw_scores.dim(0), H = raw_scores.dim(2);
  if (raw_scores.dim(1) != L) throw DimensionError("attention_score: scores must be L x L x H");
  auto v = raw_scores.values();
  std::vector<double> out(L);
  for (std::size_t i = 0; i < L; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      double head_sum = 0.0;
      for (std::size_t h = 0; h < H; ++h) head_sum += v[(i * L + j) * H + h];
      acc += head_sum / static_cast<double>(H);
    }
    out[i] = acc / static_cast<double>(i + 1);
  }
  return Tensor({L}, std::move(out));
}

/// Latest attention score per token. Entries start at 0 and are refreshed
/// only for tokens that computed the most recent block.
class AttentionScoreTable {
 public:
  AttentionScoreTable() = default;
  explicit AttentionScoreTable(std::size_t L) : scores_(L, 0.0), staleness_(L, 0) {}

  std::size_t size() const { return scores_.size(); }
  std::span<const double> scores() const { return scores_; }
  std::span<const std::size_t> staleness() const { return staleness_; }

  /// rows[r] receives values[r]; every other token ages by one block.
  void update(std::span<const std::size_t> rows, std::span<const double> values) {
    if (rows.size() != values.size()) throw DimensionError("score table update: length mismatch");
    for (auto& s : staleness_) ++s;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      scores_.at(rows[r]) = values[r];
      staleness_[rows[r]] = 0;
    }
  }

  /// Appends a token (incremental decoding) with an empty score.
  void push_back(double score = 0.0) {
    scores_.push_back(score);
    staleness_.push_back(0);
  }
  void set(std::size_t j, double score) {
    scores_.at(j) = score;
    staleness_.at(j) = 0;
  }

 private:
  std::vector<double> scores_;
  std::vector<std::size_t> staleness_;
};

// ---------------------------------------------------------------------------
// Router factors

inline constexpr std::size_t kFactorCount = 4;

/// Router input for one token, in the order [p, s_a, r_a, s_r].
struct RouterFactors {
  double p = 0.0;    // position j / (L - 1)
  double s_a = 0.0;  // latest absolute attention score
  double r_a = 0.0;  // rank of s_a among the L tokens, scaled to [0, 1]
  double s_r = 0.0;  // this block's configured sparsity
};

/// Ascending rank of each score; equal scores rank by token index.
inline std::vector<std::size_t> score_ranks(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<std::size_t> rank(scores.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r;
  return rank;
}

inline std::vector<RouterFactors> extract_factors(std::size_t block_index, const AttentionScoreTable& table,
                                                  const SparsityConfig& config, std::size_t L) {
  if (table.size() != L) throw DimensionError("extract_factors: score table length differs from L");
  if (block_index >= config.n_blocks()) throw DimensionError("extract_factors: block index out of range");
  const double denom = static_cast<double>(std::max<std::size_t>(L - 1, 1));
  const auto ranks = score_ranks(table.scores());
  std::vector<RouterFactors> out(L);
  for (std::size_t j = 0; j < L; ++j) {
    out[j].p = L == 1 ? 0.0 : static_cast<double>(j) / denom;
    out[j].s_a = table.scores()[j];
    out[j].r_a = static_cast<double>(ranks[j]) / denom;
    out[j].s_r = config.ratios[block_index];
  }
  return out;
}

inline Tensor factors_to_tensor(std::span<const RouterFactors> factors) {
  std::vector<double> v;
  v.reserve(factors.size() * kFactorCount);
  for (const auto& f : factors) {
    v.push_back(f.p);
    v.push_back(f.s_a);
    v.push_back(f.r_a);
    v.push_back(f.s_r);
  }
  return Tensor({factors.size(), kFactorCount}, std::move(v));
}

// ---------------------------------------------------------------------------
// Dynamic router

inline constexpr std::size_t kRouterHidden = 64;

/// Two-layer perceptron 4 -> 64 -> 2 shared by all blocks. Output column 1
/// is the compute logit.
struct DynamicRouterWeights {
  Tensor w1;  // 4 x 64
  Tensor b1;  // 64
  Tensor w2;  // 64 x 2
  Tensor b2;  // 2

  static DynamicRouterWeights init(std::uint64_t seed, bool requires_grad = false) {
    std::mt19937_64 rng(seed);
    DynamicRouterWeights w;
    w.w1 = detail::random_matrix(kFactorCount, kRouterHidden, 1.0 / std::sqrt(double(kFactorCount)), rng,
                                 requires_grad);
    w.b1 = Tensor::zeros({kRouterHidden}, requires_grad);
    w.w2 = detail::random_matrix(kRouterHidden, 2, 1.0 / std::sqrt(double(kRouterHidden)), rng, requires_grad);
    w.b2 = Tensor::zeros({2}, requires_grad);
    return w;
  }

  static DynamicRouterWeights zeros(bool requires_grad = false) {
    return {Tensor::zeros({kFactorCount, kRouterHidden}, requires_grad), Tensor::zeros({kRouterHidden}, requires_grad),
            Tensor::zeros({kRouterHidden, 2}, requires_grad), Tensor::zeros({2}, requires_grad)};
  }

  std::vector<NamedTensor> named_tensors() const {
    return {{"router.w1", "router", w1}, {"router.b1", "router", b1}, {"router.w2", "router", w2},
            {"router.b2", "router", b2}};
  }
  std::vector<Tensor> parameters() const { return {w1, b1, w2, b2}; }

  DynamicRouterWeights copy(bool requires_grad) const {
    return {w1.clone(requires_grad), b1.clone(requires_grad), w2.clone(requires_grad), b2.clone(requires_grad)};
  }
};

/// Row-wise softmax of the perceptron output: [L x 2], column 1 = P(compute).
inline Tensor dynamic_score(const Tensor& factors, const DynamicRouterWeights& w) {
  detail::require_rank(factors, 2, "dynamic_score");
  if (factors.dim(1) != kFactorCount) throw DimensionError("dynamic_score: expected 4 factors per token");
  auto hidden = silu(add_bias(matmul(factors, w.w1), w.b1));
  return softmax(add_bias(matmul(hidden, w.w2), w.b2), 1);
}

/// Argmax gate (compute wins ties) with a straight-through gradient onto the
/// compute-probability column.
inline GateVector gate_with_st(const Tensor& soft) {
  detail::require_rank(soft, 2, "gate_with_st");
  if (soft.dim(1) != 2) throw DimensionError("gate_with_st: expected L x 2 probabilities");
  const auto L = soft.dim(0);
  GateVector g;
  g.gates.resize(L);
  g.compute_prob.resize(L);
  std::vector<double> hard(L);
  for (std::size_t j = 0; j < L; ++j) {
    const double skip = soft.at(j, 0), compute = soft.at(j, 1);
    g.compute_prob[j] = compute;
    g.gates[j] = compute >= skip ? 1 : 0;
    hard[j] = g.gates[j];
  }
  g.st = straight_through(select_col(soft, 1), std::move(hard));
  return g;
}

/// Inference-time enforcement: exactly skip_count(L, s) tokens with the
/// lowest compute probability are skipped (ties skip the lower index).
inline GateVector topk_gate(std::span<const double> compute_prob, double s) {
  const auto L = compute_prob.size();
  GateVector g;
  g.gates.assign(L, 1);
  g.compute_prob.assign(compute_prob.begin(), compute_prob.end());
  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return compute_prob[a] < compute_prob[b]; });
  const auto k = skip_count(L, s);
  for (std::size_t r = 0; r < k; ++r) g.gates[order[r]] = 0;
  return g;
}

// ---------------------------------------------------------------------------
// Routed forward

struct RoutedBlockResult {
  Tensor y;
  Tensor raw_scores;  // Ls x Ls x H over the selected sub-sequence, or undefined
  std::vector<std::size_t> selected;
  Tensor keys, values;  // Ls x d for the selected tokens, or undefined
};

/// Runs the block on the gathered sub-sequence of computed tokens (causal
/// order kept) and scatters results back; skipped rows are copied from x.
/// If the gate carries a straight-through tensor the merge is differentiable
/// with respect to it.
inline RoutedBlockResult routed_block_forward(const Tensor& x, const BlockWeights& w, std::size_t n_heads,
                                              const GateVector& gate) {
  detail::require_rank(x, 2, "routed_block_forward");
  const auto L = x.dim(0);
  if (gate.size() != L) throw DimensionError("routed_block_forward: gate length differs from L");
  RoutedBlockResult out;
  for (std::size_t j = 0; j < L; ++j)
    if (gate.gates[j]) out.selected.push_back(j);

  if (gate.st.defined()) {
    // Skipped tokens take the dense block output as their "had it computed"
    // value, so the straight-through gate still learns from them.
    Tensor y_skip;
    if (out.selected.size() < L) {
      NoGradGuard ng;
      y_skip = block_forward(x, w, n_heads).y;
    }
    if (out.selected.empty()) {
      out.y = route_merge(x, Tensor{}, gate.st, out.selected, y_skip);
      return out;
    }
    auto r = block_forward(gather_rows(x, out.selected), w, n_heads);
    out.y = route_merge(x, r.y, gate.st, out.selected, y_skip);
    out.raw_scores = std::move(r.raw_scores);
    out.keys = std::move(r.keys);
    out.values = std::move(r.values);
    return out;
  }

  if (out.selected.empty()) {
    out.y = x;
    return out;
  }
  if (out.selected.size() == L) {
    auto r = block_forward(x, w, n_heads);
    out.y = std::move(r.y);
    out.raw_scores = std::move(r.raw_scores);
    out.keys = std::move(r.keys);
    out.values = std::move(r.values);
    return out;
  }
  auto r = block_forward(gather_rows(x, out.selected), w, n_heads);
  out.y = route_merge(x, r.y, Tensor(Shape{L}, std::vector<double>(gate.gates.begin(), gate.gates.end())),
                      out.selected);
  out.raw_scores = std::move(r.raw_scores);
  out.keys = std::move(r.keys);
  out.values = std::move(r.values);
  return out;
}

/// Which router drives the gates. The dynamic router is borrowed, not owned.
struct Router {
  enum class Kind { Static, Dynamic };
  Kind kind = Kind::Static;
  const DynamicRouterWeights* dynamic = nullptr;

  static Router static_router() { return {}; }
  static Router dynamic_router(const DynamicRouterWeights& w) { return {Kind::Dynamic, &w}; }
  bool is_dynamic() const { return kind == Kind::Dynamic; }
};

enum class RouteMode {
  Inference,  // per-block skip count enforced exactly
  Training,   // raw argmax gates with straight-through gradients
  Relaxed,    // every token computed, output mixed by the soft probability (gradient checks)
};

/// Every token computes; the merge weight is the compute probability itself.
inline GateVector relaxed_gate(const Tensor& soft) {
  const auto L = soft.dim(0);
  GateVector g = GateVector::all(L);
  for (std::size_t j = 0; j < L; ++j) g.compute_prob[j] = soft.at(j, 1);
  g.st = select_col(soft, 1);
  return g;
}

struct RoutedOutput {
  Tensor logits;
  HiddenStates hidden;  // X_0 .. X_N
  std::vector<GateVector> gates;
  std::vector<std::size_t> active_counts;
  std::vector<Tensor> soft;  // per block; defined only where the dynamic router ran
  AttentionScoreTable table;
  std::vector<std::vector<std::size_t>> selected;
  std::vector<Tensor> keys, values;  // per block, selected tokens only
};

/// Full routed pass. Blocks whose configured ratio is 0 are computed densely
/// without consulting the router.
inline RoutedOutput routed_model_forward(std::span<const TokenId> tokens, const ModelWeights& w, const Router& router,
                                         const SparsityConfig& config, RouteMode mode = RouteMode::Inference) {
  if (config.n_blocks() != w.config.n_blocks) {
    throw ConfigError("sparsity config has " + std::to_string(config.n_blocks()) + " ratios for " +
                      std::to_string(w.config.n_blocks) + " blocks");
  }
  if (router.is_dynamic() && router.dynamic == nullptr) throw UsageError("dynamic router without weights");
  const auto L = tokens.size();
  RoutedOutput out;
  auto x = embed(tokens, w);
  out.table = AttentionScoreTable(L);
  out.hidden.push_back(x);
  for (std::size_t b = 0; b < w.config.n_blocks; ++b) {
    const double s = config.ratios[b];
    if (s < 0.0 || s > 1.0) throw ConfigError("sparsity ratio outside [0, 1]");
    GateVector gate;
    Tensor soft;
    if (s == 0.0) {
      gate = GateVector::all(L);
    } else if (!router.is_dynamic()) {
      gate = static_select(L, s);
    } else {
      auto factors = factors_to_tensor(extract_factors(b, out.table, config, L));
      soft = dynamic_score(factors, *router.dynamic);
      if (mode == RouteMode::Training) {
        gate = gate_with_st(soft);
      } else if (mode == RouteMode::Relaxed) {
        gate = relaxed_gate(soft);
      } else {
        std::vector<double> prob(L);
        for (std::size_t j = 0; j < L; ++j) prob[j] = soft.at(j, 1);
        gate = topk_gate(prob, s);
      }
    }
    auto r = routed_block_forward(x, w.blocks[b], w.config.n_heads, gate);
    if (r.raw_scores.defined()) {
      auto sc = attention_score(r.raw_scores);
      out.table.update(r.selected, sc.values());
    } else {
      out.table.update({}, {});
    }
    x = r.y;
    out.hidden.push_back(x);
    out.active_counts.push_back(r.selected.size());
    out.gates.push_back(std::move(gate));
    out.soft.push_back(std::move(soft));
    out.selected.push_back(std::move(r.selected));
    out.keys.push_back(std::move(r.keys));
    out.values.push_back(std::move(r.values));
  }
  out.logits = lm_head(x, w);
  return out;
}

}  // namespace ftp
