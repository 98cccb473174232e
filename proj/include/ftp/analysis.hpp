// SPDX-License-Identifier: Apache-2.0
//
// Redundancy analysis, retention, FLOPs/wall-clock speedup, and
// KV-cached greedy decoding with last-token depth routing.
#pragma once

#include <algorithm>
#include <chrono>
#include <limits>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ftp/evaluation.hpp"
#include "ftp/flops.hpp"

namespace ftp {

// ---------------------------------------------------------------------------
// Token redundancy

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

struct RedundancyReport {
  double threshold = 0.8;
  std::vector<std::vector<double>> similarities;  // [block][sample], sample = sequence * L + token
  std::vector<double> mean;                      // per block
  std::vector<double> fraction_above;            // per block, share of similarities > threshold
  std::vector<double> fraction_below;            // per block, 1 - fraction_above
  double first_group_mean = 0.0;                 // first three blocks
  double middle_group_mean = 0.0;
  double last_group_mean = 0.0;                  // last three blocks
  double ends_mean = 0.0;                        // mean of the first and the last block
  double interior_mean = 0.0;                    // mean over blocks 1 .. N-2

  std::size_t n_blocks() const { return similarities.size(); }

  /// Counts of similarities in `bins` equal-width bins over [-1, 1].
  std::vector<std::size_t> histogram(std::size_t block, std::size_t bins) const {
    std::vector<std::size_t> h(bins, 0);
    for (double s : similarities.at(block)) {
      auto b = static_cast<std::size_t>((s + 1.0) / 2.0 * static_cast<double>(bins));
      ++h[std::min(b, bins - 1)];
    }
    return h;
  }
};

namespace detail {

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

/// Per-token cosine similarity between each block's input and output over
/// n_sequences random windows of the corpus.
inline RedundancyReport redundancy_analysis(const ModelWeights& w, std::span<const TokenId> corpus,
                                            std::size_t n_sequences = 50, std::size_t seq_len = 64,
                                            std::uint64_t seed = 0, double threshold = 0.8) {
  if (corpus.size() < seq_len) throw ConfigError("redundancy analysis: corpus shorter than seq_len");
  if (n_sequences == 0) throw ConfigError("redundancy analysis: need at least one sequence");
  const auto N = w.config.n_blocks, d = w.config.d_model;
  RedundancyReport rep;
  rep.threshold = threshold;
  rep.similarities.assign(N, {});
  std::mt19937_64 rng(seed);
  NoGradGuard ng;
  for (std::size_t s = 0; s < n_sequences; ++s) {
    const auto window = sample_window(corpus, seq_len, rng);
    auto out = model_forward(window, w);
    for (std::size_t b = 0; b < N; ++b) {
      auto in = out.hidden[b].values(), o = out.hidden[b + 1].values();
      for (std::size_t j = 0; j < seq_len; ++j)
        rep.similarities[b].push_back(cosine_similarity(in.subspan(j * d, d), o.subspan(j * d, d)));
    }
  }
  for (std::size_t b = 0; b < N; ++b) {
    const auto& sims = rep.similarities[b];
    rep.mean.push_back(detail::mean_of(sims));
    const auto above = std::count_if(sims.begin(), sims.end(), [&](double x) { return x > threshold; });
    rep.fraction_above.push_back(static_cast<double>(above) / static_cast<double>(sims.size()));
    rep.fraction_below.push_back(1.0 - rep.fraction_above.back());
  }
  auto group = [&](std::size_t lo, std::size_t hi) {
    if (hi <= lo) return 0.0;
    return detail::mean_of(std::span<const double>(rep.mean).subspan(lo, hi - lo));
  };
  const std::size_t g = std::min<std::size_t>(3, N);
  rep.first_group_mean = group(0, g);
  rep.last_group_mean = group(N - g, N);
  rep.middle_group_mean = N > 6 ? group(3, N - 3) : group(0, N);
  if (N > 0) rep.ends_mean = 0.5 * (rep.mean.front() + rep.mean.back());
  rep.interior_mean = N > 2 ? group(1, N - 1) : rep.ends_mean;
  return rep;
}

// ---------------------------------------------------------------------------
// Retention

struct RetentionResult {
  double dense_metric = 0.0;
  double pruned_metric = 0.0;
  double retention = 0.0;  // percent
};

inline RetentionResult retention_from(double dense_metric, double pruned_metric) {
  if (dense_metric == 0.0) throw ConfigError("retention undefined: dense metric is zero");
  return {dense_metric, pruned_metric, pruned_metric / dense_metric * 100.0};
}

inline RetentionResult evaluate_retention(const ModelWeights& w, const Router& router, const SparsityConfig& config,
                                          const EvalSet& eval_set) {
  const double dense = evaluate_dense(w, eval_set).accuracy;
  return retention_from(dense, evaluate_routed(w, router, config, eval_set).accuracy);
}

// ---------------------------------------------------------------------------
// Speedup

/// Dense over routed FLOPs for one sequence of length L.
inline double theoretical_speedup(const ModelConfig& cfg, const SparsityConfig& config, std::size_t L) {
  if (config.n_blocks() != cfg.n_blocks) throw ConfigError("sparsity config does not match model depth");
  double dense = 0.0, routed = 0.0;
  for (double s : config.ratios) {
    dense += flops_per_block(L, cfg.d_model, cfg.d_ff);
    routed += flops_per_block(L - skip_count(L, s), cfg.d_model, cfg.d_ff);
  }
  return routed == 0.0 ? std::numeric_limits<double>::infinity() : dense / routed;
}

struct WallClock {
  double dense_ms = 0.0;   // median
  double routed_ms = 0.0;  // median
  double ratio = 0.0;      // dense / routed
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Times dense and static-routed forwards of one random sequence, alternating
/// the two so drift affects both. Single-threaded.
inline WallClock measure_wall_clock(const ModelWeights& w, const SparsityConfig& config, std::size_t L,
                                    std::size_t runs = 21, std::uint64_t seed = 0) {
  if (runs == 0) throw ConfigError("wall-clock measurement needs at least one run");
  std::mt19937_64 rng(seed);
  std::vector<TokenId> toks(L);
  for (auto& t : toks) t = rng() % w.config.vocab_size;
  NoGradGuard ng;
  using clock = std::chrono::steady_clock;
  auto ms = [](clock::duration d) { return std::chrono::duration<double, std::milli>(d).count(); };
  (void)model_forward(toks, w);  // warm-up
  (void)routed_model_forward(toks, w, Router::static_router(), config);
  std::vector<double> dense, routed;
  for (std::size_t r = 0; r < runs; ++r) {
    auto t0 = clock::now();
    (void)model_forward(toks, w);
    auto t1 = clock::now();
    (void)routed_model_forward(toks, w, Router::static_router(), config);
    auto t2 = clock::now();
    dense.push_back(ms(t1 - t0));
    routed.push_back(ms(t2 - t1));
  }
  WallClock wc{median(dense), median(routed), 0.0};
  wc.ratio = wc.dense_ms / wc.routed_ms;
  return wc;
}

struct SpeedupRow {
  std::size_t length = 0;
  double target = 0.0;
  double theoretical = 0.0;
  double measured = 0.0;  // 0 when not measured
};

/// Theoretical ratio for each (length, config) pair; wall-clock too when
/// `w` is given and runs > 0.
inline std::vector<SpeedupRow> speedup_report(const ModelConfig& cfg, std::span<const SparsityConfig> configs,
                                              std::span<const std::size_t> lengths, const ModelWeights* w = nullptr,
                                              std::size_t runs = 0) {
  std::vector<SpeedupRow> rows;
  for (auto L : lengths) {
    for (const auto& c : configs) {
      SpeedupRow r{L, c.target, theoretical_speedup(cfg, c, L), 0.0};
      if (w != nullptr && runs > 0) r.measured = measure_wall_clock(*w, c, L, runs).ratio;
      rows.push_back(r);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// KV-cached decoding

enum class DecodeStrategy { Dense, Threshold, Strict };

struct DecodeOptions {
  DecodeStrategy strategy = DecodeStrategy::Dense;
  double threshold = 0.5;
  double target = 0.3;  // strict: share of schedulable blocks the decode token skips

  void validate() const {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("decode threshold must be in (0, 1)");
    if (!(target >= 0.0 && target < 1.0)) throw ConfigError("decode target must be in [0, 1)");
  }
};

/// Keys and values of the tokens that computed a block, in sequence order.
struct BlockCache {
  std::vector<double> keys, values;  // rows of width d
  std::vector<std::size_t> positions;
  std::size_t rows() const { return positions.size(); }
};

struct DecodeResult {
  std::vector<TokenId> generated;
  std::vector<std::vector<double>> logits;      // one row per generated token
  std::vector<double> depth_sparsity;           // per decode-step token: skipped / schedulable blocks
  std::vector<std::vector<std::uint8_t>> block_gates;  // per decode-step token, per block
  std::vector<BlockCache> cache;
};

inline std::size_t strict_skip_target(double target, std::size_t schedulable) {
  return skip_count(schedulable, target);
}

namespace detail {

inline std::vector<double> row_of(const Tensor& t, std::size_t r) {
  const auto d = t.dim(1);
  auto v = t.values().subspan(r * d, d);
  return {v.begin(), v.end()};
}

/// One block on one new token against the cache; appends its key/value.
/// Returns the new hidden row and the token's attention score.
inline std::pair<Tensor, double> decode_block_step(const Tensor& x, const BlockWeights& w, std::size_t n_heads,
                                                   BlockCache& cache, std::size_t position) {
  const auto d = x.dim(1), dh = d / n_heads;
  auto h = layer_norm(x, w.ln1.gain, w.ln1.bias, kLayerNormEps);
  const auto qt = matmul(h, w.wq), kt = matmul(h, w.wk), vt = matmul(h, w.wv);
  auto q = qt.values(), k = kt.values(), v = vt.values();
  cache.keys.insert(cache.keys.end(), k.begin(), k.end());
  cache.values.insert(cache.values.end(), v.begin(), v.end());
  cache.positions.push_back(position);
  const auto n = cache.rows();
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> attn(d, 0.0), scores(n);
  double score_sum = 0.0;
  for (std::size_t hd = 0; hd < n_heads; ++hd) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < dh; ++c) dot += q[hd * dh + c] * cache.keys[j * d + hd * dh + c];
      scores[j] = dot * inv;
      score_sum += scores[j];
      mx = std::max(mx, scores[j]);
    }
    double z = 0.0;
    for (auto& s : scores) z += (s = std::exp(s - mx));
    for (std::size_t j = 0; j < n; ++j) {
      const double p = scores[j] / z;
      for (std::size_t c = 0; c < dh; ++c) attn[hd * dh + c] += p * cache.values[j * d + hd * dh + c];
    }
  }
  auto x1 = add(matmul(Tensor({1, d}, std::move(attn)), w.wo), x);
  auto h2 = layer_norm(x1, w.ln2.gain, w.ln2.bias, kLayerNormEps);
  auto y = add(matmul(silu(matmul(h2, w.w1)), w.w2), x1);
  return {y, score_sum / static_cast<double>(n * n_heads)};
}

}  // namespace detail

/// Greedy decoding. The prompt is prefilled with routed inference and its
/// computed tokens' keys/values cached per block. Every later token is one
/// row: at each block it either computes against that block's cache (and
/// joins it) or skips. Pinned blocks 0 and N-1 always compute; the others
/// follow the strategy.
inline DecodeResult kv_decode(const ModelWeights& w, const Router& router, const SparsityConfig& config,
                              std::span<const TokenId> prompt, std::size_t n_new, const DecodeOptions& opt) {
  opt.validate();
  const auto N = w.config.n_blocks;
  if (config.n_blocks() != N) throw ConfigError("sparsity config does not match model depth");
  if (prompt.empty()) throw InputError("empty prompt");
  if (prompt.size() > w.config.max_seq_len) throw InputError("prompt exceeds max_seq_len");
  if (n_new > 0 && prompt.size() + n_new - 1 > w.config.max_seq_len) {
    throw InputError("prompt plus generated tokens exceed max_seq_len");
  }
  NoGradGuard ng;
  DecodeResult res;
  if (n_new == 0) return res;

  auto pre = routed_model_forward(prompt, w, router, config, RouteMode::Inference);
  res.cache.resize(N);
  for (std::size_t b = 0; b < N; ++b) {
    auto& c = res.cache[b];
    c.positions = pre.selected[b];
    if (!c.positions.empty()) {
      auto k = pre.keys[b].values(), v = pre.values[b].values();
      c.keys.assign(k.begin(), k.end());
      c.values.assign(v.begin(), v.end());
    }
  }
  auto table = pre.table;
  const auto last = prompt.size() - 1;
  res.logits.push_back(detail::row_of(pre.logits, last));
  auto next = static_cast<TokenId>(std::max_element(res.logits.back().begin(), res.logits.back().end()) -
                                   res.logits.back().begin());
  res.generated.push_back(next);

  const std::size_t S = N >= 3 ? N - 2 : 0;
  const std::size_t K = opt.strategy == DecodeStrategy::Strict ? strict_skip_target(opt.target, S) : 0;
  for (std::size_t step = 1; step < n_new; ++step) {
    const std::size_t pos = prompt.size() + step - 1;
    auto x = embed_at(next, pos, w);
    table.push_back(0.0);
    std::size_t skipped = 0, seen = 0;
    std::vector<std::uint8_t> gates(N, 1);
    for (std::size_t b = 0; b < N; ++b) {
      bool compute = true;
      if (b != 0 && b + 1 != N && opt.strategy != DecodeStrategy::Dense) {
        const std::size_t remaining = S - seen;
        ++seen;
        auto router_says = [&] {
          double prob = 1.0;  // the static router always keeps the newest token
          if (router.is_dynamic()) {
            auto f = extract_factors(b, table, config, table.size());
            prob = dynamic_score(factors_to_tensor(std::span(f).last(1)), *router.dynamic).at(0, 1);
          }
          return prob > opt.threshold;
        };
        if (opt.strategy == DecodeStrategy::Strict && skipped >= K) {
          compute = true;
        } else if (opt.strategy == DecodeStrategy::Strict && K - skipped >= remaining) {
          compute = false;
        } else {
          compute = router_says();
        }
      }
      if (compute) {
        auto [y, score] = detail::decode_block_step(x, w.blocks[b], w.config.n_heads, res.cache[b], pos);
        x = y;
        table.set(pos, score);
      } else {
        gates[b] = 0;
        ++skipped;
      }
    }
    res.depth_sparsity.push_back(S == 0 ? 0.0 : static_cast<double>(skipped) / static_cast<double>(S));
    res.block_gates.push_back(std::move(gates));
    const auto logits_t = lm_head(x, w);
    auto logits = logits_t.values();
    res.logits.emplace_back(logits.begin(), logits.end());
    next = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    res.generated.push_back(next);
  }
  return res;
}

}  // namespace ftp
