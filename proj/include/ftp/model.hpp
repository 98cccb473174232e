// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale decoder-only transformer with pre-norm residual blocks:
//   X' = MHA(LN(X)) + X
//   Y  = FFN(LN(X')) + X'
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ftp/ops.hpp"
#include "ftp/serialize.hpp"

namespace ftp {

using TokenId = std::size_t;

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
  std::size_t n_blocks = 8;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 128;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0 || max_seq_len == 0) {
      throw ConfigError("model config extents must be positive");
    }
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerNormWeights {
  Tensor gain;
  Tensor bias;
};

/// Projections are stored fused across heads: head h owns columns
/// [h * d_head, (h + 1) * d_head) of wq, wk and wv.
struct BlockWeights {
  Tensor wq, wk, wv, wo;  // d x d
  Tensor w1;              // d x d_ff
  Tensor w2;              // d_ff x d
  LayerNormWeights ln1, ln2;
};

struct NamedTensor {
  std::string name;
  std::string role;
  Tensor tensor;
};

struct ModelWeights {
  ModelConfig config;
  Tensor token_embedding;     // vocab x d
  Tensor position_embedding;  // max_seq_len x d
  std::vector<BlockWeights> blocks;
  LayerNormWeights final_norm;
  Tensor head;  // d x vocab

  /// Handles in canonical (serialisation) order.
  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out;
    out.push_back({"embed.token", "embedding", token_embedding});
    out.push_back({"embed.position", "embedding", position_embedding});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto p = "block." + std::to_string(i) + ".";
      const auto& b = blocks[i];
      out.push_back({p + "ln1.gain", "norm", b.ln1.gain});
      out.push_back({p + "ln1.bias", "norm", b.ln1.bias});
      out.push_back({p + "wq", "attention", b.wq});
      out.push_back({p + "wk", "attention", b.wk});
      out.push_back({p + "wv", "attention", b.wv});
      out.push_back({p + "wo", "attention", b.wo});
      out.push_back({p + "ln2.gain", "norm", b.ln2.gain});
      out.push_back({p + "ln2.bias", "norm", b.ln2.bias});
      out.push_back({p + "w1", "ffn", b.w1});
      out.push_back({p + "w2", "ffn", b.w2});
    }
    out.push_back({"final_norm.gain", "norm", final_norm.gain});
    out.push_back({"final_norm.bias", "norm", final_norm.bias});
    out.push_back({"head", "head", head});
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : named_tensors()) out.push_back(nt.tensor);
    return out;
  }

  /// Independent deep copy with the given gradient flag on every tensor.
  ModelWeights copy(bool requires_grad) const {
    ModelWeights w;
    w.config = config;
    auto c = [&](const Tensor& t) { return t.clone(requires_grad); };
    w.token_embedding = c(token_embedding);
    w.position_embedding = c(position_embedding);
    for (const auto& b : blocks) {
      w.blocks.push_back({c(b.wq), c(b.wk), c(b.wv), c(b.wo), c(b.w1), c(b.w2),
                          {c(b.ln1.gain), c(b.ln1.bias)}, {c(b.ln2.gain), c(b.ln2.bias)}});
    }
    w.final_norm = {c(final_norm.gain), c(final_norm.bias)};
    w.head = c(head);
    return w;
  }

  bool any_requires_grad() const {
    for (const auto& nt : named_tensors())
      if (nt.tensor.requires_grad()) return true;
    return false;
  }

  /// FNV-1a over every value in canonical order.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& nt : named_tensors()) {
      auto v = nt.tensor.values();
      h = fnv1a64(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)), h);
    }
    return h;
  }
};

namespace detail {

inline Tensor random_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng,
                            bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = dist(rng);
  return Tensor({rows, cols}, std::move(v), requires_grad);
}

}  // namespace detail

/// Gaussian initialisation (std 0.02, residual projections scaled down by
/// sqrt(2 * n_blocks)); layer-norm gains 1, biases 0.
inline ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed, bool requires_grad = false) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const double std0 = 0.02;
  const double std_res = std0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.n_blocks, 1)));
  const auto d = cfg.d_model;
  auto ln = [&] {
    return LayerNormWeights{Tensor::full({d}, 1.0, requires_grad), Tensor::zeros({d}, requires_grad)};
  };
  ModelWeights w;
  w.config = cfg;
  w.token_embedding = detail::random_matrix(cfg.vocab_size, d, std0, rng, requires_grad);
  w.position_embedding = detail::random_matrix(cfg.max_seq_len, d, std0, rng, requires_grad);
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    BlockWeights b;
    b.ln1 = ln();
    b.wq = detail::random_matrix(d, d, std0, rng, requires_grad);
    b.wk = detail::random_matrix(d, d, std0, rng, requires_grad);
    b.wv = detail::random_matrix(d, d, std0, rng, requires_grad);
    b.wo = detail::random_matrix(d, d, std_res, rng, requires_grad);
    b.ln2 = ln();
    b.w1 = detail::random_matrix(d, cfg.d_ff, std0, rng, requires_grad);
    b.w2 = detail::random_matrix(cfg.d_ff, d, std_res, rng, requires_grad);
    w.blocks.push_back(std::move(b));
  }
  w.final_norm = ln();
  w.head = detail::random_matrix(d, cfg.vocab_size, std0, rng, requires_grad);
  return w;
}

/// Every matrix zero, layer norms at identity. Blocks become residual
/// pass-throughs.
inline ModelWeights zero_weights(const ModelConfig& cfg, std::uint64_t embed_seed = 1) {
  auto w = init_weights(cfg, embed_seed);
  for (auto& b : w.blocks) {
    for (Tensor* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) {
      auto v = t->data();
      std::fill(v.begin(), v.end(), 0.0);
    }
  }
  return w;
}

struct AttentionResult {
  Tensor output;      // L x d_head
  Tensor raw_scores;  // L x L, pre-mask Q K^T / sqrt(d_head)
};

/// Causal single-head scaled dot-product attention.
inline AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  detail::require_rank(q, 2, "attention");
  detail::require_same_shape(q, k, "attention");
  detail::require_rank(v, 2, "attention");
  if (v.dim(0) != q.dim(0)) throw DimensionError("attention: value rows differ from query rows");
  const double s = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  auto raw = scale(matmul_nt(q, k), s);
  auto probs = softmax(causal_mask_fill(raw), 1);
  return {matmul(probs, v), raw};
}

struct BlockResult {
  Tensor y;           // L x d
  Tensor raw_scores;  // L x L x n_heads, detached
  Tensor keys;        // L x d, detached, head-fused
  Tensor values;      // L x d, detached, head-fused
};

inline BlockResult block_forward(const Tensor& x, const BlockWeights& w, std::size_t n_heads) {
  detail::require_rank(x, 2, "block_forward");
  const auto L = x.dim(0), d = x.dim(1);
  if (w.wq.dim(0) != d) throw DimensionError("block_forward: input width does not match weights");
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("block_forward: bad head count");
  const auto dh = d / n_heads;

  auto h = layer_norm(x, w.ln1.gain, w.ln1.bias, kLayerNormEps);
  auto q = matmul(h, w.wq);
  auto k = matmul(h, w.wk);
  auto v = matmul(h, w.wv);

  std::vector<double> stacked(L * L * n_heads);
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t hd = 0; hd < n_heads; ++hd) {
    AttentionResult r = n_heads == 1
                            ? attention(q, k, v)
                            : attention(slice_cols(q, hd * dh, dh), slice_cols(k, hd * dh, dh),
                                        slice_cols(v, hd * dh, dh));
    auto rv = r.raw_scores.values();
    for (std::size_t i = 0; i < L * L; ++i) stacked[i * n_heads + hd] = rv[i];
    heads.push_back(std::move(r.output));
  }
  auto attn = n_heads == 1 ? heads[0] : concat_cols(heads);
  auto x1 = add(matmul(attn, w.wo), x);
  auto h2 = layer_norm(x1, w.ln2.gain, w.ln2.bias, kLayerNormEps);
  auto y = add(matmul(silu(matmul(h2, w.w1)), w.w2), x1);
  return {y, Tensor({L, L, n_heads}, std::move(stacked)), k.detach(), v.detach()};
}

inline void validate_tokens(std::span<const TokenId> tokens, const ModelConfig& cfg) {
  if (tokens.empty()) throw InputError("empty token sequence");
  if (tokens.size() > cfg.max_seq_len) {
    throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  for (auto t : tokens) {
    if (t >= cfg.vocab_size) throw InputError("token id " + std::to_string(t) + " >= vocab_size");
  }
}

/// Token plus learned absolute position embeddings.
inline Tensor embed(std::span<const TokenId> tokens, const ModelWeights& w) {
  validate_tokens(tokens, w.config);
  std::vector<std::size_t> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  return add(embedding_lookup(w.token_embedding, tokens), embedding_lookup(w.position_embedding, pos));
}

/// Embedding at a single absolute position (used by incremental decoding).
inline Tensor embed_at(TokenId token, std::size_t position, const ModelWeights& w) {
  if (token >= w.config.vocab_size) throw InputError("token id out of range");
  if (position >= w.config.max_seq_len) throw InputError("position exceeds max_seq_len");
  const std::size_t t[1] = {token};
  const std::size_t p[1] = {position};
  return add(embedding_lookup(w.token_embedding, t), embedding_lookup(w.position_embedding, p));
}

inline Tensor lm_head(const Tensor& hidden, const ModelWeights& w) {
  return matmul(layer_norm(hidden, w.final_norm.gain, w.final_norm.bias, kLayerNormEps), w.head);
}

/// Snapshots X_0 .. X_N: the input of block i is hidden[i], its output hidden[i + 1].
using HiddenStates = std::vector<Tensor>;

struct ModelOutput {
  Tensor logits;  // L x vocab
  HiddenStates hidden;
  std::vector<Tensor> scores;  // per block, L x L x n_heads
};

inline ModelOutput model_forward(std::span<const TokenId> tokens, const ModelWeights& w) {
  ModelOutput out;
  auto x = embed(tokens, w);
  out.hidden.push_back(x);
  for (const auto& b : w.blocks) {
    auto r = block_forward(x, b, w.config.n_heads);
    x = r.y;
    out.hidden.push_back(x);
    out.scores.push_back(std::move(r.raw_scores));
  }
  out.logits = lm_head(x, w);
  return out;
}

/// Row-wise argmax; lowest index wins ties.
inline std::vector<TokenId> argmax_rows(const Tensor& logits) {
  const auto m = logits.dim(0), n = logits.dim(1);
  std::vector<TokenId> out(m);
  auto v = logits.values();
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (v[i * n + j] > v[i * n + best]) best = j;
    out[i] = best;
  }
  return out;
}

}  // namespace ftp
