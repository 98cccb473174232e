// SPDX-License-Identifier: Apache-2.0
//
// Next-token pretraining of the dense model, so there is something
// meaningful to prune.
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "ftp/evaluation.hpp"
#include "ftp/optim.hpp"

namespace ftp {

struct PretrainConfig {
  std::size_t steps = 1000;
  double lr = 1e-4;
  std::size_t seq_len = 64;
  std::size_t batch_size = 4;  // sequences per optimiser step
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  ModelWeights weights;  // frozen (no gradient records)
  std::vector<double> train_loss;
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
};

/// AdamW on mean next-token cross entropy over random windows of `corpus`.
/// Held-out losses are reported when `heldout` is non-empty.
inline PretrainResult pretrain_dense(const ModelConfig& cfg, std::span<const TokenId> corpus,
                                     const PretrainConfig& pc, const EvalSet& heldout = {}) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("pretrain: empty corpus");
  if (pc.seq_len + 1 > corpus.size()) throw ConfigError("pretrain: corpus shorter than one training window");
  if (pc.seq_len > cfg.max_seq_len) throw ConfigError("pretrain: seq_len exceeds max_seq_len");
  if (pc.batch_size == 0) throw ConfigError("pretrain: batch_size must be positive");

  PretrainResult res;
  auto w = init_weights(cfg, pc.seed, true);
  if (!heldout.empty()) res.initial_heldout_loss = evaluate_dense(w, heldout).cross_entropy;

  auto params = w.parameters();
  AdamW opt(params, {pc.lr, 0.9, 0.999, 1e-8, pc.weight_decay});
  std::mt19937_64 rng(pc.seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t step = 0; step < pc.steps; ++step) {
    opt.zero_grad();
    double step_loss = 0.0;
    for (std::size_t b = 0; b < pc.batch_size; ++b) {
      const auto window = sample_window(corpus, pc.seq_len + 1, rng);
      std::span<const TokenId> input(window.data(), pc.seq_len);
      std::span<const TokenId> target(window.data() + 1, pc.seq_len);
      auto out = model_forward(input, w);
      auto loss = scale(cross_entropy(out.logits, target), 1.0 / static_cast<double>(pc.batch_size));
      step_loss += loss.item();
      backward(loss);
    }
    clip_grad_norm(params, pc.clip_norm);
    opt.step();
    res.train_loss.push_back(step_loss);
  }
  res.weights = w.copy(false);
  if (!heldout.empty()) res.final_heldout_loss = evaluate_dense(res.weights, heldout).cross_entropy;
  return res;
}

}  // namespace ftp
