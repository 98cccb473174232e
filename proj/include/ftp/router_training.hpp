// SPDX-License-Identifier: Apache-2.0
//
// Training the dynamic router against a frozen model. Three losses: a
// guide loss pulling the router toward the static router's decisions, a
// one-sided sparsity penalty, and an MSE distillation loss on the last
// block's output. The guide weight decays linearly to zero.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <vector>

#include "ftp/optim.hpp"
#include "ftp/routing.hpp"
#include "ftp/corpus.hpp"

namespace ftp {

struct LossWeights {
  double lambda_d = 1.0;
  double lambda_s = 1.0;
  double lambda_g = 1.0;
  double guide_horizon = 0.5;  // fraction of total steps at which the guide weight reaches 0

  void validate() const {
    if (lambda_d < 0 || lambda_s < 0 || lambda_g < 0) throw ConfigError("loss weights must be non-negative");
    if (!(guide_horizon >= 0.0 && guide_horizon <= 1.0)) throw ConfigError("guide_horizon must be in [0, 1]");
  }
};

struct TrainingConfig {
  std::size_t steps = 10000;
  std::size_t batch_size = 1;
  std::size_t seq_len = 64;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0) throw ConfigError("router training batch_size must be positive");
    if (seq_len == 0) throw ConfigError("router training seq_len must be positive");
    if (!(lr > 0.0)) throw ConfigError("router training lr must be positive");
  }
};

/// Mean BCE between the compute probability and the static decision,
/// averaged over tokens and then over the blocks that have a soft output.
inline Tensor guide_loss(std::span<const Tensor> soft, std::span<const GateVector> targets) {
  if (soft.size() != targets.size()) throw DimensionError("guide_loss: block count mismatch");
  Tensor total;
  std::size_t blocks = 0;
  for (std::size_t b = 0; b < soft.size(); ++b) {
    if (!soft[b].defined()) continue;
    if (soft[b].dim(0) != targets[b].size()) throw DimensionError("guide_loss: token count mismatch");
    std::vector<double> t(targets[b].gates.begin(), targets[b].gates.end());
    auto term = binary_cross_entropy(select_col(soft[b], 1), t);
    total = total.defined() ? add(total, term) : term;
    ++blocks;
  }
  if (blocks == 0) return Tensor::scalar(0.0);
  return scale(total, 1.0 / static_cast<double>(blocks));
}

/// sum_i max(s_i - (1/L) sum_j (1 - g_ij), 0). Uses the straight-through gate
/// where one exists, so the penalty has a gradient.
inline Tensor sparsity_loss(std::span<const GateVector> gates, const SparsityConfig& config) {
  if (gates.size() != config.n_blocks()) throw DimensionError("sparsity_loss: block count mismatch");
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t b = 0; b < gates.size(); ++b) {
    const auto L = gates[b].size();
    if (L == 0) continue;
    Tensor g = gates[b].st.defined()
                   ? gates[b].st
                   : Tensor({L}, std::vector<double>(gates[b].gates.begin(), gates[b].gates.end()));
    const auto skipped = mean(add_scalar(scale(g, -1.0), 1.0));
    total = add(total, relu(add_scalar(scale(skipped, -1.0), config.ratios[b])));
  }
  return total;
}

inline Tensor distill_loss(const Tensor& pruned_last, const Tensor& dense_last) {
  return mse(pruned_last, dense_last.detach());
}

/// 1 at step 0, linear to 0 at horizon * total_steps, then 0.
inline double guide_weight(std::size_t step, std::size_t total_steps, double horizon) {
  const double end = horizon * static_cast<double>(total_steps);
  if (end <= 0.0) return 0.0;
  return std::max(0.0, 1.0 - static_cast<double>(step) / end);
}

struct LossRecord {
  std::size_t step = 0;
  double l_d = 0.0, l_s = 0.0, l_g = 0.0, lambda_g = 0.0, total = 0.0;
};

struct RouterLosses {
  Tensor l_d, l_s, l_g, total;
  double lambda_g = 0.0;
};

/// Static decisions the guide loss imitates: one gate vector per block.
inline std::vector<GateVector> static_targets(std::size_t L, const SparsityConfig& config) {
  std::vector<GateVector> t;
  t.reserve(config.n_blocks());
  for (double s : config.ratios) t.push_back(static_select(L, s));
  return t;
}

/// The weighted objective on one sequence.
inline RouterLosses router_objective(std::span<const TokenId> tokens, const ModelWeights& w,
                                     const DynamicRouterWeights& router, const SparsityConfig& config,
                                     const LossWeights& lw, double lambda_g,
                                     RouteMode mode = RouteMode::Training) {
  Tensor teacher;
  {
    NoGradGuard ng;
    teacher = model_forward(tokens, w).hidden.back();
  }
  auto student = routed_model_forward(tokens, w, Router::dynamic_router(router), config, mode);
  RouterLosses out;
  out.lambda_g = lambda_g;
  out.l_d = distill_loss(student.hidden.back(), teacher);
  out.l_s = sparsity_loss(student.gates, config);
  out.l_g = guide_loss(student.soft, static_targets(tokens.size(), config));
  out.total = add(add(scale(out.l_d, lw.lambda_d), scale(out.l_s, lw.lambda_s)), scale(out.l_g, lw.lambda_g * lambda_g));
  return out;
}

struct RouterTrainResult {
  DynamicRouterWeights router;  // frozen copy
  std::vector<LossRecord> trace;
};

inline RouterTrainResult train_router(const ModelWeights& w, const DynamicRouterWeights& init,
                                      const SparsityConfig& config, std::span<const TokenId> corpus,
                                      const TrainingConfig& tc, const LossWeights& lw) {
  tc.validate();
  lw.validate();
  if (config.n_blocks() != w.config.n_blocks) throw ConfigError("sparsity config does not match model depth");
  if (tc.seq_len > w.config.max_seq_len) throw ConfigError("router training seq_len exceeds max_seq_len");
  if (tc.steps > 0 && corpus.size() < tc.seq_len) throw ConfigError("corpus shorter than one training window");
  if (w.any_requires_grad()) throw InvariantError("train_router: model weights must be frozen");
  const auto before = w.checksum();

  RouterTrainResult res;
  auto router = init.copy(true);
  auto params = router.parameters();
  AdamW opt(params, {tc.lr, 0.9, 0.999, 1e-8, tc.weight_decay});
  std::mt19937_64 rng(tc.seed ^ 0x5851f42d4c957f2dULL);
  const double inv_batch = 1.0 / static_cast<double>(tc.batch_size);
  for (std::size_t step = 0; step < tc.steps; ++step) {
    opt.zero_grad();
    const double lambda_g = guide_weight(step, tc.steps, lw.guide_horizon);
    LossRecord rec;
    rec.step = step;
    rec.lambda_g = lambda_g;
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      const auto window = sample_window(corpus, tc.seq_len, rng);
      auto l = router_objective(window, w, router, config, lw, lambda_g);
      rec.l_d += l.l_d.item() * inv_batch;
      rec.l_s += l.l_s.item() * inv_batch;
      rec.l_g += l.l_g.item() * inv_batch;
      rec.total += l.total.item() * inv_batch;
      if (l.total.requires_grad()) {
        backward(scale(l.total, inv_batch));
      } else {
        current_tape().clear();  // nothing routed, nothing to learn
      }
    }
    if (tc.clip_norm > 0.0) clip_grad_norm(params, tc.clip_norm);
    opt.step();
    res.trace.push_back(rec);
  }
  if (w.checksum() != before) throw InvariantError("train_router: model weights changed during router training");
  res.router = router.copy(false);
  return res;
}

inline void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> trace) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << "step,L_d,L_s,L_g,lambda_g,total\n";
  for (const auto& r : trace)
    out << r.step << ',' << r.l_d << ',' << r.l_s << ',' << r.l_g << ',' << r.lambda_g << ',' << r.total << '\n';
}

}  // namespace ftp
