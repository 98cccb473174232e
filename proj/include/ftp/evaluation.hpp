// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "ftp/corpus.hpp"
#include "ftp/routing.hpp"

namespace ftp {

struct EvalMetrics {
  double accuracy = 0.0;       // next-token argmax accuracy
  double cross_entropy = 0.0;  // mean nats per prediction
  std::size_t predictions = 0;
};

/// Next-token metrics of the routed model over every position of every
/// sequence. Inference mode; nothing is recorded on the tape.
inline EvalMetrics evaluate_routed(const ModelWeights& w, const Router& router, const SparsityConfig& config,
                                   const EvalSet& eval_set) {
  if (eval_set.empty()) throw ConfigError("empty evaluation set");
  NoGradGuard ng;
  EvalMetrics m;
  std::size_t correct = 0;
  double nll = 0.0;
  for (const auto& seq : eval_set.sequences) {
    if (seq.size() < 2) throw ConfigError("evaluation sequence shorter than 2 tokens");
    std::span<const TokenId> input(seq.data(), seq.size() - 1);
    std::span<const TokenId> target(seq.data() + 1, seq.size() - 1);
    auto out = routed_model_forward(input, w, router, config, RouteMode::Inference);
    const auto pred = argmax_rows(out.logits);
    nll += cross_entropy(out.logits, target).item() * static_cast<double>(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) correct += pred[i] == target[i];
    m.predictions += target.size();
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.predictions);
  m.cross_entropy = nll / static_cast<double>(m.predictions);
  return m;
}

inline EvalMetrics evaluate_dense(const ModelWeights& w, const EvalSet& eval_set) {
  return evaluate_routed(w, Router::static_router(), SparsityConfig::zeros(w.config.n_blocks), eval_set);
}

}  // namespace ftp
