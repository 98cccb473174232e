// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

#include "ftp/model.hpp"

namespace ftp {

/// Floating-point operations (2 per multiply-accumulate) of one block over
/// `active` tokens:
///   attention   2 * active^2 * d       (Q K^T and P V, full square)
///   projections 4 * active * d^2       (Q, K, V, O)
///   FFN         2 * active * d * d_ff  (up and down)
/// Norms, softmax and activations are ignored.
inline double flops_per_block(std::size_t active, std::size_t d, std::size_t d_ff) {
  const double l = static_cast<double>(active);
  const double dd = static_cast<double>(d);
  const double macs = 2.0 * l * l * dd + 4.0 * l * dd * dd + 2.0 * l * dd * static_cast<double>(d_ff);
  return 2.0 * macs;
}

/// Sum of block FLOPs for per-block active token counts.
inline double model_block_flops(const ModelConfig& cfg, std::span<const std::size_t> active_counts) {
  double total = 0.0;
  for (auto a : active_counts) total += flops_per_block(a, cfg.d_model, cfg.d_ff);
  return total;
}

}  // namespace ftp
