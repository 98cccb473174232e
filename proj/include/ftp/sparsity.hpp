// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "ftp/errors.hpp"

namespace ftp {

/// Per-block skip ratios. `target` is the overall sparsity P, read as the
/// mean ratio over all blocks.
struct SparsityConfig {
  double target = 0.0;
  std::vector<double> ratios;

  std::size_t n_blocks() const { return ratios.size(); }

  double mean() const {
    if (ratios.empty()) return 0.0;
    return std::accumulate(ratios.begin(), ratios.end(), 0.0) / static_cast<double>(ratios.size());
  }

  static SparsityConfig zeros(std::size_t n_blocks) { return {0.0, std::vector<double>(n_blocks, 0.0)}; }

  /// Same ratio on every block.
  static SparsityConfig uniform(std::size_t n_blocks, double p) {
    return {p, std::vector<double>(n_blocks, p)};
  }

  /// Equal ratios on the schedulable blocks 1 .. n-2, first and last at 0,
  /// keeping the overall mean at p.
  static SparsityConfig uniform_schedulable(std::size_t n_blocks, double p) {
    if (n_blocks < 3) {
      if (p == 0.0) return zeros(n_blocks);
      throw ConfigError("uniform_schedulable: need at least 3 blocks for non-zero sparsity");
    }
    SparsityConfig c = zeros(n_blocks);
    c.target = p;
    const double each = p * static_cast<double>(n_blocks) / static_cast<double>(n_blocks - 2);
    for (std::size_t i = 1; i + 1 < n_blocks; ++i) c.ratios[i] = each;
    return c;
  }

  bool operator==(const SparsityConfig&) const = default;
};

/// Number of tokens skipped at ratio s over L tokens: round-half-up of s*L.
inline std::size_t skip_count(std::size_t L, double s) {
  if (s <= 0.0) return 0;
  const auto k = static_cast<std::size_t>(std::floor(s * static_cast<double>(L) + 0.5));
  return k > L ? L : k;
}

}  // namespace ftp
