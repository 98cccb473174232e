// SPDX-License-Identifier: Apache-2.0
//
// Token streams: a seeded synthetic generator, little-endian u16 token
// files, and helpers that cut streams into fixed-length sequences.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ftp/model.hpp"

namespace ftp {

/// Second-order Markov source with long-range copies.
///
/// Each symbol a has four successor candidates. The next symbol is the
/// candidate selected by (previous-but-one symbol mod 4) with probability
/// `follow_prob`, otherwise a uniformly random candidate; predicting it well
/// needs the previous two tokens. With probability `copy_prob` a marker
/// symbol (vocab_size - 1) is emitted and followed by a verbatim copy of
/// `copy_len` tokens from within the last `copy_window` positions.
struct SyntheticCorpusOptions {
  std::size_t vocab_size = 256;
  std::size_t n_tokens = 200000;
  std::uint64_t seed = 1234;
  double follow_prob = 0.75;
  double copy_prob = 0.02;
  std::size_t copy_len = 8;
  std::size_t copy_window = 48;
};

inline std::vector<TokenId> generate_synthetic_corpus(const SyntheticCorpusOptions& opt) {
  if (opt.vocab_size < 8) throw ConfigError("synthetic corpus needs vocab_size >= 8");
  if (opt.copy_window < opt.copy_len + 1) throw ConfigError("copy_window must exceed copy_len");
  const std::size_t symbols = opt.vocab_size - 1;
  const TokenId marker = opt.vocab_size - 1;
  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<std::size_t> any_symbol(0, symbols - 1);
  std::vector<std::array<TokenId, 4>> successors(symbols);
  for (auto& s : successors)
    for (auto& c : s) c = any_symbol(rng);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> any4(0, 3);
  std::vector<TokenId> out;
  out.reserve(opt.n_tokens);
  TokenId prev2 = any_symbol(rng), prev1 = any_symbol(rng);
  out.push_back(prev2);
  out.push_back(prev1);
  while (out.size() < opt.n_tokens) {
    if (out.size() > opt.copy_window && unit(rng) < opt.copy_prob) {
      std::uniform_int_distribution<std::size_t> start_dist(out.size() - opt.copy_window,
                                                            out.size() - opt.copy_len - 1);
      const auto start = start_dist(rng);
      out.push_back(marker);
      for (std::size_t i = 0; i < opt.copy_len && out.size() < opt.n_tokens; ++i) {
        out.push_back(out[start + i] == marker ? any_symbol(rng) : out[start + i]);
      }
      prev2 = out[out.size() - 2] == marker ? 0 : out[out.size() - 2];
      prev1 = out.back() == marker ? 0 : out.back();
      continue;
    }
    const int pick = unit(rng) < opt.follow_prob ? static_cast<int>(prev2 % 4) : any4(rng);
    const TokenId next = successors[prev1][static_cast<std::size_t>(pick)];
    out.push_back(next);
    prev2 = prev1;
    prev1 = next;
  }
  out.resize(opt.n_tokens);
  return out;
}

/// Reads a stream of little-endian u16 tokens.
inline std::vector<TokenId> read_token_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open token file " + path.string());
  std::vector<TokenId> out;
  unsigned char pair[2];
  while (in.read(reinterpret_cast<char*>(pair), 2)) out.push_back(static_cast<TokenId>(pair[0] | (pair[1] << 8)));
  if (in.gcount() != 0) throw IoError("token file has odd byte count: " + path.string());
  return out;
}

inline void write_token_file(const std::filesystem::path& path, std::span<const TokenId> tokens) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write token file " + path.string());
  for (auto t : tokens) {
    if (t > 0xFFFF) throw InputError("token id does not fit in u16");
    const unsigned char pair[2] = {static_cast<unsigned char>(t & 0xFF), static_cast<unsigned char>(t >> 8)};
    out.write(reinterpret_cast<const char*>(pair), 2);
  }
}

struct CorpusSplits {
  std::vector<TokenId> train;
  std::vector<TokenId> validation;  // sparsity search
  std::vector<TokenId> test;        // reported metrics
};

/// Contiguous split: first `train_frac`, then `validation_frac`, remainder test.
inline CorpusSplits split_corpus(std::span<const TokenId> stream, double train_frac = 0.8,
                                 double validation_frac = 0.1) {
  const auto n = stream.size();
  const auto a = static_cast<std::size_t>(static_cast<double>(n) * train_frac);
  const auto b = a + static_cast<std::size_t>(static_cast<double>(n) * validation_frac);
  CorpusSplits s;
  s.train.assign(stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(a));
  s.validation.assign(stream.begin() + static_cast<std::ptrdiff_t>(a), stream.begin() + static_cast<std::ptrdiff_t>(b));
  s.test.assign(stream.begin() + static_cast<std::ptrdiff_t>(b), stream.end());
  return s;
}

/// Sequences of seq_len + 1 tokens: inputs are the first seq_len, targets
/// the last seq_len.
struct EvalSet {
  std::vector<std::vector<TokenId>> sequences;
  bool empty() const { return sequences.empty(); }
  std::size_t size() const { return sequences.size(); }
};

/// Consecutive non-overlapping windows from the start of the stream.
inline EvalSet make_eval_set(std::span<const TokenId> stream, std::size_t n_sequences, std::size_t seq_len) {
  EvalSet set;
  const std::size_t w = seq_len + 1;
  for (std::size_t i = 0; i < n_sequences && (i + 1) * w <= stream.size(); ++i) {
    set.sequences.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(i * w),
                               stream.begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
  }
  return set;
}

/// Random window of `len` tokens.
inline std::vector<TokenId> sample_window(std::span<const TokenId> stream, std::size_t len, std::mt19937_64& rng) {
  if (stream.size() < len) throw ConfigError("corpus shorter than requested window");
  std::uniform_int_distribution<std::size_t> start(0, stream.size() - len);
  const auto s = start(rng);
  return {stream.begin() + static_cast<std::ptrdiff_t>(s), stream.begin() + static_cast<std::ptrdiff_t>(s + len)};
}

}  // namespace ftp
