// SPDX-License-Identifier: Apache-2.0
//
// Scalar-loop reference implementations used as test oracles. They share
// no code with the tensor engine.
#pragma once

#include <cmath>
#include <vector>

namespace ftp::testing {

using Mat = std::vector<std::vector<double>>;

inline Mat ref_matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t p = 0; p < b.size(); ++p) c[i][j] += a[i][p] * b[p][j];
  return c;
}

inline Mat ref_layer_norm(const Mat& x, const std::vector<double>& g, const std::vector<double>& b, double eps) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mu = 0.0;
    for (double v : x[i]) mu += v;
    mu /= n;
    double var = 0.0;
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= n;
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mu) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return y;
}

/// Causal attention computed one output element at a time.
inline Mat ref_attention(const Mat& q, const Mat& k, const Mat& v) {
  const std::size_t L = q.size(), dk = q[0].size(), dv = v[0].size();
  Mat out(L, std::vector<double>(dv, 0.0));
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<double> s(i + 1);
    double mx = -1e300;
    for (std::size_t j = 0; j <= i; ++j) {
      double dot = 0.0;
      for (std::size_t t = 0; t < dk; ++t) dot += q[i][t] * k[j][t];
      s[j] = dot / std::sqrt(static_cast<double>(dk));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (auto& e : s) {
      e = std::exp(e - mx);
      z += e;
    }
    for (std::size_t c = 0; c < dv; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j <= i; ++j) acc += s[j] / z * v[j][c];
      out[i][c] = acc;
    }
  }
  return out;
}

inline Mat ref_cols(const Mat& m, std::size_t start, std::size_t count) {
  Mat out(m.size(), std::vector<double>(count));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < count; ++j) out[i][j] = m[i][start + j];
  return out;
}

struct RefBlock {
  Mat wq, wk, wv, wo, w1, w2;
  std::vector<double> g1, b1, g2, b2;
};

/// Pre-norm block: X' = MHA(LN(X)) + X ; Y = FFN(LN(X')) + X'.
inline Mat ref_block(const Mat& x, const RefBlock& w, std::size_t n_heads, double eps = 1e-5) {
  const std::size_t L = x.size(), d = x[0].size(), dh = d / n_heads;
  auto h = ref_layer_norm(x, w.g1, w.b1, eps);
  auto q = ref_matmul(h, w.wq), k = ref_matmul(h, w.wk), v = ref_matmul(h, w.wv);
  Mat attn(L, std::vector<double>(d, 0.0));
  for (std::size_t hd = 0; hd < n_heads; ++hd) {
    auto o = ref_attention(ref_cols(q, hd * dh, dh), ref_cols(k, hd * dh, dh), ref_cols(v, hd * dh, dh));
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < dh; ++j) attn[i][hd * dh + j] = o[i][j];
  }
  auto proj = ref_matmul(attn, w.wo);
  Mat x1 = x;
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < d; ++j) x1[i][j] += proj[i][j];
  auto f = ref_matmul(ref_layer_norm(x1, w.g2, w.b2, eps), w.w1);
  for (auto& row : f)
    for (auto& e : row) e = e / (1.0 + std::exp(-e));
  auto f2 = ref_matmul(f, w.w2);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < d; ++j) x1[i][j] += f2[i][j];
  return x1;
}

}  // namespace ftp::testing
