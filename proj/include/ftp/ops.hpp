// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over ftp::Tensor. Everything is fp64 and
// evaluated in a fixed loop order, so results are bit-reproducible.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ftp/tensor.hpp"

namespace ftp {

/// Stand-in for -inf above the causal diagonal.
inline constexpr double kMaskValue = -1e30;

namespace kernels {

// C[m x n] (+)= op(A) * op(B), op(A) is m x k and op(B) is k x n.
inline void gemm(const double* a, bool trans_a, const double* b, bool trans_b,
                 double* c, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    // B stored n x k
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    // A stored k x m
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = a + p * m;
      const double* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = arow[i];
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
    }
  }
}

}  // namespace kernels

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (!t.defined() || t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + (t.defined() ? shape_str(t.shape()) : "undefined"));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

inline double* grad_of(TensorNode* n) { return n->requires_grad ? n->grad.data() : nullptr; }

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  kernels::gemm(a.values().data(), false, b.values().data(), false, out.data(), m, k, n, false);
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::make_result("matmul", {m, n}, std::move(out), {a.node(), b.node()},
                             [=](detail::TensorNode* o) {
                               return [=] {
                                 const double* g = o->grad.data();
                                 if (auto* ga = detail::grad_of(an)) {
                                   kernels::gemm(g, false, bn->values.data(), true, ga, m, n, k, true);
                                 }
                                 if (auto* gb = detail::grad_of(bn)) {
                                   kernels::gemm(an->values.data(), true, g, false, gb, k, m, n, true);
                                 }
                               };
                             });
}

/// a * b^T without materialising the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  kernels::gemm(a.values().data(), false, b.values().data(), true, out.data(), m, k, n, false);
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::make_result("matmul_nt", {m, n}, std::move(out), {a.node(), b.node()},
                             [=](detail::TensorNode* o) {
                               return [=] {
                                 const double* g = o->grad.data();
                                 if (auto* ga = detail::grad_of(an)) {
                                   kernels::gemm(g, false, bn->values.data(), false, ga, m, n, k, true);
                                 }
                                 if (auto* gb = detail::grad_of(bn)) {
                                   kernels::gemm(g, true, an->values.data(), false, gb, n, m, k, true);
                                 }
                               };
                             });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const auto m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto v = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  auto* an = a.node().get();
  return detail::make_result("transpose", {n, m}, std::move(out), {a.node()},
                             [=](detail::TensorNode* o) {
                               return [=] {
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j)
                                     an->grad[i * n + j] += o->grad[j * m + i];
                               };
                             });
}

namespace detail {

// Shared implementation for same-shape binary ops. `fwd(x, y)` gives the
// value, `dx(x, y)` and `dy(x, y)` the local partials.
template <typename F, typename DX, typename DY>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, F fwd, DX dx, DY dy) {
  require_same_shape(a, b, op);
  std::vector<double> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return make_result(op, a.shape(), std::move(out), {a.node(), b.node()}, [=](TensorNode* o) {
    return [=] {
      const auto n = o->grad.size();
      if (an->requires_grad)
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += o->grad[i] * dx(an->values[i], bn->values[i]);
      if (bn->requires_grad)
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += o->grad[i] * dy(an->values[i], bn->values[i]);
    };
  });
}

template <typename F, typename DF>
Tensor unary_elementwise(const char* op, const Tensor& a, F fwd, DF dfwd) {
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  auto* an = a.node().get();
  return make_result(op, a.shape(), std::move(out), {a.node()}, [=](TensorNode* o) {
    return [=] {
      for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i] * dfwd(an->values[i]);
    };
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_elementwise(
      "scale", a, [c](double x) { return c * x; }, [c](double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_elementwise(
      "add_scalar", a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

inline Tensor silu(const Tensor& a) {
  return detail::unary_elementwise(
      "silu", a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_elementwise(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

/// x[m x n] + bias[n] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank(x, 2, "add_bias");
  const auto m = x.dim(0), n = x.dim(1);
  if (bias.size() != n) throw DimensionError("add_bias: bias length does not match columns");
  std::vector<double> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  auto* xn = x.node().get();
  auto* bn = bias.node().get();
  return detail::make_result("add_bias", x.shape(), std::move(out), {x.node(), bias.node()},
                             [=](detail::TensorNode* o) {
                               return [=] {
                                 if (xn->requires_grad)
                                   for (std::size_t i = 0; i < m * n; ++i) xn->grad[i] += o->grad[i];
                                 if (bn->requires_grad)
                                   for (std::size_t i = 0; i < m; ++i)
                                     for (std::size_t j = 0; j < n; ++j) bn->grad[j] += o->grad[i * n + j];
                               };
                             });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto* an = a.node().get();
  return detail::make_result("sum", {1}, {s}, {a.node()}, [=](detail::TensorNode* o) {
    return [=] {
      for (auto& g : an->grad) g += o->grad[0];
    };
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Softmax along `axis`, with max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range");
  const auto& sh = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t len = sh[axis];
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, xv[base + t * inner]);
      double z = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double e = std::exp(xv[base + t * inner] - mx);
        out[base + t * inner] = e;
        z += e;
      }
      for (std::size_t t = 0; t < len; ++t) out[base + t * inner] /= z;
    }
  }
  auto* xn = x.node().get();
  return detail::make_result("softmax", sh, std::move(out), {x.node()}, [=](detail::TensorNode* o) {
    return [=] {
      for (std::size_t oo = 0; oo < outer; ++oo) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = oo * len * inner + in;
          double dot = 0.0;
          for (std::size_t t = 0; t < len; ++t) {
            const auto idx = base + t * inner;
            dot += o->grad[idx] * o->values[idx];
          }
          for (std::size_t t = 0; t < len; ++t) {
            const auto idx = base + t * inner;
            xn->grad[idx] += o->values[idx] * (o->grad[idx] - dot);
          }
        }
      }
    };
  });
}

/// Normalises each row over the last axis, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  detail::require_rank(x, 2, "layer_norm");
  const auto m = x.dim(0), n = x.dim(1);
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias length does not match last axis");
  }
  if (!(eps > 0.0)) throw UsageError("layer_norm: eps must be positive");
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  auto xv = x.values(), gv = gain.values(), bv = bias.values();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xv[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xv[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  auto* xn = x.node().get();
  auto* gn = gain.node().get();
  auto* bn = bias.node().get();
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::TensorNode* o) {
        return [=] {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            const double* g = o->grad.data() + i * n;
            const double* xh = xhat.data() + i * n;
            if (gn->requires_grad)
              for (std::size_t j = 0; j < n; ++j) gn->grad[j] += g[j] * xh[j];
            if (bn->requires_grad)
              for (std::size_t j = 0; j < n; ++j) bn->grad[j] += g[j];
            if (xn->requires_grad) {
              double sum_dy = 0.0, sum_dy_xh = 0.0;
              for (std::size_t j = 0; j < n; ++j) {
                const double dy = g[j] * gn->values[j];
                sum_dy += dy;
                sum_dy_xh += dy * xh[j];
              }
              for (std::size_t j = 0; j < n; ++j) {
                const double dy = g[j] * gn->values[j];
                xn->grad[i * n + j] += inv_std[i] * (dy - inv_n * sum_dy - xh[j] * inv_n * sum_dy_xh);
              }
            }
          }
        };
      });
}

/// Mean next-token cross entropy of logits[L x V] against integer targets.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  detail::require_rank(logits, 2, "cross_entropy");
  const auto m = logits.dim(0), v = logits.dim(1);
  if (targets.size() != m) throw DimensionError("cross_entropy: target count does not match rows");
  std::vector<double> probs(m * v);
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  auto lv = logits.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (tgt[i] >= v) throw InputError("cross_entropy: target id out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, lv[i * v + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(lv[i * v + j] - mx);
      z += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    loss += -(lv[i * v + tgt[i]] - mx - std::log(z));
  }
  loss /= static_cast<double>(m);
  auto* ln = logits.node().get();
  return detail::make_result(
      "cross_entropy", {1}, {loss}, {logits.node()},
      [=, probs = std::move(probs), tgt = std::move(tgt)](detail::TensorNode* o) {
        return [=] {
          const double s = o->grad[0] / static_cast<double>(m);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < v; ++j) ln->grad[i * v + j] += s * probs[i * v + j];
            ln->grad[i * v + tgt[i]] -= s;
          }
        };
      });
}

/// Mean squared error over all entries.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mse");
  auto av = a.values(), bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  const double n = static_cast<double>(av.size());
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::make_result("mse", {1}, {s / n}, {a.node(), b.node()}, [=](detail::TensorNode* o) {
    return [=] {
      const double c = 2.0 * o->grad[0] / n;
      for (std::size_t i = 0; i < an->values.size(); ++i) {
        const double d = an->values[i] - bn->values[i];
        if (an->requires_grad) an->grad[i] += c * d;
        if (bn->requires_grad) bn->grad[i] -= c * d;
      }
    };
  });
}

/// Mean binary cross entropy of probabilities `p` against 0/1 targets,
/// with p clamped to [eps, 1 - eps]. Clamped entries pass no gradient.
inline Tensor binary_cross_entropy(const Tensor& p, std::span<const double> targets, double eps = 1e-7) {
  if (targets.size() != p.size()) throw DimensionError("binary_cross_entropy: length mismatch");
  std::vector<double> t(targets.begin(), targets.end());
  auto pv = p.values();
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double q = std::clamp(pv[i], eps, 1.0 - eps);
    s += -(t[i] * std::log(q) + (1.0 - t[i]) * std::log(1.0 - q));
  }
  const double n = static_cast<double>(pv.size());
  auto* pn = p.node().get();
  return detail::make_result("binary_cross_entropy", {1}, {s / n}, {p.node()},
                             [=, t = std::move(t)](detail::TensorNode* o) {
                               return [=] {
                                 for (std::size_t i = 0; i < pn->values.size(); ++i) {
                                   const double q = pn->values[i];
                                   if (q < eps || q > 1.0 - eps) continue;
                                   pn->grad[i] += o->grad[0] / n * (-(t[i] / q) + (1.0 - t[i]) / (1.0 - q));
                                 }
                               };
                             });
}

/// Rows of table[V x d] selected by ids.
inline Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids) {
  detail::require_rank(table, 2, "embedding_lookup");
  const auto vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id list");
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  auto tv = table.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= vocab) throw InputError("embedding_lookup: id " + std::to_string(idx[r]) + " out of range");
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  auto* tn = table.node().get();
  const auto rows = idx.size();
  return detail::make_result("embedding_lookup", {rows, d}, std::move(out), {table.node()},
                             [=, idx = std::move(idx)](detail::TensorNode* o) {
                               return [=] {
                                 for (std::size_t r = 0; r < idx.size(); ++r)
                                   for (std::size_t j = 0; j < d; ++j) tn->grad[idx[r] * d + j] += o->grad[r * d + j];
                               };
                             });
}

/// Rows of x selected by `rows` (differentiable gather).
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  return embedding_lookup(x, rows);
}

/// Writes kMaskValue strictly above the diagonal of a square matrix.
inline Tensor causal_mask_fill(const Tensor& scores) {
  detail::require_rank(scores, 2, "causal_mask_fill");
  const auto m = scores.dim(0), n = scores.dim(1);
  if (m != n) throw DimensionError("causal_mask_fill: scores must be square");
  std::vector<double> out(scores.values().begin(), scores.values().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out[i * n + j] = kMaskValue;
  auto* sn = scores.node().get();
  return detail::make_result("causal_mask_fill", scores.shape(), std::move(out), {scores.node()},
                             [=](detail::TensorNode* o) {
                               return [=] {
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j <= i; ++j) sn->grad[i * n + j] += o->grad[i * n + j];
                               };
                             });
}

/// Columns [start, start + count) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  detail::require_rank(x, 2, "slice_cols");
  const auto m = x.dim(0), n = x.dim(1);
  if (count == 0 || start + count > n) throw DimensionError("slice_cols: range out of bounds");
  std::vector<double> out(m * count);
  auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = xv[i * n + start + j];
  auto* xn = x.node().get();
  return detail::make_result("slice_cols", {m, count}, std::move(out), {x.node()},
                             [=](detail::TensorNode* o) {
                               return [=] {
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < count; ++j)
                                     xn->grad[i * n + start + j] += o->grad[i * count + j];
                               };
                             });
}

/// Horizontal concatenation of equally tall matrices.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const auto m = parts[0].dim(0);
  std::size_t total = 0;
  std::vector<detail::NodePtr> inputs;
  std::vector<detail::TensorNode*> raw;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols: row count mismatch");
    total += p.dim(1);
    widths.push_back(p.dim(1));
    inputs.push_back(p.node());
    raw.push_back(p.node().get());
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto w = p.dim(1);
    auto pv = p.values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = pv[i * w + j];
    off += w;
  }
  return detail::make_result("concat_cols", {m, total}, std::move(out), std::move(inputs),
                             [=, raw = std::move(raw), widths = std::move(widths)](detail::TensorNode* o) {
                               return [=] {
                                 std::size_t off2 = 0;
                                 for (std::size_t p = 0; p < raw.size(); ++p) {
                                   const auto w = widths[p];
                                   if (raw[p]->requires_grad)
                                     for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t j = 0; j < w; ++j)
                                         raw[p]->grad[i * w + j] += o->grad[i * total + off2 + j];
                                   off2 += w;
                                 }
                               };
                             });
}

/// Column c of a matrix as a vector of length rows.
inline Tensor select_col(const Tensor& x, std::size_t c) {
  detail::require_rank(x, 2, "select_col");
  const auto m = x.dim(0), n = x.dim(1);
  if (c >= n) throw DimensionError("select_col: column out of range");
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = x.values()[i * n + c];
  auto* xn = x.node().get();
  return detail::make_result("select_col", {m}, std::move(out), {x.node()}, [=](detail::TensorNode* o) {
    return [=] {
      for (std::size_t i = 0; i < m; ++i) xn->grad[i * n + c] += o->grad[i];
    };
  });
}

/// Forward value `hard`, backward passes the incoming gradient to `soft`
/// unchanged (straight-through estimator).
inline Tensor straight_through(const Tensor& soft, std::vector<double> hard) {
  if (hard.size() != soft.size()) throw DimensionError("straight_through: length mismatch");
  auto* sn = soft.node().get();
  return detail::make_result("straight_through", soft.shape(), std::move(hard), {soft.node()},
                             [=](detail::TensorNode* o) {
                               return [=] {
                                 for (std::size_t i = 0; i < o->grad.size(); ++i) sn->grad[i] += o->grad[i];
                               };
                             });
}

/// Merges a block's output on a token subset back into the residual
/// stream: row rows[r] becomes x + gate[rows[r]] * (y_sel[r] - x). Rows not
/// in `rows` are copied from x. When the gate is exactly 1 the row is copied
/// from y_sel, so the forward value is bit-identical to a plain scatter.
/// A skipped row's gate gets gradient only when `y_skip` (L x d, treated as
/// a constant) supplies what the block would have produced there; without
/// it skipped rows carry no block output and their gate no gradient.
inline Tensor route_merge(const Tensor& x, const Tensor& y_sel, const Tensor& gate,
                          std::span<const std::size_t> rows, const Tensor& y_skip = Tensor{}) {
  detail::require_rank(x, 2, "route_merge");
  const auto L = x.dim(0), d = x.dim(1);
  if (gate.size() != L) throw DimensionError("route_merge: gate length does not match rows");
  if (y_skip.defined() && y_skip.shape() != x.shape()) throw DimensionError("route_merge: y_skip shape differs from x");
  if (!rows.empty()) {
    detail::require_rank(y_sel, 2, "route_merge");
    if (y_sel.dim(0) != rows.size() || y_sel.dim(1) != d) {
      throw DimensionError("route_merge: selected block output has wrong shape");
    }
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(x.values().begin(), x.values().end());
  auto gv = gate.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto row = idx[r];
    const double g = gv[row];
    for (std::size_t j = 0; j < d; ++j) {
      const double xv = x.values()[row * d + j];
      const double yv = y_sel.values()[r * d + j];
      out[row * d + j] = (g == 1.0) ? yv : (g == 0.0 ? xv : xv + g * (yv - xv));
    }
  }
  std::vector<detail::NodePtr> inputs{x.node(), gate.node()};
  detail::TensorNode* yn = nullptr;
  if (!idx.empty()) {
    inputs.push_back(y_sel.node());
    yn = y_sel.node().get();
  }
  auto* xn = x.node().get();
  auto* gn = gate.node().get();
  std::vector<double> skip_out;
  if (y_skip.defined()) skip_out.assign(y_skip.values().begin(), y_skip.values().end());
  return detail::make_result("route_merge", x.shape(), std::move(out), std::move(inputs),
                             [=, idx = std::move(idx), skip_out = std::move(skip_out)](detail::TensorNode* o) {
                               return [=] {
                                 std::vector<char> selected(L, 0);
                                 for (auto row : idx) selected[row] = 1;
                                 if (xn->requires_grad) {
                                   for (std::size_t i = 0; i < L; ++i) {
                                     const double w = selected[i] ? 1.0 - gn->values[i] : 1.0;
                                     for (std::size_t j = 0; j < d; ++j) xn->grad[i * d + j] += w * o->grad[i * d + j];
                                   }
                                 }
                                 for (std::size_t r = 0; r < idx.size(); ++r) {
                                   const auto row = idx[r];
                                   const double g = gn->values[row];
                                   double dg = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                     const double go = o->grad[row * d + j];
                                     if (yn->requires_grad) yn->grad[r * d + j] += g * go;
                                     dg += go * (yn->values[r * d + j] - xn->values[row * d + j]);
                                   }
                                   if (gn->requires_grad) gn->grad[row] += dg;
                                 }
                                 if (!skip_out.empty() && gn->requires_grad) {
                                   for (std::size_t i = 0; i < L; ++i) {
                                     if (selected[i]) continue;
                                     double dg = 0.0;
                                     for (std::size_t j = 0; j < d; ++j)
                                       dg += o->grad[i * d + j] * (skip_out[i * d + j] - xn->values[i * d + j]);
                                     gn->grad[i] += dg;
                                   }
                                 }
                               };
                             });
}

}  // namespace ftp
