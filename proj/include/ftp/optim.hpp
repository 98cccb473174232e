// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "ftp/tensor.hpp"

namespace ftp {

/// Adam with decoupled weight decay. Parameters are held by handle, so the
/// optimiser updates the caller's tensors in place.
class AdamW {
 public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW(std::vector<Tensor> params, Options opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      if (!p.requires_grad()) throw UsageError("AdamW: parameter does not require gradients");
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto w = params_[k].data();
      auto g = params_[k].grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= opts_.lr * (mhat / (std::sqrt(vhat) + opts_.eps) + opts_.weight_decay * w[i]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const Options& options() const { return opts_; }

 private:
  std::vector<Tensor> params_;
  Options opts_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

/// Rescales gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& p : params)
      for (auto& g : p.grad_mut()) g *= s;
  }
  return norm;
}

}  // namespace ftp
