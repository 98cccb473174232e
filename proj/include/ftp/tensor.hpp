// SPDX-License-Identifier: Apache-2.0
//
// Dense fp64 tensors with a thread-local reverse-mode tape.
//
// A Tensor is a cheap handle onto shared storage. Operations whose inputs
// require gradients append an entry to the calling thread's tape; backward()
// walks that tape in reverse and accumulates into every reachable leaf.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ftp/errors.hpp"

namespace ftp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized iff requires_grad
  bool requires_grad = false;
  bool leaf = true;
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode>()) {
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
    }
    if (shape_size(shape) != values.size()) {
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->values.size(); }

  std::span<const double> values() const { return node_->values; }
  /// Mutable access for initialisers and optimisers. Never call while the
  /// tensor is referenced by a live tape entry.
  std::span<double> data() { return node_->values; }

  double item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->values[0];
  }
  double operator[](std::size_t i) const { return node_->values[i]; }
  double at(std::size_t i, std::size_t j) const {
    return node_->values[i * node_->shape[1] + j];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }

  void set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (flag) {
      node_->grad.assign(node_->values.size(), 0.0);
    } else {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }

  std::span<const double> grad() const {
    if (!node_->requires_grad) throw UsageError("tensor has no gradient record");
    return node_->grad;
  }
  std::span<double> grad_mut() {
    if (!node_->requires_grad) throw UsageError("tensor has no gradient record");
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  /// Deep copy of the values, outside any tape.
  Tensor detach() const { return Tensor(shape(), node_->values, false); }
  /// Deep copy preserving values, as a fresh leaf.
  Tensor clone(bool requires_grad) const { return Tensor(shape(), node_->values, requires_grad); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

/// One recorded operation. The backward rule reads output->grad and
/// accumulates into the inputs that require gradients.
struct TapeEntry {
  std::vector<detail::NodePtr> inputs;
  detail::NodePtr output;
  std::function<void()> backward;
};

class ComputationTape {
 public:
  void record(TapeEntry entry) { entries_.push_back(std::move(entry)); }
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }

  /// Index of the entry producing `node`, or npos.
  std::size_t find_producer(const detail::TensorNode* node) const {
    for (std::size_t i = entries_.size(); i-- > 0;) {
      if (entries_[i].output.get() == node) return i;
    }
    return npos;
  }

  void run_backward_from(std::size_t last) {
    for (std::size_t i = last + 1; i-- > 0;) entries_[i].backward();
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  std::vector<TapeEntry> entries_;
  bool enabled_ = true;
};

inline ComputationTape& current_tape() {
  thread_local ComputationTape tape;
  return tape;
}

/// Suspends recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(current_tape().enabled()) { current_tape().set_enabled(false); }
  ~NoGradGuard() { current_tape().set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

inline void check_finite(const std::vector<double>& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw InvariantError(std::string("non-finite value produced by ") + op);
    }
  }
}

/// Wraps freshly computed values as the output of `op`. When any input
/// requires gradients (and recording is on) the output gets a grad buffer
/// and `make_backward(out)` is recorded.
template <typename MakeBackward>
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<NodePtr> inputs, MakeBackward&& make_backward) {
  check_finite(values, op);
  auto out = std::make_shared<TensorNode>();
  out->shape = std::move(shape);
  out->values = std::move(values);
  bool needs = false;
  if (current_tape().enabled()) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    out->requires_grad = true;
    out->leaf = false;
    out->grad.assign(out->values.size(), 0.0);
    TapeEntry entry;
    entry.backward = make_backward(out.get());
    entry.inputs = std::move(inputs);
    entry.output = out;
    current_tape().record(std::move(entry));
  }
  return Tensor(out);
}

}  // namespace detail

/// Reverse pass from a scalar loss. Leaf gradients accumulate; the calling
/// thread's tape is cleared afterwards.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw UsageError("backward() requires a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw UsageError("backward() on a tensor that does not require gradients");
  }
  auto& tape = current_tape();
  auto* node = loss.node().get();
  if (node->leaf) {
    node->grad[0] += 1.0;
    tape.clear();
    return;
  }
  auto idx = tape.find_producer(node);
  if (idx == ComputationTape::npos) {
    throw UsageError("backward() on a loss that is not on the current tape");
  }
  node->grad[0] += 1.0;
  tape.run_backward_from(idx);
  tape.clear();
}

}  // namespace ftp
