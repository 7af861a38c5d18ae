/*
 * Copyright 2026 The maskfew Authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a graph node. Operations on tensors that
// require gradients record their inputs and a backward closure; backward()
// linearizes the reachable graph into a Tape and replays it in reverse.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "maskfew/errors.hpp"

namespace maskfew {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::shared_ptr<std::vector<double>> value;
  std::vector<double> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::span<double> grad_buffer() {
    if (!has_grad) {
      grad.assign(value->size(), 0.0);
      has_grad = true;
    }
    return grad;
  }
  std::span<const double> values() const { return *value; }
};

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Whether operations on the current thread record a graph.
inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + shape_string(shape) + " cannot hold " +
                           std::to_string(values.size()) + " values");
    }
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("zero extent in shape " + shape_string(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::make_shared<std::vector<double>>(std::move(values));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double fill, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, fill), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  template <class Rng>
  static Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = dist(rng);
    return from(std::move(shape), std::move(values), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value->size(); }

  std::span<const double> values() const { return *node_->value; }
  /// Writable view of the underlying storage (shared with detached aliases).
  std::span<double> mutable_values() const { return *node_->value; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return (*node_->value)[0];
  }
  double operator[](std::size_t i) const { return (*node_->value)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*node_->value)[r * dim(1) + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) const { node_->requires_grad = flag; }
  bool has_grad() const { return node_->has_grad; }
  std::span<const double> grad() const {
    if (!node_->has_grad) throw ContractError("tensor has no gradient");
    return node_->grad;
  }
  void zero_grad() const {
    node_->grad.clear();
    node_->has_grad = false;
  }

  /// New leaf that aliases this tensor's storage and records nothing.
  Tensor detach() const {
    auto node = std::make_shared<detail::Node>();
    node->shape = node_->shape;
    node->value = node_->value;
    return Tensor(std::move(node));
  }

  /// New leaf owning a copy of the values.
  Tensor clone() const {
    return from(node_->shape, *node_->value, node_->requires_grad);
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

inline void zero_grads(std::span<const Tensor> tensors) {
  for (const Tensor& t : tensors) t.zero_grad();
}

/// Ordered record of the graph behind a scalar, parents before children.
class Tape {
 public:
  Tape() = default;

  explicit Tape(const Tensor& root) {
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS; nodes that do not require grad are pruned.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    if (root.requires_grad()) stack.emplace_back(root.node().get(), 0);
    if (!stack.empty()) seen.insert(stack.back().first);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* parent = node->parents[next++].get();
        if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        nodes_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  /// Seeds the last node (the root) with d/d(root) = 1 and runs backward closures in reverse.
  void replay() {
    if (nodes_.empty()) return;
    for (detail::Node* node : nodes_) {
      if (!node->parents.empty()) {
        node->grad.assign(node->value->size(), 0.0);
        node->has_grad = true;
      } else {
        node->grad_buffer();
      }
    }
    detail::Node* root = nodes_.back();
    root->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
  }

  std::span<detail::Node* const> nodes() const { return nodes_; }

 private:
  std::vector<detail::Node*> nodes_;
};

/// Populates gradients of every requires_grad tensor reachable from a scalar loss.
/// Leaf gradients accumulate across calls until zero_grads().
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("backward on a loss with no recorded graph");
  Tape tape(loss);
  tape.replay();
}

namespace detail {

using BackwardFn = std::function<void(Node&)>;

inline Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
                          BackwardFn fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (!any) return out;
  Node& node = *out.node();
  node.requires_grad = true;
  for (const Tensor* t : inputs) node.parents.push_back(t->node());
  node.backward_fn = std::move(fn);
  return out;
}

inline Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                          BackwardFn fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  Node& node = *out.node();
  node.requires_grad = true;
  for (const Tensor& t : inputs) node.parents.push_back(t.node());
  node.backward_fn = std::move(fn);
  return out;
}

/// Gradient sink of parent `i`, or an empty span when it does not need one.
inline std::span<double> parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return {};
  return p.grad_buffer();
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
  }
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

enum class Broadcast { same, rows };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) return Broadcast::rows;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return detail::make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
    const auto g = std::span<const double>(self.grad);
    const auto av = self.parents[0]->values();
    const auto bv = self.parents[1]->values();
    if (auto ga = detail::parent_grad(self, 0); !ga.empty()) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (auto gb = detail::parent_grad(self, 1); !gb.empty()) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double s = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += s * g[i * n + j];
        }
      }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return detail::make_result({c, r}, std::move(out), {&a}, [r, c](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return detail::make_result(std::move(shape), std::move(out), {&a}, [](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, where b may also be a vector broadcast over the rows of a.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto kind = detail::broadcast_kind(a, b, "add");
  const std::size_t n = a.numel(), width = b.numel();
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] += bv[kind == detail::Broadcast::same ? i : i % width];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [n, width, kind](detail::Node& self) {
    if (auto ga = detail::parent_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    if (auto gb = detail::parent_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < n; ++i) gb[kind == detail::Broadcast::same ? i : i % width] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  const auto kind = detail::broadcast_kind(a, b, "sub");
  const std::size_t n = a.numel(), width = b.numel();
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] -= bv[kind == detail::Broadcast::same ? i : i % width];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [n, width, kind](detail::Node& self) {
    if (auto ga = detail::parent_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    if (auto gb = detail::parent_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < n; ++i) gb[kind == detail::Broadcast::same ? i : i % width] -= self.grad[i];
  });
}

/// Hadamard product, with the same broadcasting rule as add().
inline Tensor mul(const Tensor& a, const Tensor& b) {
  const auto kind = detail::broadcast_kind(a, b, "mul");
  const std::size_t n = a.numel(), width = b.numel();
  std::vector<double> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[kind == detail::Broadcast::same ? i : i % width];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [n, width, kind](detail::Node& self) {
    const auto av = self.parents[0]->values();
    const auto bv = self.parents[1]->values();
    if (auto ga = detail::parent_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * bv[kind == detail::Broadcast::same ? i : i % width];
    if (auto gb = detail::parent_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < n; ++i) gb[kind == detail::Broadcast::same ? i : i % width] += self.grad[i] * av[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= s;
  return detail::make_result(a.shape(), std::move(out), {&a}, [s](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * self.grad[i];
  });
}

/// Exact GELU: x * Phi(x) with the Gaussian CDF written through erf.
inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] / std::sqrt(2.0)));
  return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    const auto av = self.parents[0]->values();
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double x = av[i];
      const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      ga[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * (*self.value)[i];
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(av[i] > 0.0)) throw NumericError("log of non-positive value");
    out[i] = std::log(av[i]);
  }
  return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    const auto av = self.parents[0]->values();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] / av[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  const auto av = a.values();
  const double total = std::accumulate(av.begin(), av.end(), 0.0);
  return detail::make_result({}, {total}, {&a}, [](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    for (double& g : ga) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  const auto av = a.values();
  const double n = static_cast<double>(a.numel());
  const double total = std::accumulate(av.begin(), av.end(), 0.0) / n;
  return detail::make_result({}, {total}, {&a}, [n](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    for (double& g : ga) g += self.grad[0] / n;
  });
}

/// Sum of a weighted by constant, non-differentiable weights.
inline Tensor weighted_sum(const Tensor& a, std::vector<double> weights) {
  if (weights.size() != a.numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                         shape_string(a.shape()));
  }
  const auto av = a.values();
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += weights[i] * av[i];
  return detail::make_result({}, {total}, {&a}, [w = std::move(weights)](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < w.size(); ++i) ga[i] += w[i] * self.grad[0];
  });
}

/// Single element by flat index, as a scalar.
inline Tensor element(const Tensor& a, std::size_t index) {
  if (index >= a.numel()) {
    throw DimensionError("element: index " + std::to_string(index) + " outside " + shape_string(a.shape()));
  }
  return detail::make_result({}, {a[index]}, {&a}, [index](detail::Node& self) {
    detail::parent_grad(self, 0)[index] += self.grad[0];
  });
}

/// out[r] = a[r, index[r]] for a rank-2 tensor.
inline Tensor pick(const Tensor& a, std::span<const std::size_t> index) {
  detail::require_rank(a, 2, "pick");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (index.size() != rows) throw DimensionError("pick: index count does not match rows of " + shape_string(a.shape()));
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] >= cols) throw DimensionError("pick: column " + std::to_string(idx[r]) + " outside " + shape_string(a.shape()));
    out[r] = a[r * cols + idx[r]];
  }
  return detail::make_result({rows}, std::move(out), {&a}, [idx = std::move(idx), cols](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t r = 0; r < idx.size(); ++r) ga[r * cols + idx[r]] += self.grad[r];
  });
}

// ---------------------------------------------------------------------------
// Structural

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  detail::require_rank(a, 2, "slice");
  if (axis > 1 || length == 0 || start + length > a.dim(axis)) {
    throw DimensionError("slice: [" + std::to_string(start) + ", +" + std::to_string(length) + ") on axis " +
                         std::to_string(axis) + " of " + shape_string(a.shape()));
  }
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const std::size_t out_rows = axis == 0 ? length : rows;
  const std::size_t out_cols = axis == 0 ? cols : length;
  const std::size_t r0 = axis == 0 ? start : 0, c0 = axis == 0 ? 0 : start;
  std::vector<double> out(out_rows * out_cols);
  const auto av = a.values();
  for (std::size_t r = 0; r < out_rows; ++r)
    std::copy_n(av.data() + (r + r0) * cols + c0, out_cols, out.data() + r * out_cols);
  return detail::make_result({out_rows, out_cols}, std::move(out), {&a},
                             [=](detail::Node& self) {
                               auto ga = detail::parent_grad(self, 0);
                               for (std::size_t r = 0; r < out_rows; ++r)
                                 for (std::size_t c = 0; c < out_cols; ++c)
                                   ga[(r + r0) * cols + c0 + c] += self.grad[r * out_cols + c];
                             });
}

/// Row i of a rank-2 tensor as a rank-1 tensor.
inline Tensor row(const Tensor& a, std::size_t i) {
  detail::require_rank(a, 2, "row");
  if (i >= a.dim(0)) throw DimensionError("row " + std::to_string(i) + " outside " + shape_string(a.shape()));
  const std::size_t cols = a.dim(1);
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(i * cols),
                          a.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * cols));
  return detail::make_result({cols}, std::move(out), {&a}, [i, cols](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t c = 0; c < cols; ++c) ga[i * cols + c] += self.grad[c];
  });
}

/// Concatenates rank-2 tensors along axis 0 (rows) or 1 (columns).
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  if (axis > 1) throw DimensionError("concat: axis must be 0 or 1");
  for (const Tensor& p : parts) detail::require_rank(p, 2, "concat");
  const std::size_t fixed = parts[0].dim(1 - axis);
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    if (p.dim(1 - axis) != fixed) {
      throw DimensionError("concat: " + shape_string(p.shape()) + " does not match " + shape_string(parts[0].shape()));
    }
    offsets.push_back(total);
    total += p.dim(axis);
  }
  const std::size_t rows = axis == 0 ? total : fixed;
  const std::size_t cols = axis == 0 ? fixed : total;
  std::vector<double> out(rows * cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].values();
    const std::size_t pr = parts[k].dim(0), pc = parts[k].dim(1);
    for (std::size_t r = 0; r < pr; ++r)
      for (std::size_t c = 0; c < pc; ++c)
        out[(axis == 0 ? (r + offsets[k]) * cols + c : r * cols + c + offsets[k])] = pv[r * pc + c];
  }
  return detail::make_result({rows, cols}, std::move(out), parts, [offsets, axis, cols](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto gp = detail::parent_grad(self, k);
      if (gp.empty()) continue;
      const std::size_t pr = self.parents[k]->shape[0], pc = self.parents[k]->shape[1];
      for (std::size_t r = 0; r < pr; ++r)
        for (std::size_t c = 0; c < pc; ++c)
          gp[r * pc + c] += self.grad[axis == 0 ? (r + offsets[k]) * cols + c : r * cols + c + offsets[k]];
    }
  });
}

/// Stacks equal-length rank-1 tensors into the rows of a matrix.
inline Tensor stack(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DimensionError("stack of zero tensors");
  const std::size_t width = rows[0].numel();
  std::vector<double> out;
  out.reserve(rows.size() * width);
  for (const Tensor& r : rows) {
    detail::require_rank(r, 1, "stack");
    if (r.numel() != width) throw DimensionError("stack: ragged rows");
    out.insert(out.end(), r.values().begin(), r.values().end());
  }
  return detail::make_result({rows.size(), width}, std::move(out), rows, [width](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto gp = detail::parent_grad(self, k);
      for (std::size_t c = 0; c < gp.size(); ++c) gp[c] += self.grad[k * width + c];
    }
  });
}

/// Gathers rows of an embedding table.
inline Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids) {
  detail::require_rank(table, 2, "embedding_lookup");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id list");
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
    }
    rows.push_back(static_cast<std::size_t>(id));
  }
  std::vector<double> out(rows.size() * width);
  const auto tv = table.values();
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(tv.data() + rows[r] * width, width, out.data() + r * width);
  const std::size_t n = rows.size();
  return detail::make_result({n, width}, std::move(out), {&table},
                             [rows = std::move(rows), width](detail::Node& self) {
                               auto gt = detail::parent_grad(self, 0);
                               for (std::size_t r = 0; r < rows.size(); ++r)
                                 for (std::size_t c = 0; c < width; ++c) gt[rows[r] * width + c] += self.grad[r * width + c];
                             });
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each slice along the last axis, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps) {
  if (x.rank() == 0) throw DimensionError("layer_norm on a scalar");
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d || bias.dim(0) != d) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " + shape_string(bias.shape()) +
                         " do not match " + shape_string(x.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(rows);
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (xr[c] - mu) * inv_std[r];
      out[r * d + c] = gv[c] * xhat[r * d + c] + bv[c];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto gv = self.parents[1]->values();
        auto gx = detail::parent_grad(self, 0);
        auto gg = detail::parent_grad(self, 1);
        auto gb = detail::parent_grad(self, 2);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * d;
          const double* xh = xhat.data() + r * d;
          if (!gg.empty())
            for (std::size_t c = 0; c < d; ++c) gg[c] += dy[c] * xh[c];
          if (!gb.empty())
            for (std::size_t c = 0; c < d; ++c) gb[c] += dy[c];
          if (gx.empty()) continue;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            dxhat[c] = dy[c] * gv[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += inv_std[r] * (dxhat[c] - m1 - xh[c] * m2);
        }
      });
}

namespace detail {

// Backward of a softmax over slices described by `split`; y is the forward output.
inline void softmax_backward(std::span<const double> y, std::span<const double> dy, std::span<double> dx,
                             const AxisSplit& s) {
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      double dot = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const std::size_t idx = (o * s.extent + j) * s.inner + in;
        dot += y[idx] * dy[idx];
      }
      for (std::size_t j = 0; j < s.extent; ++j) {
        const std::size_t idx = (o * s.extent + j) * s.inner + in;
        dx[idx] += y[idx] * (dy[idx] - dot);
      }
    }
  }
}

}  // namespace detail

/// Max-stabilized softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_string(x.shape()));
  }
  const auto s = detail::split_axis(x.shape(), axis);
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, xv[(o * s.extent + j) * s.inner + in]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const std::size_t idx = (o * s.extent + j) * s.inner + in;
        out[idx] = std::exp(xv[idx] - mx);
        z += out[idx];
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[(o * s.extent + j) * s.inner + in] /= z;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {&x}, [s](detail::Node& self) {
    detail::softmax_backward(*self.value, self.grad, detail::parent_grad(self, 0), s);
  });
}

/// Softmax along the last axis in which columns with keep[c] == 0 receive
/// exactly zero weight and no gradient.
inline Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep) {
  if (x.rank() == 0 || keep.size() != x.shape().back()) {
    throw DimensionError("masked_softmax: mask of length " + std::to_string(keep.size()) + " for " +
                         shape_string(x.shape()));
  }
  const std::size_t d = keep.size();
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel(), 0.0);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < d; ++c)
      if (keep[c]) mx = std::max(mx, xv[r * d + c]);
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      if (!keep[c]) continue;
      out[r * d + c] = std::exp(xv[r * d + c] - mx);
      z += out[r * d + c];
    }
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] /= z;
  }
  const detail::AxisSplit s{rows, d, 1};
  return detail::make_result(x.shape(), std::move(out), {&x}, [s](detail::Node& self) {
    detail::softmax_backward(*self.value, self.grad, detail::parent_grad(self, 0), s);
  });
}

/// Log-softmax along the last axis.
inline Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("log_softmax on a scalar");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < d; ++c) mx = std::max(mx, xv[r * d + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) z += std::exp(xv[r * d + c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] - lse;
  }
  return detail::make_result(x.shape(), std::move(out), {&x}, [rows, d](detail::Node& self) {
    auto gx = detail::parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < d; ++c) total += self.grad[r * d + c];
      for (std::size_t c = 0; c < d; ++c)
        gx[r * d + c] += self.grad[r * d + c] - std::exp((*self.value)[r * d + c]) * total;
    }
  });
}

// ---------------------------------------------------------------------------
// Similarity

/// Cosine similarity of two equally sized tensors, as a scalar.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("cosine_similarity: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot += av[i] * bv[i];
    na += av[i] * av[i];
    nb += bv[i] * bv[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine similarity of a zero-norm vector");
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  const double c = dot / (na * nb);
  return detail::make_result({}, {c}, {&a, &b}, [na, nb, c](detail::Node& self) {
    const auto av = self.parents[0]->values();
    const auto bv = self.parents[1]->values();
    const double g = self.grad[0];
    if (auto ga = detail::parent_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (bv[i] / (na * nb) - c * av[i] / (na * na));
    if (auto gb = detail::parent_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
  });
}

/// Matrix of cosine similarities between every pair of rows of x.
inline Tensor pairwise_cosine(const Tensor& x) {
  detail::require_rank(x, 2, "pairwise_cosine");
  const std::size_t n = x.dim(0), d = x.dim(1);
  const auto xv = x.values();
  std::vector<double> norms(n), unit(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += xv[i * d + c] * xv[i * d + c];
    if (s == 0.0) throw NumericError("cosine similarity of a zero-norm vector (row " + std::to_string(i) + ")");
    norms[i] = std::sqrt(s);
    for (std::size_t c = 0; c < d; ++c) unit[i * d + c] = xv[i * d + c] / norms[i];
  }
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += unit[i * d + c] * unit[j * d + c];
      out[i * n + j] = s;
    }
  return detail::make_result({n, n}, std::move(out), {&x},
                             [n, d, norms = std::move(norms), unit = std::move(unit)](detail::Node& self) {
                               auto gx = detail::parent_grad(self, 0);
                               std::vector<double> du(d);
                               for (std::size_t i = 0; i < n; ++i) {
                                 std::fill(du.begin(), du.end(), 0.0);
                                 for (std::size_t j = 0; j < n; ++j) {
                                   const double g = self.grad[i * n + j] + self.grad[j * n + i];
                                   if (g == 0.0) continue;
                                   for (std::size_t c = 0; c < d; ++c) du[c] += g * unit[j * d + c];
                                 }
                                 double proj = 0.0;
                                 for (std::size_t c = 0; c < d; ++c) proj += du[c] * unit[i * d + c];
                                 for (std::size_t c = 0; c < d; ++c)
                                   gx[i * d + c] += (du[c] - proj * unit[i * d + c]) / norms[i];
                               }
                             });
}

}  // namespace maskfew
