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

// Training losses and the two optimizers used by the pipeline.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "maskfew/errors.hpp"
#include "maskfew/tensor.hpp"

namespace maskfew {

/// Batch mean of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  for (std::size_t y : labels) {
    if (y >= logits.dim(1)) throw ClassError("label " + std::to_string(y) + " outside " + std::to_string(logits.dim(1)) + " classes");
  }
  return scale(mean(pick(log_softmax(logits), labels)), -1.0);
}

/// -log(sum_P e^cos / (sum_P e^cos + sum_N e^cos)) over unordered distinct
/// pairs of rows: P shares a label, N does not. Zero when either set is empty.
inline Tensor contrastive_loss(const Tensor& features, std::span<const std::size_t> labels) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw DimensionError("contrastive_loss: features " + shape_string(features.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size();
  if (n < 2) throw ContractError("contrastive loss needs a batch of at least two samples");
  std::vector<double> positive(n * n, 0.0), all(n * n, 0.0);
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      all[i * n + j] = 1.0;
      if (labels[i] == labels[j]) {
        positive[i * n + j] = 1.0;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
  }
  if (n_pos == 0 || n_neg == 0) {
    // Keep the result attached to the graph so callers can always add it.
    return scale(sum(features), 0.0);
  }
  Tensor similarity = exp(pairwise_cosine(features));
  Tensor pos = weighted_sum(similarity, std::move(positive));
  Tensor total = weighted_sum(similarity, std::move(all));
  return sub(log(total), log(pos));
}

/// Unweighted sum of the cross-entropy and contrastive terms.
inline Tensor total_loss(const Tensor& logits, const Tensor& features, std::span<const std::size_t> labels) {
  return add(cross_entropy(logits, labels), contrastive_loss(features, labels));
}

enum class OptimizerKind { adamw, signsgd };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  static OptimizerState adamw(double lr, double weight_decay = 0.01) {
    OptimizerState s;
    s.kind = OptimizerKind::adamw;
    s.lr = lr;
    s.weight_decay = weight_decay;
    return s;
  }
  static OptimizerState signsgd(double lr) {
    OptimizerState s;
    s.kind = OptimizerKind::signsgd;
    s.lr = lr;
    return s;
  }
};

namespace detail {

inline void require_grads(std::span<const Tensor> params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw ContractError("optimizer step: parameter " + std::to_string(i) + " has no gradient");
  }
}

inline void require_finite(std::span<const Tensor> params) {
  for (const Tensor& p : params)
    for (double v : p.values())
      if (!std::isfinite(v)) throw NumericError("parameter became non-finite after an optimizer step");
}

}  // namespace detail

/// AdamW with bias correction and decoupled weight decay:
/// p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps).
inline void adamw_step(std::span<const Tensor> params, OptimizerState& state) {
  detail::require_grads(params);
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) throw ContractError("optimizer state does not match the parameter list");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const double decay = 1.0 - state.lr * state.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_values();
    const auto grad = params[k].grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + state.eps);
      values[i] = values[i] * decay - state.lr * update;
    }
  }
  detail::require_finite(params);
}

/// p <- p - lr * sign(g); coordinates with a zero gradient stay put.
inline void signsgd_step(std::span<const Tensor> params, OptimizerState& state) {
  detail::require_grads(params);
  ++state.step;
  for (const Tensor& p : params) {
    auto values = p.mutable_values();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (grad[i] > 0.0) {
        values[i] -= state.lr;
      } else if (grad[i] < 0.0) {
        values[i] += state.lr;
      }
    }
  }
  detail::require_finite(params);
}

inline void optimizer_step(std::span<const Tensor> params, OptimizerState& state) {
  if (state.kind == OptimizerKind::adamw) {
    adamw_step(params, state);
  } else {
    signsgd_step(params, state);
  }
}

}  // namespace maskfew
