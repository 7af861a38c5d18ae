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

// Integrated Gradients over the embedded input of the encoder.

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "maskfew/encoder.hpp"
#include "maskfew/errors.hpp"
#include "maskfew/tensor.hpp"

namespace maskfew {

enum class BaselineKind {
  pad,   // every non-CLS token replaced by PAD, positions kept
  zero,  // all-zero embedding matrix
};

struct AttributionScores {
  TokenSequence sequence;
  std::size_t target_class = 0;
  std::vector<double> scores;  // one per position, CLS first
  std::size_t steps = 0;
  double output_at_input = 0.0;
  double output_at_baseline = 0.0;
  double completeness_gap = 0.0;

  double total() const {
    double s = 0.0;
    for (double v : scores) s += v;
    return s;
  }
};

/// Embedding of the sequence with every non-CLS id replaced by PAD.
inline Tensor baseline_embedding(const TokenSequence& seq, const ModelParams& params, const EncoderConfig& cfg) {
  TokenSequence reference = seq;
  for (std::size_t i = 1; i < reference.ids.size(); ++i) reference.ids[i] = special::kPad;
  NoGradGuard no_grad;
  return embed(reference, params, cfg);
}

/// Midpoint-rule Integrated Gradients of the target logit. Each position's
/// score is summed over embedding dimensions, so the scores add up to
/// F(x) - F(baseline) up to quadrature error.
inline AttributionScores integrated_gradients(const TokenSequence& seq, std::size_t target, const ModelParams& params,
                                              const EncoderConfig& cfg, std::size_t steps,
                                              BaselineKind baseline = BaselineKind::pad) {
  if (target >= cfg.n_classes) {
    throw ClassError("attribution target " + std::to_string(target) + " outside " + std::to_string(cfg.n_classes) +
                     " classes");
  }
  if (steps == 0) throw ContractError("integrated gradients needs at least one step");
  seq.validate(cfg);

  const ModelParams frozen = params.frozen();
  std::vector<double> input, reference;
  {
    NoGradGuard no_grad;
    Tensor x = embed(seq, frozen, cfg);
    input.assign(x.values().begin(), x.values().end());
    if (baseline == BaselineKind::pad) {
      Tensor xb = baseline_embedding(seq, frozen, cfg);
      reference.assign(xb.values().begin(), xb.values().end());
    } else {
      reference.assign(input.size(), 0.0);
    }
  }
  const Shape shape{seq.size(), cfg.d_model};
  std::vector<double> delta(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) delta[i] = input[i] - reference[i];

  AttributionScores out;
  out.sequence = seq;
  out.target_class = target;
  out.steps = steps;
  {
    NoGradGuard no_grad;
    out.output_at_input = classify_embedded(Tensor::from(shape, input), seq.active, frozen, cfg)[target];
    out.output_at_baseline = classify_embedded(Tensor::from(shape, reference), seq.active, frozen, cfg)[target];
  }

  std::vector<double> grad_sum(input.size(), 0.0);
  std::vector<double> point(input.size());
  for (std::size_t k = 1; k <= steps; ++k) {
    const double alpha = (static_cast<double>(k) - 0.5) / static_cast<double>(steps);
    for (std::size_t i = 0; i < point.size(); ++i) point[i] = reference[i] + alpha * delta[i];
    Tensor z = Tensor::from(shape, point, true);
    backward(element(classify_embedded(z, seq.active, frozen, cfg), target));
    const auto g = z.grad();
    for (std::size_t i = 0; i < g.size(); ++i) grad_sum[i] += g[i];
  }

  out.scores.assign(seq.size(), 0.0);
  for (std::size_t p = 0; p < seq.size(); ++p) {
    double s = 0.0;
    for (std::size_t c = 0; c < cfg.d_model; ++c) {
      const std::size_t idx = p * cfg.d_model + c;
      s += delta[idx] * grad_sum[idx];
    }
    out.scores[p] = s / static_cast<double>(steps);
  }
  out.completeness_gap = std::abs(out.total() - (out.output_at_input - out.output_at_baseline));
  return out;
}

}  // namespace maskfew
