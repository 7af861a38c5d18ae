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

// Keep-window selection over attribution scores and application of the
// resulting mask to a token sequence.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "maskfew/attribution.hpp"
#include "maskfew/encoder.hpp"
#include "maskfew/errors.hpp"

namespace maskfew {

enum class MaskMode {
  attention,  // deactivate positions outside the window
  replace,    // overwrite ids outside the window with MASK
};

struct MaskSpec {
  std::size_t keep_start = 1;  // first kept position; CLS (0) is always kept
  std::size_t keep_len = 0;
  double ratio = 1.0;
  double window_score = 0.0;

  std::size_t keep_end() const { return keep_start + keep_len; }
  bool keeps(std::size_t pos) const { return pos == 0 || (pos >= keep_start && pos < keep_end()); }
};

/// max(1, round(ratio * n)), capped at n.
inline std::size_t keep_length(std::size_t content_tokens, double ratio) {
  const auto rounded = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(content_tokens)));
  return std::min(content_tokens, std::max<std::size_t>(1, rounded));
}

/// Picks the contiguous window of non-CLS positions with the largest score
/// sum. Ties go to the earliest window.
inline MaskSpec select_window(std::span<const double> scores, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ContractError("mask ratio must lie in (0, 1], got " + std::to_string(ratio));
  if (scores.size() < 2) throw ContractError("cannot mask a sequence with no tokens besides CLS");
  const std::size_t n = scores.size() - 1;
  MaskSpec spec;
  spec.ratio = ratio;
  spec.keep_len = keep_length(n, ratio);
  bool first = true;
  for (std::size_t start = 1; start + spec.keep_len <= scores.size(); ++start) {
    double s = 0.0;
    for (std::size_t i = start; i < start + spec.keep_len; ++i) s += scores[i];
    if (first || s > spec.window_score) {
      spec.keep_start = start;
      spec.window_score = s;
      first = false;
    }
  }
  return spec;
}

inline MaskSpec mask_generator(const TokenSequence& seq, const AttributionScores& scores, double ratio) {
  if (scores.scores.size() != seq.size()) {
    throw ContractError("attribution scores cover " + std::to_string(scores.scores.size()) + " positions, sequence has " +
                        std::to_string(seq.size()));
  }
  return select_window(scores.scores, ratio);
}

/// Returns a masked copy of seq; the input is left untouched.
inline TokenSequence apply_mask(const TokenSequence& seq, const MaskSpec& spec, MaskMode mode = MaskMode::attention) {
  if (spec.keep_start < 1 || spec.keep_end() > seq.size()) throw ContractError("mask window does not fit the sequence");
  TokenSequence out = seq;
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (spec.keeps(i)) continue;
    if (mode == MaskMode::attention) {
      out.active[i] = 0;
    } else {
      out.ids[i] = special::kMask;
    }
  }
  return out;
}

}  // namespace maskfew
