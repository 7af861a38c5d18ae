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

// Pre-norm BERT-style encoder with a linear classification head on the CLS
// feature of the top layer.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "maskfew/errors.hpp"
#include "maskfew/tensor.hpp"

namespace maskfew {

using TokenId = std::int32_t;

/// Reserved vocabulary entries; every tokenizer assigns these ids.
namespace special {
inline constexpr TokenId kCls = 0;
inline constexpr TokenId kPad = 1;
inline constexpr TokenId kUnk = 2;
inline constexpr TokenId kMask = 3;
inline constexpr std::size_t kCount = 4;
}  // namespace special

struct EncoderConfig {
  std::size_t vocab_size = 2000;
  std::size_t max_len = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t n_classes = 2;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size <= special::kCount) throw ConfigError("encoder.vocab_size must exceed the reserved tokens");
    if (max_len == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || n_classes == 0) {
      throw ConfigError("encoder extents must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("encoder.d_model (" + std::to_string(d_model) + ") is not divisible by encoder.n_heads (" +
                        std::to_string(n_heads) + ")");
    }
  }

  bool operator==(const EncoderConfig&) const = default;
};

/// CLS-prefixed token ids plus the positions that may be attended to.
struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> active;

  static TokenSequence all_active(std::vector<TokenId> ids) {
    TokenSequence seq{std::move(ids), {}};
    seq.active.assign(seq.ids.size(), 1);
    return seq;
  }

  std::size_t size() const { return ids.size(); }

  void validate(const EncoderConfig& cfg) const {
    if (ids.empty()) throw ContractError("token sequence is empty");
    if (active.size() != ids.size()) throw ContractError("token sequence active flags do not match its length");
    if (ids[0] != special::kCls) throw ContractError("token sequence does not start with CLS");
    if (!active[0]) throw ContractError("CLS position must stay active");
    if (ids.size() > cfg.max_len) {
      throw ContractError("sequence length " + std::to_string(ids.size()) + " exceeds max_len " +
                          std::to_string(cfg.max_len));
    }
  }

  bool operator==(const TokenSequence&) const = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor w_query, b_query, w_key, b_key, w_value, b_value, w_out, b_out;
  Tensor ln2_gain, ln2_bias;
  Tensor w_ff1, b_ff1, w_ff2, b_ff2;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "ln1.gain", self.ln1_gain);
    f(prefix + "ln1.bias", self.ln1_bias);
    f(prefix + "attn.w_query", self.w_query);
    f(prefix + "attn.b_query", self.b_query);
    f(prefix + "attn.w_key", self.w_key);
    f(prefix + "attn.b_key", self.b_key);
    f(prefix + "attn.w_value", self.w_value);
    f(prefix + "attn.b_value", self.b_value);
    f(prefix + "attn.w_out", self.w_out);
    f(prefix + "attn.b_out", self.b_out);
    f(prefix + "ln2.gain", self.ln2_gain);
    f(prefix + "ln2.bias", self.ln2_bias);
    f(prefix + "mlp.w_ff1", self.w_ff1);
    f(prefix + "mlp.b_ff1", self.b_ff1);
    f(prefix + "mlp.w_ff2", self.w_ff2);
    f(prefix + "mlp.b_ff2", self.b_ff2);
  }
};

/// Shape each named parameter must have for a given config.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const EncoderConfig& cfg) {
  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  std::vector<std::pair<std::string, Shape>> layout{
      {"embed.token", {cfg.vocab_size, d}},
      {"embed.position", {cfg.max_len, d}},
  };
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    for (auto [name, shape] : std::vector<std::pair<std::string, Shape>>{
             {"ln1.gain", {d}}, {"ln1.bias", {d}},
             {"attn.w_query", {d, d}}, {"attn.b_query", {d}},
             {"attn.w_key", {d, d}}, {"attn.b_key", {d}},
             {"attn.w_value", {d, d}}, {"attn.b_value", {d}},
             {"attn.w_out", {d, d}}, {"attn.b_out", {d}},
             {"ln2.gain", {d}}, {"ln2.bias", {d}},
             {"mlp.w_ff1", {d, f}}, {"mlp.b_ff1", {f}},
             {"mlp.w_ff2", {f, d}}, {"mlp.b_ff2", {d}}}) {
      layout.emplace_back(p + name, std::move(shape));
    }
  }
  layout.emplace_back("head.weight", Shape{d, cfg.n_classes});
  layout.emplace_back("head.bias", Shape{cfg.n_classes});
  return layout;
}

struct ModelParams {
  Tensor token_embedding;
  Tensor position_embedding;
  std::vector<LayerParams> layers;
  Tensor head_weight;  // d_model x n_classes
  Tensor head_bias;

  /// Random initialization: fan-in scaled normal weights, unit gains, zero biases.
  static ModelParams init(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.d_model, f = cfg.d_ff;
    const double wd = 1.0 / std::sqrt(static_cast<double>(d));
    const double wf = 1.0 / std::sqrt(static_cast<double>(f));
    ModelParams p;
    p.token_embedding = Tensor::randn({cfg.vocab_size, d}, 1.0, rng, true);
    p.position_embedding = Tensor::randn({cfg.max_len, d}, 0.1, rng, true);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      LayerParams lp;
      lp.ln1_gain = Tensor::full({d}, 1.0, true);
      lp.ln1_bias = Tensor::zeros({d}, true);
      lp.w_query = Tensor::randn({d, d}, wd, rng, true);
      lp.b_query = Tensor::zeros({d}, true);
      lp.w_key = Tensor::randn({d, d}, wd, rng, true);
      lp.b_key = Tensor::zeros({d}, true);
      lp.w_value = Tensor::randn({d, d}, wd, rng, true);
      lp.b_value = Tensor::zeros({d}, true);
      lp.w_out = Tensor::randn({d, d}, wd, rng, true);
      lp.b_out = Tensor::zeros({d}, true);
      lp.ln2_gain = Tensor::full({d}, 1.0, true);
      lp.ln2_bias = Tensor::zeros({d}, true);
      lp.w_ff1 = Tensor::randn({d, f}, wd, rng, true);
      lp.b_ff1 = Tensor::zeros({f}, true);
      lp.w_ff2 = Tensor::randn({f, d}, wf, rng, true);
      lp.b_ff2 = Tensor::zeros({d}, true);
      p.layers.push_back(std::move(lp));
    }
    p.head_weight = Tensor::randn({d, cfg.n_classes}, wd, rng, true);
    p.head_bias = Tensor::zeros({cfg.n_classes}, true);
    return p;
  }

  template <class F>
  void for_each(F&& f) {
    f(std::string("embed.token"), token_embedding);
    f(std::string("embed.position"), position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) LayerParams::visit(layers[l], "layer" + std::to_string(l) + ".", f);
    f(std::string("head.weight"), head_weight);
    f(std::string("head.bias"), head_bias);
  }

  template <class F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each([&](const std::string& name, const Tensor& t) { f(name, t); });
  }

  /// Handles in checkpoint order; they alias the parameters.
  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for_each([&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for_each([&](const std::string&, const Tensor& t) { out.push_back(t); });
    return out;
  }

  /// Deep copy with fresh gradient state.
  ModelParams clone() const {
    ModelParams copy = *this;
    copy.for_each([](const std::string&, Tensor& t) {
      t = Tensor::from(t.shape(), std::vector<double>(t.values().begin(), t.values().end()), true);
    });
    return copy;
  }

  /// Non-differentiable aliases of the parameters, for attribution and inference.
  ModelParams frozen() const {
    ModelParams copy = *this;
    copy.for_each([](const std::string&, Tensor& t) { t = t.detach(); });
    return copy;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
  }
};

/// Attention weights captured during encode(): [layer][head] -> len x len matrix.
struct AttentionTrace {
  std::vector<std::vector<std::vector<double>>> weights;
  std::size_t length = 0;
};

/// Token plus position embeddings (z^0).
inline Tensor embed(const TokenSequence& seq, const ModelParams& params, const EncoderConfig& cfg) {
  seq.validate(cfg);
  for (TokenId id : seq.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(cfg.vocab_size));
    }
  }
  Tensor tokens = embedding_lookup(params.token_embedding, seq.ids);
  Tensor positions = slice(params.position_embedding, 0, 0, seq.size());
  return add(tokens, positions);
}

/// Runs the residual blocks over an already embedded sequence. Keys whose
/// active flag is zero are excluded from every attention softmax.
inline Tensor encode_embedded(const Tensor& z0, std::span<const std::uint8_t> active, const ModelParams& params,
                              const EncoderConfig& cfg, AttentionTrace* trace = nullptr) {
  if (z0.rank() != 2 || z0.dim(1) != cfg.d_model || z0.dim(0) != active.size()) {
    throw DimensionError("encode: embedded input " + shape_string(z0.shape()) + " does not match d_model " +
                         std::to_string(cfg.d_model) + " and " + std::to_string(active.size()) + " positions");
  }
  const std::size_t dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  if (trace) {
    trace->weights.clear();
    trace->length = active.size();
  }
  Tensor z = z0;
  for (const LayerParams& layer : params.layers) {
    Tensor h = layer_norm(z, layer.ln1_gain, layer.ln1_bias);
    Tensor q = add(matmul(h, layer.w_query), layer.b_query);
    Tensor k = add(matmul(h, layer.w_key), layer.b_key);
    Tensor v = add(matmul(h, layer.w_value), layer.b_value);
    std::vector<Tensor> heads;
    heads.reserve(cfg.n_heads);
    if (trace) trace->weights.emplace_back();
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      Tensor qh = slice(q, 1, hd * dh, dh);
      Tensor kh = slice(k, 1, hd * dh, dh);
      Tensor vh = slice(v, 1, hd * dh, dh);
      Tensor attn = masked_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), active);
      if (trace) trace->weights.back().emplace_back(attn.values().begin(), attn.values().end());
      heads.push_back(matmul(attn, vh));
    }
    Tensor mixed = heads.size() == 1 ? heads[0] : concat(heads, 1);
    z = add(z, add(matmul(mixed, layer.w_out), layer.b_out));
    Tensor h2 = layer_norm(z, layer.ln2_gain, layer.ln2_bias);
    Tensor ff = add(matmul(gelu(add(matmul(h2, layer.w_ff1), layer.b_ff1)), layer.w_ff2), layer.b_ff2);
    z = add(z, ff);
  }
  return z;
}

/// z^L for every position.
inline Tensor encode(const TokenSequence& seq, const ModelParams& params, const EncoderConfig& cfg,
                     AttentionTrace* trace = nullptr) {
  return encode_embedded(embed(seq, params, cfg), seq.active, params, cfg, trace);
}

/// Top-layer CLS feature, shape [d_model].
inline Tensor cls_features(const TokenSequence& seq, const ModelParams& params, const EncoderConfig& cfg) {
  return row(encode(seq, params, cfg), 0);
}

/// Logits W^T f + b for a batch of features [B x d_model] -> [B x C].
inline Tensor head_logits(const Tensor& features, const ModelParams& params) {
  return add(matmul(features, params.head_weight), params.head_bias);
}

inline Tensor classify_embedded(const Tensor& z0, std::span<const std::uint8_t> active, const ModelParams& params,
                                const EncoderConfig& cfg) {
  Tensor cls = row(encode_embedded(z0, active, params, cfg), 0);
  return reshape(head_logits(reshape(cls, {1, cfg.d_model}), params), {cfg.n_classes});
}

/// Raw logits over all C classes, shape [C].
inline Tensor classify(const TokenSequence& seq, const ModelParams& params, const EncoderConfig& cfg) {
  return classify_embedded(embed(seq, params, cfg), seq.active, params, cfg);
}

/// Index of the largest logit; the lowest index wins ties.
inline std::size_t argmax(std::span<const double> values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

}  // namespace maskfew
