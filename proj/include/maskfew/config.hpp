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

// Experiment configuration: JSON layout, validation and dotted-key overrides.

#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskfew/anchors.hpp"
#include "maskfew/data_io.hpp"
#include "maskfew/encoder.hpp"
#include "maskfew/errors.hpp"
#include "maskfew/masking.hpp"

namespace maskfew {

enum class MaskRefresh { per_epoch, per_batch };

struct TrainConfig {
  std::size_t epoch_b = 8;
  std::size_t epoch_f = 150;
  double ratio = 0.45;
  double base_lr = 2e-5;
  double fsl_lr = 4e-5;
  double weight_decay = 0.01;
  std::size_t batch_size_base = 64;
  std::size_t K = 5;
  std::size_t n_way = 0;  // 0: every novel class
  std::uint64_t seed = 1;
  std::size_t ig_steps = 64;
  NovelDistanceMode d_n_mode = NovelDistanceMode::mean;
  MaskMode mask_mode = MaskMode::attention;
  MaskRefresh mask_refresh = MaskRefresh::per_epoch;
  bool use_anchors = true;
  bool use_mask = true;
  bool use_contrastive = true;
  std::size_t fsl_full_batch_max = 64;
  std::size_t fsl_batch_size = 32;

  void validate() const {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("train.ratio must lie in (0, 1]");
    if (K == 0) throw ConfigError("train.K must be at least 1");
    if (epoch_b == 0 || epoch_f == 0) throw ConfigError("train.epoch_b and train.epoch_f must be at least 1");
    if (batch_size_base == 0 || fsl_batch_size == 0) throw ConfigError("batch sizes must be positive");
    if (ig_steps == 0) throw ConfigError("train.ig_steps must be at least 1");
    if (!(base_lr > 0.0) || !(fsl_lr > 0.0)) throw ConfigError("learning rates must be positive");
  }
};

struct DataConfig {
  std::string train_path;
  std::string test_path;
  std::vector<std::string> novel_labels;
};

struct ExperimentConfig {
  EncoderConfig encoder;  // vocab_size caps the tokenizer; n_classes is derived from the data
  TrainConfig train;
  DataConfig data;
};

namespace detail {

template <class Enum>
struct EnumNames;

template <>
struct EnumNames<NovelDistanceMode> {
  static constexpr std::pair<NovelDistanceMode, const char*> items[] = {{NovelDistanceMode::mean, "mean"},
                                                                        {NovelDistanceMode::min, "min"}};
};
template <>
struct EnumNames<MaskMode> {
  static constexpr std::pair<MaskMode, const char*> items[] = {{MaskMode::attention, "attention"},
                                                               {MaskMode::replace, "replace"}};
};
template <>
struct EnumNames<MaskRefresh> {
  static constexpr std::pair<MaskRefresh, const char*> items[] = {{MaskRefresh::per_epoch, "per-epoch"},
                                                                  {MaskRefresh::per_batch, "per-batch"}};
};

template <class Enum>
std::string enum_name(Enum value) {
  for (auto [v, name] : EnumNames<Enum>::items)
    if (v == value) return name;
  return "?";
}

template <class Enum>
Enum enum_parse(const std::string& key, const json& j) {
  if (!j.is_string()) throw ConfigError(key + " must be a string");
  const auto s = j.get<std::string>();
  for (auto [v, name] : EnumNames<Enum>::items)
    if (s == name) return v;
  throw ConfigError(key + ": unknown value \"" + s + "\"");
}

template <class T>
void read_field(const json& section, const std::string& prefix, const char* key, T& field) {
  if (!section.contains(key)) return;
  try {
    field = section.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(prefix + key + ": " + e.what());
  }
}

inline void reject_unknown(const json& section, const std::string& prefix, std::initializer_list<const char*> known) {
  if (!section.is_object()) throw ConfigError("config section " + prefix + " must be an object");
  for (const auto& [key, value] : section.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown config key " + prefix + key);
  }
}

}  // namespace detail

inline json to_json(const TrainConfig& t) {
  return json{{"epoch_b", t.epoch_b},
              {"epoch_f", t.epoch_f},
              {"ratio", t.ratio},
              {"base_lr", t.base_lr},
              {"fsl_lr", t.fsl_lr},
              {"weight_decay", t.weight_decay},
              {"batch_size_base", t.batch_size_base},
              {"K", t.K},
              {"n_way", t.n_way},
              {"seed", t.seed},
              {"ig_steps", t.ig_steps},
              {"d_n_mode", detail::enum_name(t.d_n_mode)},
              {"mask_mode", detail::enum_name(t.mask_mode)},
              {"mask_refresh", detail::enum_name(t.mask_refresh)},
              {"use_anchors", t.use_anchors},
              {"use_mask", t.use_mask},
              {"use_contrastive", t.use_contrastive},
              {"fsl_full_batch_max", t.fsl_full_batch_max},
              {"fsl_batch_size", t.fsl_batch_size}};
}

inline json to_json(const ExperimentConfig& c) {
  json enc = encoder_config_to_json(c.encoder);
  enc.erase("n_classes");
  return json{{"encoder", enc},
              {"train", to_json(c.train)},
              {"data", json{{"train_path", c.data.train_path},
                            {"test_path", c.data.test_path},
                            {"novel_labels", c.data.novel_labels}}}};
}

/// Strict parse: unknown keys are rejected, missing keys keep their defaults.
inline ExperimentConfig experiment_config_from_json(const json& j) {
  detail::reject_unknown(j, "", {"encoder", "train", "data"});
  ExperimentConfig c;
  if (j.contains("encoder")) {
    const json& e = j["encoder"];
    detail::reject_unknown(e, "encoder.", {"vocab_size", "max_len", "d_model", "n_layers", "n_heads", "d_ff"});
    detail::read_field(e, "encoder.", "vocab_size", c.encoder.vocab_size);
    detail::read_field(e, "encoder.", "max_len", c.encoder.max_len);
    detail::read_field(e, "encoder.", "d_model", c.encoder.d_model);
    detail::read_field(e, "encoder.", "n_layers", c.encoder.n_layers);
    detail::read_field(e, "encoder.", "n_heads", c.encoder.n_heads);
    detail::read_field(e, "encoder.", "d_ff", c.encoder.d_ff);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    detail::reject_unknown(t, "train.",
                           {"epoch_b", "epoch_f", "ratio", "base_lr", "fsl_lr", "weight_decay", "batch_size_base", "K",
                            "n_way", "seed", "ig_steps", "d_n_mode", "mask_mode", "mask_refresh", "use_anchors",
                            "use_mask", "use_contrastive", "fsl_full_batch_max", "fsl_batch_size"});
    auto& tc = c.train;
    detail::read_field(t, "train.", "epoch_b", tc.epoch_b);
    detail::read_field(t, "train.", "epoch_f", tc.epoch_f);
    detail::read_field(t, "train.", "ratio", tc.ratio);
    detail::read_field(t, "train.", "base_lr", tc.base_lr);
    detail::read_field(t, "train.", "fsl_lr", tc.fsl_lr);
    detail::read_field(t, "train.", "weight_decay", tc.weight_decay);
    detail::read_field(t, "train.", "batch_size_base", tc.batch_size_base);
    detail::read_field(t, "train.", "K", tc.K);
    detail::read_field(t, "train.", "n_way", tc.n_way);
    detail::read_field(t, "train.", "seed", tc.seed);
    detail::read_field(t, "train.", "ig_steps", tc.ig_steps);
    if (t.contains("d_n_mode")) tc.d_n_mode = detail::enum_parse<NovelDistanceMode>("train.d_n_mode", t["d_n_mode"]);
    if (t.contains("mask_mode")) tc.mask_mode = detail::enum_parse<MaskMode>("train.mask_mode", t["mask_mode"]);
    if (t.contains("mask_refresh")) tc.mask_refresh = detail::enum_parse<MaskRefresh>("train.mask_refresh", t["mask_refresh"]);
    detail::read_field(t, "train.", "use_anchors", tc.use_anchors);
    detail::read_field(t, "train.", "use_mask", tc.use_mask);
    detail::read_field(t, "train.", "use_contrastive", tc.use_contrastive);
    detail::read_field(t, "train.", "fsl_full_batch_max", tc.fsl_full_batch_max);
    detail::read_field(t, "train.", "fsl_batch_size", tc.fsl_batch_size);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    detail::reject_unknown(d, "data.", {"train_path", "test_path", "novel_labels"});
    detail::read_field(d, "data.", "train_path", c.data.train_path);
    detail::read_field(d, "data.", "test_path", c.data.test_path);
    detail::read_field(d, "data.", "novel_labels", c.data.novel_labels);
  }
  c.train.validate();
  return c;
}

/// Applies "section.key=value". The value is parsed as JSON when possible,
/// otherwise taken as a string. The key must already exist in `config`.
inline void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override \"" + assignment + "\" is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key " + key);
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  *node = std::move(value);
}

/// Reads a config file, layering overrides on top of the full default layout
/// so that any documented key may be overridden.
inline ExperimentConfig load_experiment_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  json j = to_json(ExperimentConfig{});
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    experiment_config_from_json(file);  // reject unknown keys before merging
    j.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(j, o);
  return experiment_config_from_json(j);
}

}  // namespace maskfew
