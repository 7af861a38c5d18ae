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

// Command-line front end. dispatch() is kept in the header so the test
// suites can drive every subcommand in-process.

#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "maskfew/attribution.hpp"
#include "maskfew/config.hpp"
#include "maskfew/data_io.hpp"
#include "maskfew/masking.hpp"
#include "maskfew/pipeline.hpp"

namespace maskfew::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitData = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "1..10" or "1,3,7".
inline std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  try {
    if (const auto dots = text.find(".."); dots != std::string::npos) {
      const auto lo = std::stoull(text.substr(0, dots));
      const auto hi = std::stoull(text.substr(dots + 2));
      if (hi < lo) throw UsageError("empty seed range " + text);
      for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
    } else {
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) seeds.push_back(std::stoull(item));
    }
  } catch (const std::logic_error&) {
    throw UsageError("cannot parse seed list \"" + text + "\"");
  }
  if (seeds.empty()) throw UsageError("empty seed list");
  return seeds;
}

struct LoadedModel {
  Checkpoint checkpoint;
  Tokenizer tokenizer;
  LabelSpace labels;
};

inline LoadedModel load_model(const std::string& path) {
  LoadedModel m{load_checkpoint(path), {}, {}};
  if (!m.checkpoint.config.contains("tokenizer") || !m.checkpoint.config.contains("labels")) {
    throw FormatError("checkpoint " + path + " carries no tokenizer or label space");
  }
  m.tokenizer = Tokenizer::from_json(m.checkpoint.config["tokenizer"]);
  m.labels = LabelSpace::from_json(m.checkpoint.config["labels"]);
  return m;
}

/// Encodes the configured corpora with the checkpoint's tokenizer and checks the label spaces agree.
inline PreparedData prepare_for_model(const ExperimentConfig& cfg, const LoadedModel& model) {
  PreparedData data = prepare_data(cfg, &model.tokenizer);
  if (data.labels.names != model.labels.names || data.labels.n_base != model.labels.n_base) {
    throw ConfigError("configured corpus labels do not match the checkpoint's label space");
  }
  data.encoder = model.checkpoint.encoder;
  return data;
}

inline std::string bracketed(const Tokenizer& tok, const TokenSequence& seq, const MaskSpec& spec) {
  std::string out;
  for (std::size_t i = 1; i < seq.size(); ++i) {
    if (i > 1) out += ' ';
    if (i == spec.keep_start) out += '[';
    out += tok.token(seq.ids[i]);
    if (i + 1 == spec.keep_end()) out += ']';
  }
  return out;
}

inline std::size_t resolve_target(const LoadedModel& model, const std::string& label, const TokenSequence& seq) {
  if (!label.empty()) return model.labels.index_of(label);
  return predict(model.checkpoint.params, model.checkpoint.encoder, seq);
}

inline void write_text(const std::string& path, const std::string& text, std::ostream& fallback) {
  if (path.empty() || path == "-") {
    fallback << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"maskfew: attribution-masked anchors for few-shot text classification", "maskfew"};
  app.require_subcommand(1);

  std::string config_path, out_path, checkpoint_path, seeds_text = "1", out_dir, table_path, ckpt_dir, input_path,
                                                       label, split = "test";
  std::vector<std::string> overrides, texts;
  std::uint64_t seed = 1;
  double ratio = 0.45;
  std::size_t steps = 64;
  bool grid = false;
  SynthSpec synth;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--set", overrides, "Override a config key, e.g. train.ratio=0.25")->type_name("KEY=VALUE");
  };

  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic train/test corpus pair as JSON lines");
  gen->add_option("--out-dir", out_dir, "Output directory")->required();
  gen->add_option("--seed", synth.seed, "Generator seed");
  gen->add_option("--base-classes", synth.n_base_classes);
  gen->add_option("--novel-classes", synth.n_novel_classes);
  gen->add_option("--train-per-class", synth.train_per_class);
  gen->add_option("--test-per-class", synth.test_per_class);

  auto* train_base_cmd = app.add_subcommand("train-base", "Fine-tune a fresh encoder on the base classes");
  add_config(train_base_cmd);
  train_base_cmd->add_option("--out", out_path, "Checkpoint path")->required();

  auto* anchors_cmd = app.add_subcommand("select-anchors", "Select anchor samples for one seeded episode");
  add_config(anchors_cmd);
  anchors_cmd->add_option("--checkpoint", checkpoint_path, "Base checkpoint")->required();
  anchors_cmd->add_option("--seed", seed, "Episode seed");
  anchors_cmd->add_option("--out", out_path, "Anchor JSON path (stdout if omitted)");

  auto* attribute_cmd = app.add_subcommand("attribute", "Integrated Gradients token scores as JSON lines");
  attribute_cmd->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
  attribute_cmd->add_option("--text", texts, "Sentence to attribute (repeatable)");
  attribute_cmd->add_option("--input", input_path, "JSON-lines corpus to attribute against its labels");
  attribute_cmd->add_option("--label", label, "Target class name (default: predicted class)");
  attribute_cmd->add_option("--steps", steps, "Riemann steps");
  attribute_cmd->add_option("--out", out_path, "Output path (stdout if omitted)");

  auto* preview_cmd = app.add_subcommand("mask-preview", "Show the kept segment of a sentence in brackets");
  preview_cmd->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
  preview_cmd->add_option("--text", texts, "Sentence")->required();
  preview_cmd->add_option("--ratio", ratio, "Fraction of tokens kept");
  preview_cmd->add_option("--label", label, "Target class name (default: predicted class)");
  preview_cmd->add_option("--steps", steps, "Riemann steps");

  auto* finetune_cmd = app.add_subcommand("finetune", "Few-shot stage for one seeded episode");
  add_config(finetune_cmd);
  finetune_cmd->add_option("--checkpoint", checkpoint_path, "Base checkpoint")->required();
  finetune_cmd->add_option("--seed", seed, "Episode seed");
  finetune_cmd->add_option("--out", out_path, "Output checkpoint")->required();

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Novel-class accuracy of a checkpoint on the test corpus");
  add_config(evaluate_cmd);
  evaluate_cmd->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
  evaluate_cmd->add_option("--seed", seed, "Episode seed (selects the classes when n_way is set)");

  auto* experiment_cmd = app.add_subcommand("experiment", "Seed (and optionally ratio) sweep, CSV report");
  add_config(experiment_cmd);
  experiment_cmd->add_option("--seeds", seeds_text, "Seed range a..b or list a,b,c");
  experiment_cmd->add_flag("--ratio-grid", grid, "Sweep ratio over 0.05, 0.15, ..., 0.85");
  experiment_cmd->add_option("--out", out_path, "CSV report path (stdout if omitted)");
  experiment_cmd->add_option("--table", table_path, "Aligned summary table path (stderr if omitted)");
  experiment_cmd->add_option("--checkpoint-dir", ckpt_dir, "Directory for base and per-run checkpoints");

  auto* project_cmd = app.add_subcommand("project", "2-D PCA projection of CLS features as CSV");
  add_config(project_cmd);
  project_cmd->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
  project_cmd->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  project_cmd->add_option("--out", out_path, "CSV path")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      std::filesystem::create_directories(out_dir);
      auto [train, test] = generate_synthetic(synth);
      write_corpus(train, out_dir + "/train.jsonl");
      write_corpus(test, out_dir + "/test.jsonl");
      err << "wrote " << train.size() << " train and " << test.size() << " test records to " << out_dir << '\n';
      return kExitOk;
    }

    if (train_base_cmd->parsed()) {
      const ExperimentConfig cfg = load_experiment_config(config_path, overrides);
      const PreparedData data = prepare_data(cfg);
      err << "training base model on " << data.base_train.size() << " samples, " << data.labels.n_base << " classes\n";
      const ModelParams params = train_base(data.base_train, data.encoder, cfg.train);
      std::size_t correct = 0;
      for (const Example& e : data.base_train) correct += predict(params, data.encoder, e.seq) == e.label;
      err << "base training accuracy " << static_cast<double>(correct) / static_cast<double>(data.base_train.size()) << '\n';
      save_checkpoint(params, checkpoint_config(cfg, data), out_path);
      return kExitOk;
    }

    if (anchors_cmd->parsed()) {
      const ExperimentConfig cfg = load_experiment_config(config_path, overrides);
      const LoadedModel model = load_model(checkpoint_path);
      const PreparedData data = prepare_for_model(cfg, model);
      const EpisodeSpec episode = sample_episode(data.novel_train, data.labels, cfg.train.n_way, cfg.train.K, seed);
      const auto& params = model.checkpoint.params;
      const AnchorSet set = select_anchors(extract_features(params, data.encoder, data.base_train),
                                           extract_features(params, data.encoder, episode_shots(data.novel_train, episode)),
                                           cfg.train.K, cfg.train.d_n_mode);
      json j = json::object();
      for (const auto& [cls, entries] : set.per_class) {
        json list = json::array();
        for (const AnchorEntry& e : entries) list.push_back({{"row_id", e.row_id}, {"score", e.score}});
        j[data.labels.names[cls]] = list;
      }
      write_text(out_path, j.dump(2) + "\n", out);
      return kExitOk;
    }

    if (attribute_cmd->parsed()) {
      const LoadedModel model = load_model(checkpoint_path);
      std::vector<std::pair<std::string, std::string>> items;  // text, label
      for (const auto& t : texts) items.emplace_back(t, label);
      if (!input_path.empty()) {
        for (const Record& r : load_corpus(input_path).records) items.emplace_back(r.text, r.label);
      }
      if (items.empty()) throw UsageError("attribute needs --text or --input");
      std::string lines;
      for (const auto& [text, lbl] : items) {
        const TokenSequence seq = model.tokenizer.encode(text);
        const std::size_t target = resolve_target(model, lbl, seq);
        const AttributionScores s =
            integrated_gradients(seq, target, model.checkpoint.params, model.checkpoint.encoder, steps);
        lines += json{{"text", text},
                      {"tokens", model.tokenizer.decode(seq.ids)},
                      {"target", model.labels.names[target]},
                      {"scores", s.scores},
                      {"steps", s.steps},
                      {"completeness_gap", s.completeness_gap}}
                     .dump() +
                 "\n";
      }
      write_text(out_path, lines, out);
      return kExitOk;
    }

    if (preview_cmd->parsed()) {
      const LoadedModel model = load_model(checkpoint_path);
      for (const auto& text : texts) {
        const TokenSequence seq = model.tokenizer.encode(text);
        if (seq.size() < 2) throw DataError("text has no tokens to mask");
        const std::size_t target = resolve_target(model, label, seq);
        const AttributionScores s =
            integrated_gradients(seq, target, model.checkpoint.params, model.checkpoint.encoder, steps);
        out << bracketed(model.tokenizer, seq, mask_generator(seq, s, ratio)) << '\n';
      }
      return kExitOk;
    }

    if (finetune_cmd->parsed()) {
      const ExperimentConfig cfg = load_experiment_config(config_path, overrides);
      const LoadedModel model = load_model(checkpoint_path);
      const PreparedData data = prepare_for_model(cfg, model);
      const EpisodeSpec episode = sample_episode(data.novel_train, data.labels, cfg.train.n_way, cfg.train.K, seed);
      FslTrace trace;
      const ModelParams tuned = run_fsl(model.checkpoint.params.clone(), data.base_train,
                                        episode_shots(data.novel_train, episode), data.labels, data.encoder, cfg.train,
                                        seed, &trace);
      err << "few-shot stage: " << trace.anchors.size() << " anchors, " << trace.mask_passes << " mask passes\n";
      json c = checkpoint_config(cfg, data);
      c["episode_seed"] = seed;
      save_checkpoint(tuned, c, out_path);
      return kExitOk;
    }

    if (evaluate_cmd->parsed()) {
      const ExperimentConfig cfg = load_experiment_config(config_path, overrides);
      const LoadedModel model = load_model(checkpoint_path);
      const PreparedData data = prepare_for_model(cfg, model);
      const EpisodeSpec episode = sample_episode(data.novel_train, data.labels, cfg.train.n_way, cfg.train.K, seed);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f\n", evaluate(model.checkpoint.params, data.encoder, data.test, episode));
      out << buf;
      return kExitOk;
    }

    if (experiment_cmd->parsed()) {
      ExperimentOptions options;
      options.seeds = parse_seeds(seeds_text);
      const ExperimentConfig cfg = load_experiment_config(config_path, overrides);
      const PreparedData data = prepare_data(cfg);
      if (grid) options.ratios = ratio_grid();
      options.checkpoint_dir = ckpt_dir;
      err << "experiment: " << options.seeds.size() << " seeds x " << (grid ? 9 : 1) << " ratios\n";
      const ExperimentReport report = run_experiment(data, cfg, options);
      write_text(out_path, report.csv(), out);
      write_text(table_path, report.table(), err);
      return kExitOk;
    }

    if (project_cmd->parsed()) {
      const ExperimentConfig cfg = load_experiment_config(config_path, overrides);
      const LoadedModel model = load_model(checkpoint_path);
      const PreparedData data = prepare_for_model(cfg, model);
      std::vector<Example> examples = data.test;
      if (split == "train") {
        examples = data.base_train;
        examples.insert(examples.end(), data.novel_train.begin(), data.novel_train.end());
      }
      write_projection_csv(project_features(model.checkpoint.params, data.encoder, examples), data.labels, out_path);
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, out, err);
}

}  // namespace maskfew::cli
