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

#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "maskfew/config.hpp"
#include "maskfew/pipeline.hpp"

using namespace maskfew;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config(const SynthSpec& spec) {
  ExperimentConfig cfg;
  cfg.encoder.d_model = 16;
  cfg.encoder.n_layers = 1;
  cfg.encoder.n_heads = 2;
  cfg.encoder.d_ff = 32;
  cfg.encoder.max_len = 16;
  cfg.train.epoch_b = 8;
  cfg.train.base_lr = 3e-3;
  cfg.train.batch_size_base = 16;
  cfg.train.epoch_f = 4;
  cfg.train.fsl_lr = 1e-2;
  cfg.train.ig_steps = 8;
  cfg.train.n_way = 2;
  cfg.train.K = 3;
  cfg.data.novel_labels = spec.novel_names();
  return cfg;
}

SynthSpec tiny_spec() {
  SynthSpec spec;
  spec.n_base_classes = 2;
  spec.n_novel_classes = 2;
  spec.train_per_class = 30;
  spec.test_per_class = 15;
  spec.filler_words = 30;
  spec.signal_words = 4;
  spec.min_len = 6;
  spec.max_len = 10;
  spec.segment_len = 2;
  return spec;
}

struct Fixture {
  SynthSpec spec = tiny_spec();
  ExperimentConfig cfg = tiny_config(spec);
  PreparedData data;
  ModelParams base;

  Fixture() {
    auto [train, test] = generate_synthetic(spec);
    data = prepare_data(train, test, cfg);
    base = train_base(data.base_train, data.encoder, cfg.train);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
  const auto x = a.tensors();
  const auto y = b.tensors();
  if (x.size() != y.size()) return false;
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (!std::equal(x[k].values().begin(), x[k].values().end(), y[k].values().begin(), y[k].values().end())) return false;
  }
  return true;
}

std::vector<Example> episode_for(const Fixture& f, std::uint64_t seed) {
  return episode_shots(f.data.novel_train, sample_episode(f.data.novel_train, f.data.labels, 2, f.cfg.train.K, seed));
}

// Hand-built one-layer model: uniform attention, so the CLS feature is the
// mean of the normalized token rows. Token 4 pushes class 1, token 5 pushes
// class 2, equal counts go to class 1 and class 0 wins only through its small
// bias when neither token occurs.
struct CountingModel {
  EncoderConfig cfg;
  ModelParams params;

  CountingModel() {
    cfg.vocab_size = 6;
    cfg.max_len = 8;
    cfg.d_model = 4;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.d_ff = 4;
    cfg.n_classes = 3;
    params = ModelParams::init(cfg, 1);
    params.for_each([](const std::string& name, Tensor& t) {
      if (name.find("ln") != std::string::npos && name.find("gain") != std::string::npos) return;
      for (double& v : t.mutable_values()) v = 0.0;
    });
    auto set = [](const Tensor& t, std::size_t r, std::size_t c, double v) { t.mutable_values()[r * t.dim(1) + c] = v; };
    set(params.token_embedding, 4, 0, 1.0);
    set(params.token_embedding, 4, 1, -1.0);
    set(params.token_embedding, 5, 2, 1.0);
    set(params.token_embedding, 5, 3, -1.0);
    for (std::size_t i = 0; i < 4; ++i) {
      set(params.layers[0].w_value, i, i, 1.0);
      set(params.layers[0].w_out, i, i, 1.0);
    }
    set(params.head_weight, 0, 1, 1.0);
    set(params.head_weight, 1, 1, -1.0);
    set(params.head_weight, 2, 2, 1.0);
    set(params.head_weight, 3, 2, -1.0);
    params.head_bias.mutable_values()[0] = 0.01;
  }

  static std::size_t rule(const std::vector<TokenId>& ids) {
    const auto a = std::count(ids.begin(), ids.end(), 4);
    const auto b = std::count(ids.begin(), ids.end(), 5);
    if (a == 0 && b == 0) return 0;
    return a >= b ? 1 : 2;
  }
};

Example example(std::vector<TokenId> ids, std::size_t label) {
  return {TokenSequence::all_active(std::move(ids)), label, 0, label == 0 ? Origin::base : Origin::novel};
}

EpisodeSpec two_way() {
  EpisodeSpec ep;
  ep.novel_classes = {1, 2};
  return ep;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

TEST_CASE("prepared data respects the union label space", "[pipeline][data]") {
  const Fixture& f = fixture();
  CHECK(f.data.labels.names == std::vector<std::string>{"base0", "base1", "novel0", "novel1"});
  CHECK(f.data.encoder.n_classes == 4);
  CHECK(f.data.encoder.vocab_size == f.data.tokenizer.size());
  CHECK(f.data.base_train.size() == 60);
  CHECK(f.data.novel_train.size() == 60);
  CHECK(f.data.test.size() == 60);
  for (const Example& e : f.data.base_train) CHECK((e.origin == Origin::base && e.label < 2));
  for (const Example& e : f.data.novel_train) CHECK((e.origin == Origin::novel && e.label >= 2));
}

TEST_CASE("base training separates a two-class corpus", "[pipeline][train]") {
  SynthSpec spec = tiny_spec();
  spec.n_novel_classes = 1;
  const ExperimentConfig cfg = tiny_config(spec);
  auto [train, test] = generate_synthetic(spec);
  const PreparedData data = prepare_data(train, test, cfg);
  const ModelParams p = train_base(data.base_train, data.encoder, cfg.train);
  std::size_t correct = 0;
  for (const Example& e : data.base_train) correct += predict(p, data.encoder, e.seq) == e.label;
  CHECK(static_cast<double>(correct) / static_cast<double>(data.base_train.size()) > 0.99);

  CHECK(same_params(p, train_base(data.base_train, data.encoder, cfg.train)));

  TrainConfig zero = cfg.train;
  zero.epoch_b = 0;
  CHECK_THROWS_AS(train_base(data.base_train, data.encoder, zero), ConfigError);
}

TEST_CASE("episodes draw distinct novel shots deterministically", "[pipeline][episode]") {
  const Fixture& f = fixture();
  const EpisodeSpec a = sample_episode(f.data.novel_train, f.data.labels, 2, 5, 9);
  const EpisodeSpec b = sample_episode(f.data.novel_train, f.data.labels, 2, 5, 9);
  CHECK(a.shots == b.shots);
  CHECK(a.novel_classes == std::vector<std::size_t>{2, 3});
  for (const auto& [label, rows] : a.shots) {
    CHECK(rows.size() == 5);
    CHECK(std::adjacent_find(rows.begin(), rows.end()) == rows.end());
  }
  for (const Example& e : episode_shots(f.data.novel_train, a)) CHECK(a.contains(e.label));
  CHECK(sample_episode(f.data.novel_train, f.data.labels, 1, 5, 9).n_way() == 1);
  CHECK_THROWS_AS(sample_episode(f.data.novel_train, f.data.labels, 3, 5, 9), DataError);
  CHECK_THROWS_AS(sample_episode(f.data.novel_train, f.data.labels, 2, 31, 9), DataError);
}

TEST_CASE("few-shot stage beats the majority rate", "[pipeline][fsl]") {
  const Fixture& f = fixture();
  TrainConfig tc = f.cfg.train;
  tc.epoch_f = 20;
  const EpisodeSpec ep = sample_episode(f.data.novel_train, f.data.labels, 2, tc.K, 3);
  const ModelParams tuned =
      run_fsl(f.base.clone(), f.data.base_train, episode_shots(f.data.novel_train, ep), f.data.labels, f.data.encoder, tc, 3);
  CHECK(evaluate(tuned, f.data.encoder, f.data.test, ep) > 0.5);
}

TEST_CASE("few-shot stage bookkeeping", "[pipeline][fsl]") {
  const Fixture& f = fixture();
  const std::vector<Example> shots = episode_for(f, 4);

  SECTION("one epoch runs one mask pass") {
    TrainConfig tc = f.cfg.train;
    tc.epoch_f = 1;
    FslTrace trace;
    run_fsl(f.base.clone(), f.data.base_train, shots, f.data.labels, f.data.encoder, tc, 4, &trace);
    CHECK(trace.mask_passes == 1);
    CHECK(trace.epoch_loss.size() == 1);
  }
  SECTION("every epoch carries |Y_b| * K anchors") {
    FslTrace trace;
    run_fsl(f.base.clone(), f.data.base_train, shots, f.data.labels, f.data.encoder, f.cfg.train, 4, &trace);
    CHECK(trace.mask_passes == f.cfg.train.epoch_f);
    CHECK(trace.anchors_per_epoch == std::vector<std::size_t>(f.cfg.train.epoch_f, 2 * f.cfg.train.K));
    CHECK(trace.anchors.per_class.size() == 2);
    for (const auto& [label, entries] : trace.anchors.per_class) CHECK(entries.size() == f.cfg.train.K);
  }
  SECTION("small classes contribute fewer anchors") {
    std::vector<Example> base;
    std::size_t class1 = 0;
    for (const Example& e : f.data.base_train) {
      if (e.label == 1 && class1 == 2) continue;
      class1 += e.label == 1;
      base.push_back(e);
    }
    TrainConfig tc = f.cfg.train;
    tc.epoch_f = 1;
    FslTrace trace;
    run_fsl(f.base.clone(), base, shots, f.data.labels, f.data.encoder, tc, 4, &trace);
    CHECK(trace.anchors_per_epoch == std::vector<std::size_t>{tc.K + 2});
  }
  SECTION("per-batch refresh masks once per batch") {
    TrainConfig tc = f.cfg.train;
    tc.mask_refresh = MaskRefresh::per_batch;
    tc.fsl_full_batch_max = 4;
    tc.fsl_batch_size = 4;
    FslTrace trace;
    run_fsl(f.base.clone(), f.data.base_train, shots, f.data.labels, f.data.encoder, tc, 4, &trace);
    const std::size_t pool = shots.size() + 2 * tc.K;
    CHECK(trace.mask_passes == tc.epoch_f * ((pool + 3) / 4));
  }
}

TEST_CASE("full ratio is the same as no masking", "[pipeline][fsl]") {
  const Fixture& f = fixture();
  const std::vector<Example> shots = episode_for(f, 5);
  TrainConfig full = f.cfg.train;
  full.ratio = 1.0;
  TrainConfig unmasked = full;
  unmasked.use_mask = false;
  CHECK(same_params(run_fsl(f.base.clone(), f.data.base_train, shots, f.data.labels, f.data.encoder, full, 5),
                    run_fsl(f.base.clone(), f.data.base_train, shots, f.data.labels, f.data.encoder, unmasked, 5)));

  TrainConfig half = f.cfg.train;
  half.ratio = 0.3;
  CHECK_FALSE(same_params(run_fsl(f.base.clone(), f.data.base_train, shots, f.data.labels, f.data.encoder, half, 5),
                          run_fsl(f.base.clone(), f.data.base_train, shots, f.data.labels, f.data.encoder, unmasked, 5)));
}

TEST_CASE("ablated few-shot stage is plain fine-tuning", "[pipeline][fsl]") {
  const Fixture& f = fixture();
  const std::vector<Example> shots = episode_for(f, 6);
  TrainConfig tc = f.cfg.train;
  tc.use_anchors = tc.use_mask = tc.use_contrastive = false;
  for (std::size_t epochs : {1u, 3u}) {
    tc.epoch_f = epochs;
    CHECK(same_params(run_fsl(f.base.clone(), f.data.base_train, shots, f.data.labels, f.data.encoder, tc, 6),
                      plain_finetune(f.base.clone(), shots, f.data.encoder, tc, 6)));
  }
}

TEST_CASE("few-shot stage is deterministic", "[pipeline][fsl]") {
  const Fixture& f = fixture();
  const std::vector<Example> shots = episode_for(f, 7);
  CHECK(same_params(run_fsl(f.base.clone(), f.data.base_train, shots, f.data.labels, f.data.encoder, f.cfg.train, 7),
                    run_fsl(f.base.clone(), f.data.base_train, shots, f.data.labels, f.data.encoder, f.cfg.train, 7)));
}

TEST_CASE("novel shots are never masked", "[pipeline][fsl]") {
  const Fixture& f = fixture();
  CHECK_THROWS_AS(mask_anchor(f.data.novel_train[0], f.base, f.data.encoder, f.cfg.train), ContractError);
  const TokenSequence masked = mask_anchor(f.data.base_train[0], f.base, f.data.encoder, f.cfg.train);
  const auto kept = std::count(masked.active.begin(), masked.active.end(), 1);
  CHECK(static_cast<std::size_t>(kept) == 1 + keep_length(f.data.base_train[0].seq.size() - 1, f.cfg.train.ratio));

  std::vector<Example> bad = episode_for(f, 8);
  bad.push_back(f.data.base_train[0]);
  CHECK_THROWS_AS(run_fsl(f.base.clone(), f.data.base_train, bad, f.data.labels, f.data.encoder, f.cfg.train, 8),
                  ContractError);
}

TEST_CASE("evaluate fixtures", "[pipeline][evaluate]") {
  const CountingModel m;
  const EpisodeSpec ep = two_way();

  std::vector<Example> perfect;
  for (const auto& ids : std::vector<std::vector<TokenId>>{{0, 4}, {0, 5}, {0, 4, 4, 5}, {0, 5, 5}, {0, 5, 4, 5},
                                                           {0, 4, 2}, {0, 3, 5}, {0, 4, 4}, {0, 5, 1, 5}, {0, 4, 5, 4}}) {
    perfect.push_back(example(ids, CountingModel::rule(ids)));
  }
  CHECK(evaluate(m.params, m.cfg, perfect, ep) == 1.0);

  std::vector<Example> balanced;
  for (int i = 0; i < 6; ++i) balanced.push_back(example({0, 4}, 1 + i % 2));
  CHECK(evaluate(m.params, m.cfg, balanced, ep) == 0.5);

  // Twenty samples: seven base rows that must be skipped, thirteen novel rows
  // of which rows 0, 1, 2, 5, 7, 8, 10 and 12 are predicted correctly.
  std::vector<Example> mixed{
      example({0, 4}, 1),       example({0, 5}, 2),    example({0, 4, 5}, 1),    example({0, 5, 5, 4}, 1),
      example({0, 4, 4}, 2),    example({0, 5, 2}, 2), example({0, 2}, 1),       example({0, 4, 3}, 1),
      example({0, 5, 4, 4}, 1), example({0, 3}, 2),    example({0, 5, 5, 5}, 2), example({0, 4, 5, 5}, 1),
      example({0, 4, 4, 4}, 1), example({0, 4}, 0),    example({0, 5}, 0),       example({0, 2}, 0),
      example({0, 4, 5}, 0),    example({0, 3, 3}, 0), example({0, 5, 4}, 0),    example({0, 1}, 0),
  };
  std::size_t hand = 0, total = 0;
  for (const Example& e : mixed) {
    if (e.label == 0) continue;
    ++total;
    hand += CountingModel::rule(e.seq.ids) == e.label;
  }
  REQUIRE(total == 13);
  REQUIRE(hand == 8);
  CHECK(evaluate(m.params, m.cfg, mixed, ep) == Catch::Approx(8.0 / 13.0).epsilon(0));

  const std::vector<Example> base_only{example({0, 4}, 0)};
  CHECK_THROWS_AS(evaluate(m.params, m.cfg, base_only, ep), DataError);
}

TEST_CASE("evaluate counts base-class predictions as errors", "[pipeline][evaluate]") {
  CountingModel m;
  m.params.head_bias.mutable_values()[0] = 100.0;
  std::vector<Example> test{example({0, 4}, 1), example({0, 5}, 2)};
  CHECK(evaluate(m.params, m.cfg, test, two_way()) == 0.0);
}

TEST_CASE("report statistics and formatting", "[pipeline][report]") {
  const std::vector<double> grid = ratio_grid();
  REQUIRE(grid.size() == 9);
  CHECK(grid.front() == 0.05);
  CHECK(grid.back() == 0.85);
  CHECK(grid[4] == 0.45);

  CHECK(mean_std({0.7}).second == 0.0);
  const auto [m, s] = mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(m == 2.5);
  CHECK(s == Catch::Approx(std::sqrt(1.25)));
  CHECK(format_mean_std(0.8214, 0.0404) == "0.821±0.040");

  ExperimentReport report;
  report.rows = {{1, 0.05, 5, 2, 0.5}, {1, 0.15, 5, 2, 0.75}, {2, 0.05, 5, 2, 1.0}, {2, 0.15, 5, 2, 0.25}};
  CHECK(report.csv() ==
        "seed,ratio,K,n_way,accuracy\n1,0.05,5,2,0.500000\n1,0.15,5,2,0.750000\n2,0.05,5,2,1.000000\n2,0.15,5,2,0.250000\n");
  const auto by = report.by_ratio();
  REQUIRE(by.size() == 2);
  CHECK(by[0].mean == 0.75);
  CHECK(by[0].stddev == 0.25);
  CHECK(by[1].mean == 0.5);
  CHECK(report.ratio_stddev() == 0.125);
  CHECK_THAT(report.table(), Catch::Matchers::ContainsSubstring("0.750±0.250"));
  CHECK_THAT(report.table(), Catch::Matchers::ContainsSubstring("std of mean accuracy across ratios: 0.125"));
}

TEST_CASE("experiment runs are reproducible across worker counts", "[pipeline][experiment]") {
  const Fixture& f = fixture();
  ExperimentOptions opt;
  opt.base = &f.base;
  opt.seeds = {1, 2};
  opt.ratios = {0.25, 0.65};
  const fs::path dir = fs::temp_directory_path() / ("maskfew_pipeline_" + std::to_string(::getpid()));

  ::setenv("MASKFEW_THREADS", "1", 1);
  CHECK(worker_count(10) == 1);
  opt.checkpoint_dir = (dir / "serial").string();
  const ExperimentReport serial = run_experiment(f.data, f.cfg, opt);

  ::setenv("MASKFEW_THREADS", "3", 1);
  CHECK(worker_count(10) == 3);
  CHECK(worker_count(2) == 2);
  opt.checkpoint_dir = (dir / "threaded").string();
  const ExperimentReport threaded = run_experiment(f.data, f.cfg, opt);
  ::unsetenv("MASKFEW_THREADS");

  CHECK(serial.csv() == threaded.csv());
  REQUIRE(serial.rows.size() == 4);
  CHECK(serial.rows[1].seed == 1);
  CHECK(serial.rows[1].ratio == 0.65);
  for (const char* name : {"base.ckpt", "seed1_ratio0.25.ckpt", "seed2_ratio0.65.ckpt"}) {
    const std::string a = read_file((dir / "serial" / name).string());
    CHECK_FALSE(a.empty());
    CHECK(a == read_file((dir / "threaded" / name).string()));
  }
  const Checkpoint ck = load_checkpoint((dir / "serial" / "seed2_ratio0.65.ckpt").string());
  CHECK(ck.config["train"]["ratio"] == 0.65);
  CHECK(LabelSpace::from_json(ck.config["labels"]).names == f.data.labels.names);
  fs::remove_all(dir);
}

TEST_CASE("a single seed reports zero spread", "[pipeline][experiment]") {
  const Fixture& f = fixture();
  ExperimentOptions opt;
  opt.base = &f.base;
  const ExperimentReport r = run_experiment(f.data, f.cfg, opt);
  REQUIRE(r.rows.size() == 1);
  CHECK(r.by_ratio()[0].stddev == 0.0);
  CHECK(r.rows[0].K == f.cfg.train.K);
  CHECK(r.rows[0].n_way == 2);
}

TEST_CASE("feature projection", "[pipeline][project]") {
  const Fixture& f = fixture();
  const auto points = project_features(f.base, f.data.encoder, f.data.test);
  REQUIRE(points.size() == f.data.test.size());
  double mx = 0.0, my = 0.0, vx = 0.0, vy = 0.0, cxy = 0.0;
  for (const auto& p : points) {
    mx += p.x;
    my += p.y;
  }
  const double n = static_cast<double>(points.size());
  mx /= n;
  my /= n;
  for (const auto& p : points) {
    vx += (p.x - mx) * (p.x - mx);
    vy += (p.y - my) * (p.y - my);
    cxy += (p.x - mx) * (p.y - my);
  }
  CHECK(std::abs(mx) < 1e-9);
  CHECK(std::abs(my) < 1e-9);
  CHECK(vx >= vy);
  CHECK(std::abs(cxy) < 1e-8 * (vx + 1.0));

  const fs::path path = fs::temp_directory_path() / ("maskfew_proj_" + std::to_string(::getpid()) + ".csv");
  write_projection_csv(points, f.data.labels, path.string());
  const std::string text = read_file(path.string());
  CHECK(text.rfind("row_id,label,pc1,pc2\n", 0) == 0);
  CHECK(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) == points.size() + 1);
  write_projection_csv(project_features(f.base, f.data.encoder, f.data.test), f.data.labels, path.string());
  CHECK(read_file(path.string()) == text);
  fs::remove(path);
}

TEST_CASE("config files, overrides and validation", "[pipeline][config]") {
  const fs::path path = fs::temp_directory_path() / ("maskfew_cfg_" + std::to_string(::getpid()) + ".json");
  {
    std::ofstream out(path);
    out << R"({"encoder": {"d_model": 32}, "train": {"ratio": 0.25, "d_n_mode": "min"},
               "data": {"train_path": "a.jsonl", "novel_labels": ["x"]}})";
  }
  const ExperimentConfig cfg =
      load_experiment_config(path.string(), {"train.epoch_f=7", "train.mask_mode=replace", "data.test_path=b.jsonl"});
  CHECK(cfg.encoder.d_model == 32);
  CHECK(cfg.encoder.n_layers == 2);
  CHECK(cfg.train.ratio == 0.25);
  CHECK(cfg.train.epoch_f == 7);
  CHECK(cfg.train.epoch_b == 8);
  CHECK(cfg.train.base_lr == 2e-5);
  CHECK(cfg.train.fsl_lr == 4e-5);
  CHECK(cfg.train.d_n_mode == NovelDistanceMode::min);
  CHECK(cfg.train.mask_mode == MaskMode::replace);
  CHECK(cfg.data.test_path == "b.jsonl");
  CHECK(cfg.data.novel_labels == std::vector<std::string>{"x"});

  CHECK_THROWS_AS(load_experiment_config(path.string(), {"train.nope=1"}), ConfigError);
  CHECK_THROWS_AS(load_experiment_config(path.string(), {"train.ratio"}), ConfigError);
  CHECK_THROWS_AS(load_experiment_config(path.string(), {"train.ratio=0"}), ConfigError);
  CHECK_THROWS_AS(load_experiment_config(path.string(), {"train.d_n_mode=median"}), ConfigError);

  const ExperimentConfig round = experiment_config_from_json(to_json(cfg));
  CHECK(to_json(round) == to_json(cfg));
  json extra = to_json(cfg);
  extra["encoder"]["n_classes"] = 3;
  CHECK_THROWS_AS(experiment_config_from_json(extra), ConfigError);
  fs::remove(path);
}
