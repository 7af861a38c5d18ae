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

// The three-stage few-shot pipeline: base fine-tuning, anchor selection, and
// mixed fine-tuning on novel shots plus attribution-masked anchors. Also
// episode sampling, evaluation and seed/ratio sweeps.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "maskfew/anchors.hpp"
#include "maskfew/attribution.hpp"
#include "maskfew/config.hpp"
#include "maskfew/data_io.hpp"
#include "maskfew/encoder.hpp"
#include "maskfew/masking.hpp"
#include "maskfew/objective.hpp"
#include "maskfew/tensor.hpp"

namespace maskfew {

enum class Origin { base, novel };

struct Example {
  TokenSequence seq;
  std::size_t label = 0;   // union label space
  std::size_t row_id = 0;  // record index in the source corpus
  Origin origin = Origin::base;
};

/// Corpora encoded against one tokenizer and one union label space.
struct PreparedData {
  Tokenizer tokenizer;
  LabelSpace labels;
  EncoderConfig encoder;
  std::vector<Example> base_train;
  std::vector<Example> novel_train;
  std::vector<Example> test;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Encodes in-memory corpora. When `tokenizer` is null one is built from the
/// training corpus, capped at encoder.vocab_size entries.
inline PreparedData prepare_data(const Corpus& train, const Corpus& test, const ExperimentConfig& cfg,
                                 const Tokenizer* tokenizer = nullptr) {
  PreparedData data;
  const BaseNovelSplit split = split_base_novel(train, cfg.data.novel_labels);
  data.labels = split.labels;
  data.tokenizer = tokenizer ? *tokenizer : build_tokenizer(train, cfg.encoder.vocab_size, cfg.encoder.max_len);
  data.encoder = cfg.encoder;
  data.encoder.vocab_size = data.tokenizer.size();
  data.encoder.max_len = data.tokenizer.max_len();
  data.encoder.n_classes = data.labels.size();
  data.encoder.validate();
  for (std::size_t i = 0; i < train.records.size(); ++i) {
    const Record& r = train.records[i];
    const std::size_t label = data.labels.index_of(r.label);
    const Origin origin = data.labels.is_novel(label) ? Origin::novel : Origin::base;
    (origin == Origin::novel ? data.novel_train : data.base_train).push_back({data.tokenizer.encode(r.text), label, i, origin});
  }
  for (std::size_t i = 0; i < test.records.size(); ++i) {
    const Record& r = test.records[i];
    const std::size_t label = data.labels.index_of(r.label);
    data.test.push_back({data.tokenizer.encode(r.text), label, i,
                         data.labels.is_novel(label) ? Origin::novel : Origin::base});
  }
  return data;
}

inline PreparedData prepare_data(const ExperimentConfig& cfg, const Tokenizer* tokenizer = nullptr) {
  if (cfg.data.train_path.empty()) throw ConfigError("data.train_path is not set");
  const Corpus train = load_corpus(cfg.data.train_path, SplitTag::train);
  const Corpus test = cfg.data.test_path.empty() ? Corpus{} : load_corpus(cfg.data.test_path, SplitTag::test);
  return prepare_data(train, test, cfg, tokenizer);
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeSpec {
  std::vector<std::size_t> novel_classes;                   // ascending
  std::map<std::size_t, std::vector<std::size_t>> shots;    // class -> row ids
  std::uint64_t seed = 0;

  std::size_t n_way() const { return novel_classes.size(); }
  bool contains(std::size_t label) const {
    return std::binary_search(novel_classes.begin(), novel_classes.end(), label);
  }
};

/// Draws N novel classes (all when n_way is 0) and K shots per class without replacement.
inline EpisodeSpec sample_episode(const std::vector<Example>& novel_train, const LabelSpace& labels, std::size_t n_way,
                                  std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ContractError("episode needs K >= 1");
  std::mt19937_64 rng(mix_seed(seed, 0xE9150DEull));
  std::vector<std::size_t> classes = labels.novel_indices();
  if (n_way > classes.size()) {
    throw DataError("n_way " + std::to_string(n_way) + " exceeds the " + std::to_string(classes.size()) + " novel classes");
  }
  if (n_way != 0 && n_way < classes.size()) {
    std::shuffle(classes.begin(), classes.end(), rng);
    classes.resize(n_way);
    std::sort(classes.begin(), classes.end());
  }
  EpisodeSpec ep;
  ep.seed = seed;
  ep.novel_classes = classes;
  for (std::size_t c : classes) {
    std::vector<std::size_t> pool;
    for (const Example& e : novel_train)
      if (e.label == c) pool.push_back(e.row_id);
    if (pool.size() < k) {
      throw DataError("novel class " + labels.names[c] + " has " + std::to_string(pool.size()) + " training samples, K is " +
                      std::to_string(k));
    }
    std::sort(pool.begin(), pool.end());
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    ep.shots[c] = std::move(pool);
  }
  return ep;
}

inline std::vector<Example> episode_shots(const std::vector<Example>& novel_train, const EpisodeSpec& episode) {
  std::unordered_map<std::size_t, const Example*> by_row;
  for (const Example& e : novel_train) by_row[e.row_id] = &e;
  std::vector<Example> out;
  for (const auto& [label, rows] : episode.shots) {
    for (std::size_t r : rows) {
      auto it = by_row.find(r);
      if (it == by_row.end()) throw DataError("episode shot row " + std::to_string(r) + " not in the novel training split");
      out.push_back(*it->second);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

/// One optimizer step on a batch; returns the loss value.
inline double train_step(ModelParams& params, const EncoderConfig& cfg, const std::vector<const Example*>& batch,
                         bool contrastive, OptimizerState& state) {
  const std::vector<Tensor> tensors = params.tensors();
  zero_grads(tensors);
  std::vector<Tensor> rows;
  std::vector<std::size_t> labels;
  rows.reserve(batch.size());
  for (const Example* e : batch) {
    rows.push_back(cls_features(e->seq, params, cfg));
    labels.push_back(e->label);
  }
  Tensor features = stack(rows);
  Tensor logits = head_logits(features, params);
  Tensor loss = contrastive && batch.size() >= 2 ? total_loss(logits, features, labels) : cross_entropy(logits, labels);
  backward(loss);
  optimizer_step(tensors, state);
  return loss.item();
}

/// Cross-entropy fine-tuning with AdamW on the base split, from a fresh initialization.
inline ModelParams train_base(const std::vector<Example>& base, const EncoderConfig& enc, const TrainConfig& cfg) {
  cfg.validate();
  if (base.empty()) throw DataError("base dataset is empty");
  ModelParams params = ModelParams::init(enc, cfg.seed);
  OptimizerState state = OptimizerState::adamw(cfg.base_lr, cfg.weight_decay);
  std::mt19937_64 rng(mix_seed(cfg.seed, 0xBA5Eull));
  std::vector<std::size_t> order(base.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epoch_b; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size_base) {
      std::vector<const Example*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size_base); ++i) batch.push_back(&base[order[i]]);
      train_step(params, enc, batch, false, state);
    }
  }
  return params;
}

/// z_CLS^L for every example, computed without recording a graph.
inline FeatureMatrix extract_features(const ModelParams& params, const EncoderConfig& enc,
                                      const std::vector<Example>& examples) {
  NoGradGuard no_grad;
  const ModelParams frozen = params.frozen();
  FeatureMatrix out;
  out.dim = enc.d_model;
  for (const Example& e : examples) {
    Tensor f = cls_features(e.seq, frozen, enc);
    out.append(f.values(), e.label, e.row_id);
  }
  return out;
}

/// Observations recorded by run_fsl, for tests and logs.
struct FslTrace {
  std::size_t mask_passes = 0;  // attribution + mask regenerations over the anchor set
  std::vector<std::size_t> anchors_per_epoch;
  AnchorSet anchors;
  std::vector<double> epoch_loss;
};

/// Attribution-guided keep-window mask for one anchor, under the current params.
inline TokenSequence mask_anchor(const Example& anchor, const ModelParams& params, const EncoderConfig& enc,
                                 const TrainConfig& cfg) {
  if (anchor.origin != Origin::base) throw ContractError("novel samples are never masked");
  if (anchor.seq.size() < 2) return anchor.seq;
  const AttributionScores scores = integrated_gradients(anchor.seq, anchor.label, params, enc, cfg.ig_steps);
  return apply_mask(anchor.seq, mask_generator(anchor.seq, scores, cfg.ratio), cfg.mask_mode);
}

/// Few-shot stage. Selects anchors once with the incoming params, then for
/// each of epoch_f epochs regenerates anchor masks and takes SignSGD steps on
/// shuffled batches of novel shots plus masked anchors.
inline ModelParams run_fsl(ModelParams params, const std::vector<Example>& base, const std::vector<Example>& shots,
                           const LabelSpace& labels, const EncoderConfig& enc, const TrainConfig& cfg,
                           std::uint64_t episode_seed, FslTrace* trace = nullptr) {
  cfg.validate();
  if (shots.empty()) throw ContractError("few-shot stage needs at least one novel shot");
  for (const Example& s : shots) {
    if (s.origin != Origin::novel || !labels.is_novel(s.label)) {
      throw ContractError("episode shot with label " + std::to_string(s.label) + " is not in the novel label space");
    }
  }

  std::vector<Example> anchors;
  if (cfg.use_anchors) {
    const AnchorSet set = select_anchors(extract_features(params, enc, base), extract_features(params, enc, shots), cfg.K,
                                         cfg.d_n_mode);
    std::unordered_map<std::size_t, const Example*> by_row;
    for (const Example& e : base) by_row[e.row_id] = &e;
    for (std::size_t row : set.row_ids()) anchors.push_back(*by_row.at(row));
    if (trace) trace->anchors = set;
  }

  OptimizerState state = OptimizerState::signsgd(cfg.fsl_lr);
  std::mt19937_64 rng(mix_seed(cfg.seed, episode_seed));
  const bool masking = cfg.use_anchors && cfg.use_mask;
  std::vector<TokenSequence> masked(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) masked[i] = anchors[i].seq;

  for (std::size_t epoch = 0; epoch < cfg.epoch_f; ++epoch) {
    if (masking && cfg.mask_refresh == MaskRefresh::per_epoch) {
      for (std::size_t i = 0; i < anchors.size(); ++i) masked[i] = mask_anchor(anchors[i], params, enc, cfg);
      if (trace) ++trace->mask_passes;
    }
    // D_h: unmasked shots first, then anchors; entries index into `pool`.
    std::vector<Example> pool = shots;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      pool.push_back(anchors[i]);
      pool.back().seq = masked[i];
    }
    if (trace) trace->anchors_per_epoch.push_back(anchors.size());

    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t batch_size = pool.size() <= cfg.fsl_full_batch_max ? pool.size() : cfg.fsl_batch_size;
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      std::vector<const Example*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
        Example& e = pool[order[i]];
        if (masking && cfg.mask_refresh == MaskRefresh::per_batch && e.origin == Origin::base) {
          e.seq = mask_anchor(anchors[order[i] - shots.size()], params, enc, cfg);
        }
        batch.push_back(&e);
      }
      if (masking && cfg.mask_refresh == MaskRefresh::per_batch && trace) ++trace->mask_passes;
      loss_sum += train_step(params, enc, batch, cfg.use_contrastive, state);
      ++steps;
    }
    if (trace) trace->epoch_loss.push_back(loss_sum / static_cast<double>(steps));
  }
  return params;
}

/// Plain cross-entropy SignSGD fine-tuning on the novel shots only.
inline ModelParams plain_finetune(ModelParams params, const std::vector<Example>& shots, const EncoderConfig& enc,
                                  const TrainConfig& cfg, std::uint64_t episode_seed) {
  OptimizerState state = OptimizerState::signsgd(cfg.fsl_lr);
  std::mt19937_64 rng(mix_seed(cfg.seed, episode_seed));
  std::vector<std::size_t> order(shots.size());
  const std::size_t batch_size = shots.size() <= cfg.fsl_full_batch_max ? shots.size() : cfg.fsl_batch_size;
  for (std::size_t epoch = 0; epoch < cfg.epoch_f; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      std::vector<const Example*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) batch.push_back(&shots[order[i]]);
      train_step(params, enc, batch, false, state);
    }
  }
  return params;
}

inline std::size_t predict(const ModelParams& params, const EncoderConfig& enc, const TokenSequence& seq) {
  NoGradGuard no_grad;
  return argmax(classify(seq, params.frozen(), enc).values());
}

/// Accuracy on test samples of the episode's novel classes; the prediction is
/// the argmax over all C logits.
inline double evaluate(const ModelParams& params, const EncoderConfig& enc, const std::vector<Example>& test,
                       const EpisodeSpec& episode) {
  NoGradGuard no_grad;
  const ModelParams frozen = params.frozen();
  std::size_t total = 0, correct = 0;
  for (const Example& e : test) {
    if (!episode.contains(e.label)) continue;
    ++total;
    if (argmax(classify(e.seq, frozen, enc).values()) == e.label) ++correct;
  }
  if (total == 0) throw DataError("test set has no samples of the episode's novel classes");
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Experiments

inline std::vector<double> ratio_grid() {
  std::vector<double> grid;
  for (int i = 0; i < 9; ++i) grid.push_back((5 + 10 * i) / 100.0);
  return grid;
}

struct ReportRow {
  std::uint64_t seed = 0;
  double ratio = 0.0;
  std::size_t K = 0;
  std::size_t n_way = 0;
  double accuracy = 0.0;
};

struct RatioSummary {
  double ratio = 0.0;
  std::size_t runs = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

/// Mean and population standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  const double n = static_cast<double>(xs.size());
  const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / n)};
}

inline std::string format_mean_std(double mean, double stddev) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f±%.3f", mean, stddev);
  return buf;
}

struct ExperimentReport {
  std::vector<ReportRow> rows;  // seed-major, then ratio

  std::vector<RatioSummary> by_ratio() const {
    std::map<double, std::vector<double>> groups;
    for (const ReportRow& r : rows) groups[r.ratio].push_back(r.accuracy);
    std::vector<RatioSummary> out;
    for (const auto& [ratio, accs] : groups) {
      auto [m, s] = mean_std(accs);
      out.push_back({ratio, accs.size(), m, s});
    }
    return out;
  }

  /// Standard deviation of the per-ratio mean accuracies.
  double ratio_stddev() const {
    std::vector<double> means;
    for (const auto& s : by_ratio()) means.push_back(s.mean);
    return mean_std(means).second;
  }

  std::string csv() const {
    std::string out = "seed,ratio,K,n_way,accuracy\n";
    char buf[128];
    for (const ReportRow& r : rows) {
      std::snprintf(buf, sizeof buf, "%llu,%.2f,%zu,%zu,%.6f\n", static_cast<unsigned long long>(r.seed), r.ratio, r.K,
                    r.n_way, r.accuracy);
      out += buf;
    }
    return out;
  }

  std::string table() const {
    std::string out = "ratio   K    n_way  seeds  accuracy\n";
    char buf[160];
    const std::size_t k = rows.empty() ? 0 : rows.front().K;
    const std::size_t n_way = rows.empty() ? 0 : rows.front().n_way;
    for (const auto& s : by_ratio()) {
      std::snprintf(buf, sizeof buf, "%-7.2f %-4zu %-6zu %-6zu %s\n", s.ratio, k, n_way, s.runs,
                    format_mean_std(s.mean, s.stddev).c_str());
      out += buf;
    }
    if (by_ratio().size() > 1) {
      std::snprintf(buf, sizeof buf, "std of mean accuracy across ratios: %.3f\n", ratio_stddev());
      out += buf;
    }
    return out;
  }
};

/// Worker count: MASKFEW_THREADS when set, else the hardware concurrency.
inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MASKFEW_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

inline json checkpoint_config(const ExperimentConfig& cfg, const PreparedData& data) {
  json j = to_json(cfg);
  j["encoder"] = encoder_config_to_json(data.encoder);
  j["tokenizer"] = data.tokenizer.to_json();
  j["labels"] = data.labels.to_json();
  return j;
}

struct ExperimentOptions {
  std::vector<std::uint64_t> seeds{1};
  std::vector<double> ratios;           // empty: the config's ratio
  std::string checkpoint_dir;           // empty: no checkpoints
  const ModelParams* base = nullptr;    // reuse instead of training
};

/// Runs one episode per (seed, ratio) from a shared base model. Jobs may run
/// on several workers; rows are merged in seed-then-ratio order.
inline ExperimentReport run_experiment(const PreparedData& data, const ExperimentConfig& cfg,
                                       const ExperimentOptions& options) {
  cfg.train.validate();
  const std::vector<double> ratios = options.ratios.empty() ? std::vector<double>{cfg.train.ratio} : options.ratios;
  const ModelParams base = options.base ? options.base->clone() : train_base(data.base_train, data.encoder, cfg.train);
  const json ck_config = checkpoint_config(cfg, data);
  if (!options.checkpoint_dir.empty()) {
    std::filesystem::create_directories(options.checkpoint_dir);
    save_checkpoint(base, ck_config, options.checkpoint_dir + "/base.ckpt");
  }

  struct Job {
    std::uint64_t seed;
    double ratio;
  };
  std::vector<Job> jobs;
  for (std::uint64_t s : options.seeds)
    for (double r : ratios) jobs.push_back({s, r});
  std::vector<ReportRow> rows(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());

  auto run_job = [&](std::size_t j) {
    try {
      TrainConfig tc = cfg.train;
      tc.ratio = jobs[j].ratio;
      const EpisodeSpec episode = sample_episode(data.novel_train, data.labels, tc.n_way, tc.K, jobs[j].seed);
      const std::vector<Example> shots = episode_shots(data.novel_train, episode);
      ModelParams tuned = run_fsl(base.clone(), data.base_train, shots, data.labels, data.encoder, tc, jobs[j].seed);
      rows[j] = {jobs[j].seed, jobs[j].ratio, tc.K, episode.n_way(), evaluate(tuned, data.encoder, data.test, episode)};
      if (!options.checkpoint_dir.empty()) {
        char name[96];
        std::snprintf(name, sizeof name, "/seed%llu_ratio%.2f.ckpt", static_cast<unsigned long long>(jobs[j].seed),
                      jobs[j].ratio);
        json c = ck_config;
        c["train"]["ratio"] = jobs[j].ratio;
        save_checkpoint(tuned, c, options.checkpoint_dir + name);
      }
    } catch (...) {
      errors[j] = std::current_exception();
    }
  };

  const std::size_t workers = worker_count(jobs.size());
  if (workers == 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run_job(j);
  } else {
    std::mutex m;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (true) {
          std::size_t j;
          {
            std::lock_guard lock(m);
            if (next == jobs.size()) return;
            j = next++;
          }
          run_job(j);
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return ExperimentReport{std::move(rows)};
}

// ---------------------------------------------------------------------------
// Feature projection

struct ProjectedPoint {
  std::size_t row_id;
  std::size_t label;
  double x, y;
};

/// First two principal components of the CLS features. Each component's sign
/// is fixed so that its largest-magnitude loading is positive.
inline std::vector<ProjectedPoint> project_features(const ModelParams& params, const EncoderConfig& enc,
                                                    const std::vector<Example>& examples) {
  if (examples.size() < 2) throw DataError("projection needs at least two samples");
  const FeatureMatrix f = extract_features(params, enc, examples);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(f.rows()), static_cast<Eigen::Index>(f.dim));
  for (std::size_t r = 0; r < f.rows(); ++r)
    for (std::size_t c = 0; c < f.dim; ++c) x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = f.row(r)[c];
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(f.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const Eigen::Index d = cov.rows();
  Eigen::MatrixXd basis(d, 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
    if (d > k) v = solver.eigenvectors().col(d - 1 - k);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(k) = v;
  }
  const Eigen::MatrixXd proj = x * basis;
  std::vector<ProjectedPoint> out;
  for (std::size_t r = 0; r < f.rows(); ++r) {
    out.push_back({f.row_ids[r], f.labels[r], proj(static_cast<Eigen::Index>(r), 0), proj(static_cast<Eigen::Index>(r), 1)});
  }
  return out;
}

inline void write_projection_csv(const std::vector<ProjectedPoint>& points, const LabelSpace& labels,
                                 const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write projection file " + path);
  out << "row_id,label,pc1,pc2\n";
  char buf[128];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, ",%.9g,%.9g\n", p.x, p.y);
    out << p.row_id << ',' << labels.names.at(p.label) << buf;
  }
}

}  // namespace maskfew
