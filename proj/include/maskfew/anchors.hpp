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

// Anchor selection: base samples close to their own class center and far
// from the novel shots.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "maskfew/errors.hpp"

namespace maskfew {

/// Row-major feature rows with one label and one dataset row id per row.
struct FeatureMatrix {
  std::size_t dim = 0;
  std::vector<double> values;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> row_ids;

  std::size_t rows() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }

  void append(std::span<const double> feature, std::size_t label, std::size_t row_id) {
    if (dim == 0) dim = feature.size();
    if (feature.size() != dim) throw DataError("feature row of width " + std::to_string(feature.size()) +
                                               " in a matrix of width " + std::to_string(dim));
    for (double v : feature) {
      if (!std::isfinite(v)) throw DataError("non-finite feature for row " + std::to_string(row_id));
    }
    values.insert(values.end(), feature.begin(), feature.end());
    labels.push_back(label);
    row_ids.push_back(row_id);
  }
};

struct ClassCenters {
  std::size_t dim = 0;
  std::vector<std::size_t> labels;  // ascending
  std::vector<double> values;

  std::span<const double> center(std::size_t i) const { return {values.data() + i * dim, dim}; }
  std::span<const double> center_of(std::size_t label) const {
    auto it = std::lower_bound(labels.begin(), labels.end(), label);
    if (it == labels.end() || *it != label) throw DataError("no center for class " + std::to_string(label));
    return center(static_cast<std::size_t>(it - labels.begin()));
  }
};

enum class NovelDistanceMode { mean, min };

struct AnchorEntry {
  std::size_t row_id = 0;
  double score = 0.0;  // d_base - d_novel
  double d_base = 0.0;
  double d_novel = 0.0;
};

/// Selected anchors per base class, each list sorted by (score, row_id).
struct AnchorSet {
  std::map<std::size_t, std::vector<AnchorEntry>> per_class;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [label, entries] : per_class) n += entries.size();
    return n;
  }

  std::vector<std::size_t> row_ids() const {
    std::vector<std::size_t> out;
    for (const auto& [label, entries] : per_class)
      for (const AnchorEntry& e : entries) out.push_back(e.row_id);
    return out;
  }
};

inline double euclidean(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Per-class arithmetic mean of the feature rows.
inline ClassCenters class_centers(const FeatureMatrix& base) {
  if (base.rows() == 0) throw DataError("class centers of an empty feature matrix");
  std::map<std::size_t, std::pair<std::vector<double>, std::size_t>> sums;
  for (std::size_t r = 0; r < base.rows(); ++r) {
    auto& [acc, count] = sums[base.labels[r]];
    if (acc.empty()) acc.assign(base.dim, 0.0);
    const auto x = base.row(r);
    for (std::size_t c = 0; c < base.dim; ++c) acc[c] += x[c];
    ++count;
  }
  ClassCenters centers;
  centers.dim = base.dim;
  for (auto& [label, entry] : sums) {
    auto& [acc, count] = entry;
    centers.labels.push_back(label);
    for (double v : acc) centers.values.push_back(v / static_cast<double>(count));
  }
  return centers;
}

/// Distance of every base row to its class center (d_base), aggregated
/// distance to the novel rows (d_novel), then the K rows with the lowest
/// d_base - d_novel per class.
inline AnchorSet select_anchors(const FeatureMatrix& base, const FeatureMatrix& novel, std::size_t k,
                                NovelDistanceMode mode = NovelDistanceMode::mean) {
  if (novel.rows() == 0) throw ContractError("anchor selection needs at least one novel sample");
  if (k == 0) throw ContractError("anchor selection needs K >= 1");
  if (base.rows() > 0 && novel.dim != base.dim) throw DataError("base and novel features differ in width");
  if (std::set<std::size_t>(base.row_ids.begin(), base.row_ids.end()).size() != base.row_ids.size()) {
    throw ContractError("base feature matrix has duplicate row ids");
  }
  const ClassCenters centers = class_centers(base);

  std::map<std::size_t, std::vector<AnchorEntry>> candidates;
  for (std::size_t r = 0; r < base.rows(); ++r) {
    const auto x = base.row(r);
    AnchorEntry e;
    e.row_id = base.row_ids[r];
    e.d_base = euclidean(x, centers.center_of(base.labels[r]));
    if (mode == NovelDistanceMode::mean) {
      double total = 0.0;
      for (std::size_t j = 0; j < novel.rows(); ++j) total += euclidean(x, novel.row(j));
      e.d_novel = total / static_cast<double>(novel.rows());
    } else {
      e.d_novel = euclidean(x, novel.row(0));
      for (std::size_t j = 1; j < novel.rows(); ++j) e.d_novel = std::min(e.d_novel, euclidean(x, novel.row(j)));
    }
    e.score = e.d_base - e.d_novel;
    candidates[base.labels[r]].push_back(e);
  }

  AnchorSet out;
  for (auto& [label, entries] : candidates) {
    std::sort(entries.begin(), entries.end(), [](const AnchorEntry& a, const AnchorEntry& b) {
      return a.score != b.score ? a.score < b.score : a.row_id < b.row_id;
    });
    if (entries.size() > k) entries.resize(k);
    out.per_class.emplace(label, std::move(entries));
  }
  return out;
}

}  // namespace maskfew
