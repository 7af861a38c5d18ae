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

#include <cmath>
#include <random>

#include "maskfew/objective.hpp"
#include "test_support.hpp"

using namespace maskfew;
using maskfew::testing::check_gradients;
using maskfew::testing::random_tensor;

namespace {

const std::vector<std::size_t> kThreeOne{0, 0, 0, 1};

// Rows 0-2 share a label and direction; row 3 points along `last`.
Tensor four_rows(const std::vector<double>& last) {
  return Tensor::from({4, 2}, {1.0, 0.0, 2.0, 0.0, 0.5, 0.0, last[0], last[1]});
}

std::vector<double> copy(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("cross entropy fixtures", "[objective][ce]") {
  const std::vector<std::size_t> labels{0, 3};
  CHECK(std::abs(cross_entropy(Tensor::zeros({2, 4}), labels).item() - std::log(4.0)) < 1e-10);

  const Tensor sure = Tensor::from({1, 3}, {0.0, 1000.0, 0.0});
  CHECK(cross_entropy(sure, std::vector<std::size_t>{1}).item() < 1e-9);

  const Tensor hand = Tensor::from({2, 3}, {1.0, 2.0, 3.0, 0.5, -1.0, 2.0});
  CHECK(std::abs(cross_entropy(hand, std::vector<std::size_t>{2, 0}).item() - 1.0744586305507686) < 1e-10);

  CHECK_THROWS_AS(cross_entropy(hand, std::vector<std::size_t>{2, 3}), ClassError);
  CHECK_THROWS_AS(cross_entropy(hand, std::vector<std::size_t>{2}), DimensionError);
}

TEST_CASE("contrastive loss fixtures", "[objective][contrastive]") {
  // Three positive pairs at cos 1 against three negative pairs at cos 1 or -1.
  CHECK(std::abs(contrastive_loss(four_rows({3.0, 0.0}), kThreeOne).item() - std::log(2.0)) < 1e-6);
  CHECK(std::abs(contrastive_loss(four_rows({-1.0, 0.0}), kThreeOne).item() - 0.1269280110429726) < 1e-6);

  const Tensor f = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
  CHECK(contrastive_loss(f, std::vector<std::size_t>{1, 1}).item() == 0.0);
  CHECK(contrastive_loss(f, std::vector<std::size_t>{0, 1}).item() == 0.0);

  CHECK_THROWS_AS(contrastive_loss(Tensor::from({1, 2}, {1.0, 0.0}), std::vector<std::size_t>{0}), ContractError);
  CHECK_THROWS_AS(contrastive_loss(four_rows({0.0, 0.0}), kThreeOne), NumericError);
}

TEST_CASE("contrastive loss against a pair-by-pair oracle", "[objective][contrastive]") {
  std::mt19937_64 rng(61);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 2 + rng() % 8;
    const Tensor f = random_tensor({b, 5}, rng);
    std::vector<std::size_t> labels(b);
    for (auto& y : labels) y = rng() % 3;
    double pos = 0.0, neg = 0.0;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = i + 1; j < b; ++j) {
        double dot = 0.0, ni = 0.0, nj = 0.0;
        for (std::size_t c = 0; c < 5; ++c) {
          dot += f.at(i, c) * f.at(j, c);
          ni += f.at(i, c) * f.at(i, c);
          nj += f.at(j, c) * f.at(j, c);
        }
        (labels[i] == labels[j] ? pos : neg) += std::exp(dot / std::sqrt(ni * nj));
      }
    const double want = (pos == 0.0 || neg == 0.0) ? 0.0 : -std::log(pos / (pos + neg));
    CHECK(std::abs(contrastive_loss(f, labels).item() - want) < 1e-12);
  }
}

TEST_CASE("contrastive loss ignores positive rescaling and batch order", "[objective][contrastive][property]") {
  std::mt19937_64 rng(62);
  const std::vector<std::size_t> labels{0, 1, 0, 2, 1, 1};
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor f = random_tensor({6, 4}, rng);
    const double base = contrastive_loss(f, labels).item();

    std::vector<double> scaled = copy(f.values());
    for (std::size_t c = 0; c < 4; ++c) scaled[8 + c] *= 4.0;
    for (std::size_t c = 0; c < 4; ++c) scaled[c] *= 0.5;
    CHECK(contrastive_loss(Tensor::from({6, 4}, scaled), labels).item() == base);
    for (std::size_t c = 0; c < 4; ++c) scaled[12 + c] *= 3.7;
    CHECK(std::abs(contrastive_loss(Tensor::from({6, 4}, scaled), labels).item() - base) < 1e-12);

    std::vector<std::size_t> order{5, 2, 0, 4, 1, 3};
    std::vector<double> permuted;
    std::vector<std::size_t> permuted_labels;
    for (std::size_t i : order) {
      for (std::size_t c = 0; c < 4; ++c) permuted.push_back(f.at(i, c));
      permuted_labels.push_back(labels[i]);
    }
    CHECK(std::abs(contrastive_loss(Tensor::from({6, 4}, permuted), permuted_labels).item() - base) < 1e-12);
  }
}

TEST_CASE("total loss is the sum of its parts", "[objective][total]") {
  CHECK(total_loss(Tensor::from({2, 2}, {0.0, 1000.0, 1000.0, 0.0}), Tensor::from({2, 2}, {1.0, 0.0, 1.0, 0.0}),
                   std::vector<std::size_t>{1, 0})
            .item() < 1e-12);

  const Tensor logits = Tensor::zeros({4, 4});
  const Tensor features = four_rows({-1.0, 0.0});
  const double a = cross_entropy(logits, kThreeOne).item();
  const double b = contrastive_loss(features, kThreeOne).item();
  CHECK(std::abs(total_loss(logits, features, kThreeOne).item() - (a + b)) < 1e-12);
}

TEST_CASE("loss gradients match finite differences", "[objective][gradcheck]") {
  std::mt19937_64 rng(63);
  const std::vector<std::size_t> labels{0, 1, 1, 2, 0};
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor logits = random_tensor({5, 3}, rng);
    const Tensor features = random_tensor({5, 4}, rng);
    const auto ce = check_gradients([&] { return cross_entropy(logits, labels); }, {logits});
    const auto ct = check_gradients([&] { return contrastive_loss(features, labels); }, {features});
    const auto tot = check_gradients([&] { return total_loss(logits, features, labels); }, {logits, features});
    INFO(ce.first_failure << ct.first_failure << tot.first_failure);
    CHECK(ce.ok());
    CHECK(ct.ok());
    CHECK(tot.ok());
  }
}

TEST_CASE("total loss feature gradient is the sum of component gradients", "[objective][total]") {
  std::mt19937_64 rng(64);
  const std::vector<std::size_t> labels{0, 1, 1, 0};
  const Tensor logits = random_tensor({4, 2}, rng);
  const Tensor features = random_tensor({4, 3}, rng);

  backward(contrastive_loss(features, labels));
  const std::vector<double> component = copy(features.grad());
  zero_grads(std::vector<Tensor>{logits, features});
  backward(total_loss(logits, features, labels));
  const std::vector<double> total = copy(features.grad());
  for (std::size_t i = 0; i < total.size(); ++i) CHECK(std::abs(total[i] - component[i]) < 1e-12);
}

TEST_CASE("signsgd moves each coordinate by exactly lr", "[objective][optimizer]") {
  const Tensor p = Tensor::zeros({3}, true);
  backward(weighted_sum(p, std::vector<double>{2.0, -0.001, 0.0}));
  OptimizerState state = OptimizerState::signsgd(0.1);
  signsgd_step(std::vector<Tensor>{p}, state);
  CHECK(copy(p.values()) == std::vector<double>{-0.1, 0.1, 0.0});
  CHECK(state.step == 1);
}

TEST_CASE("adamw first step has magnitude lr", "[objective][optimizer]") {
  for (double g : {3.0, -0.5, 1e-3, -250.0}) {
    const Tensor p = Tensor::zeros({1}, true);
    backward(scale(sum(p), g));
    OptimizerState state = OptimizerState::adamw(0.1);
    adamw_step(std::vector<Tensor>{p}, state);
    CHECK(std::abs(p[0] - (g > 0 ? -0.1 : 0.1)) < 1e-6);
  }
}

TEST_CASE("adamw decay shrinks a zero-gradient parameter", "[objective][optimizer]") {
  const Tensor p = Tensor::from({2}, {2.0, -3.0}, true);
  backward(scale(sum(p), 0.0));
  OptimizerState state = OptimizerState::adamw(0.1, 0.01);
  adamw_step(std::vector<Tensor>{p}, state);
  CHECK(p[0] == 2.0 * (1.0 - 0.1 * 0.01));
  CHECK(p[1] == -3.0 * (1.0 - 0.1 * 0.01));
  REQUIRE(state.first_moment.size() == 1);
  CHECK(state.first_moment[0].size() == 2);
  CHECK(state.step == 1);
}

TEST_CASE("adamw matches a scalar reference over several steps", "[objective][optimizer]") {
  const Tensor p = Tensor::from({1}, {0.7}, true);
  OptimizerState state = OptimizerState::adamw(0.05, 0.02);
  double x = 0.7, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    // loss = x^2, gradient 2x
    zero_grads(std::vector<Tensor>{p});
    backward(sum(mul(p, p)));
    adamw_step(std::vector<Tensor>{p}, state);
    const double g = 2.0 * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    x = x * (1.0 - 0.05 * 0.02) - 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(std::abs(p[0] - x) < 1e-14);
  }
}

TEST_CASE("optimizer steps are deterministic and need gradients", "[objective][optimizer]") {
  std::mt19937_64 rng(65);
  const Tensor a = random_tensor({3, 2}, rng);
  const Tensor b = a.clone();
  b.set_requires_grad(true);
  for (int k = 0; k < 2; ++k) {
    OptimizerState sa = OptimizerState::adamw(0.01), sb = OptimizerState::adamw(0.01);
    backward(sum(mul(a, a)));
    backward(sum(mul(b, b)));
    optimizer_step(std::vector<Tensor>{a}, sa);
    optimizer_step(std::vector<Tensor>{b}, sb);
    CHECK(copy(a.values()) == copy(b.values()));
  }
  const Tensor fresh = Tensor::zeros({2}, true);
  OptimizerState s = OptimizerState::signsgd(0.1);
  CHECK_THROWS_AS(signsgd_step(std::vector<Tensor>{fresh}, s), ContractError);
  OptimizerState w = OptimizerState::adamw(0.1);
  CHECK_THROWS_AS(adamw_step(std::vector<Tensor>{fresh}, w), ContractError);
}

TEST_CASE("optimizer rejects non-finite results", "[objective][optimizer]") {
  const Tensor p = Tensor::from({1}, {1.0}, true);
  backward(sum(p));
  OptimizerState s = OptimizerState::signsgd(std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(signsgd_step(std::vector<Tensor>{p}, s), NumericError);
}
