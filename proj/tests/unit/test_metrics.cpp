/*
 * Copyright 2026 The kvlab Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "kvlab/metrics.hpp"
#include "support/fixtures.hpp"

using namespace kvlab;
using namespace kvlab::testing;

namespace {

std::vector<std::size_t> brute_topk(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(k);
  return idx;
}

double brute_recall(const std::vector<double>& gt, const std::vector<double>& est, std::size_t k) {
  const auto a = brute_topk(gt, k);
  const auto b = brute_topk(est, k);
  const std::set<std::size_t> sa(a.begin(), a.end());
  std::size_t hit = 0;
  for (auto i : b) hit += sa.count(i);
  return static_cast<double>(hit) / static_cast<double>(k);
}

double brute_tau_b(const std::vector<double>& a, const std::vector<double>& b) {
  double conc = 0, disc = 0, ta = 0, tb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double da = a[i] - a[j], db = b[i] - b[j];
      if (da == 0 && db == 0) continue;
      if (da == 0) {
        ta += 1;
      } else if (db == 0) {
        tb += 1;
      } else if ((da > 0) == (db > 0)) {
        conc += 1;
      } else {
        disc += 1;
      }
    }
  }
  return (conc - disc) / std::sqrt((conc + disc + ta) * (conc + disc + tb));
}

// Values on a coarse grid so ties are common.
std::vector<double> coarse(std::mt19937_64& rng, std::size_t n, int levels) {
  std::uniform_int_distribution<int> d(0, levels - 1);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng) * 0.25;
  return v;
}

}  // namespace

TEST_CASE("recall examples") {
  const std::vector<double> gt = {0.9, 0.1, 0.5, 0.3};
  CHECK(recall_at_k(gt, gt, 2) == 1.0);
  CHECK(recall_at_k(gt, std::vector<double>{0.0, 1.0, 0.9, 0.0}, 2) == 0.5);
  CHECK(recall_at_k(gt, std::vector<double>{0.0, 1.0, 0.0, 0.9}, 2) == 0.0);
  CHECK(retained_recall(gt, std::vector<std::size_t>{0, 1, 2}, 2) == 1.0);
  CHECK(retained_recall(gt, std::vector<std::size_t>{3}, 1) == 0.0);
  CHECK_THROWS_AS(recall_at_k(gt, gt, 0), ContractError);
  CHECK_THROWS_AS(recall_at_k(gt, gt, 5), ContractError);
  CHECK_THROWS_AS(recall_at_k(gt, std::vector<double>{1.0}, 1), DimensionError);
}

TEST_CASE("recall matches a brute-force oracle") {
  std::mt19937_64 rng(91);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 40);
    const auto gt = trial % 2 ? coarse(rng, n, 4) : random_vector(rng, n, 0.0, 1.0);
    const auto est = trial % 3 ? coarse(rng, n, 3) : random_vector(rng, n, 0.0, 1.0);
    for (std::size_t k : {std::size_t{1}, n / 2 + 1, n}) {
      const double r = recall_at_k(gt, est, k);
      CHECK(r == brute_recall(gt, est, k));
      CHECK(r >= 0.0);
      CHECK(r <= 1.0);
    }
    CHECK(recall_at_k(gt, est, n) == 1.0);
  }
}

TEST_CASE("kendall tau examples") {
  const std::vector<double> a = {1, 2, 3, 4};
  CHECK(kendall_tau(a, a) == doctest::Approx(1.0));
  CHECK(kendall_tau(a, std::vector<double>{4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(kendall_tau(a, std::vector<double>{1, 3, 2, 4}) == doctest::Approx(4.0 / 6.0));
  // tau-b with ties: C=5, D=0, one tie on b.
  CHECK(kendall_tau(a, std::vector<double>{1, 1, 2, 3}) == doctest::Approx(5.0 / std::sqrt(6.0 * 5.0)));
  CHECK_THROWS_AS(kendall_tau(a, std::vector<double>{2, 2, 2, 2}), ContractError);
  CHECK_THROWS_AS(kendall_tau(std::vector<double>{1}, std::vector<double>{1}), ContractError);
  CHECK_THROWS_AS(kendall_tau(a, std::vector<double>{1, 2}), DimensionError);
  CHECK_THROWS_AS(kendall_tau(a, std::vector<double>{1, 2, NAN, 3}), ContractError);
}

TEST_CASE("kendall tau matches the quadratic definition") {
  std::mt19937_64 rng(92);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 3 + static_cast<std::size_t>(trial % 50);
    auto a = trial % 2 ? coarse(rng, n, 5) : random_vector(rng, n, -1.0, 1.0);
    auto b = trial % 3 ? coarse(rng, n, 4) : random_vector(rng, n, -1.0, 1.0);
    a[0] = -5.0;  // never constant
    b[1] = 7.0;
    const double t = kendall_tau(a, b);
    CHECK(t == doctest::Approx(brute_tau_b(a, b)).epsilon(1e-12));
    CHECK(kendall_tau(b, a) == doctest::Approx(t).epsilon(1e-12));
    auto neg = b;
    for (auto& x : neg) x = -x;
    CHECK(kendall_tau(a, neg) == doctest::Approx(-t).epsilon(1e-12));
    CHECK(std::abs(t) <= 1.0 + 1e-12);
  }
}

TEST_CASE("attention output error") {
  const ModelConfig c = tiny_config();
  const auto m = Model<double>::build(c);
  std::mt19937_64 rng(93);
  const auto X = random_tokens(rng, 24, c.vocab_size);
  const auto Y = random_tokens(rng, 4, c.vocab_size);
  const auto probes = response_probes(m, X, Y);
  REQUIRE(probes.queries.size() == c.n_layers);
  CHECK(probes.rows() == 4);

  const auto all = RetainedSet::all(c.n_layers, c.n_kv_heads, X.size());
  CHECK(attn_output_error(m, X, all, probes) == 0.0);

  auto some = all;
  for (auto& v : some.indices) v = {0, 5, 23};
  const double e = attn_output_error(m, X, some, probes);
  CHECK(e > 0.0);
  CHECK(std::isfinite(e));

  const auto mf = Model<float>::build(c);
  const double ef = attn_output_error(mf, X, some, response_probes(mf, X, Y));
  CHECK(ef == doctest::Approx(e).epsilon(1e-4));

  CHECK_THROWS_AS(response_probes(m, X, std::vector<int>{}), ContractError);
  CHECK_THROWS_AS(attn_output_error(m, X, all, AttnProbes<double>{}), ContractError);
}
