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
#include <random>

#include "doctest.h"
#include "kvlab/scoring.hpp"
#include "support/fixtures.hpp"
#include "support/reference_model.hpp"

using namespace kvlab;
using namespace kvlab::testing;

namespace {

// Largest deviation between library scores and reference column means.
double ref_gap(const ImportanceScores& s, const RefResult& ref, std::size_t r0, std::size_t r1) {
  double worst = 0.0;
  for (std::size_t l = 0; l < s.n_layers; ++l) {
    for (std::size_t h = 0; h < s.n_heads; ++h) {
      const auto want = ref_column_means(ref, l, h, r0, r1, s.n_cols);
      const auto got = s.row(l, h);
      for (std::size_t j = 0; j < s.n_cols; ++j) worst = std::max(worst, std::abs(got[j] - want[j]));
    }
  }
  return worst;
}

template <typename T>
void zero_weight(const Model<T>& m, std::size_t layer, LinearKind kind) {
  Tensor<T> w = m.layer(layer)[kind];
  for (auto& v : w.mutable_data()) v = T(0);
}

ImportanceScores kv_scores(std::size_t heads, std::size_t cols, std::vector<double> v) {
  auto s = ImportanceScores::zeros(HeadSpace::Query, 1, heads, cols);
  s.values = std::move(v);
  return s;
}

}  // namespace

TEST_CASE("ground truth against the eager oracle") {
  std::mt19937_64 rng(31);
  const ModelConfig c = tiny_config();
  const auto m64 = Model<double>::build(c);
  const auto m32 = Model<float>::build(c);
  for (std::size_t n_out : {1, 2, 5}) {
    const auto X = random_tokens(rng, 17, c.vocab_size), Y = random_tokens(rng, n_out, c.vocab_size);
    std::vector<int> XY = X;
    XY.insert(XY.end(), Y.begin(), Y.end());
    const auto ref = reference_forward<double>(m64, nullptr, XY);
    const auto s = gt_importance(m64, X, Y);
    CHECK(s.head_space == HeadSpace::Query);
    CHECK(s.n_cols == X.size());
    CHECK(ref_gap(s, ref, X.size(), XY.size()) < 1e-12);
    CHECK(ref_gap(gt_importance(m32, X, Y), ref, X.size(), XY.size()) < 1e-6);
    CHECK(ref_gap(gt_importance(m32, X, Y, 4), ref, X.size(), XY.size()) < 1e-6);
  }
  CHECK_THROWS_AS(gt_importance(m64, std::vector<int>{1, 2}, std::vector<int>{}), ContractError);
}

TEST_CASE("uniform attention gives uniform scores") {
  ModelConfig c = tiny_config();
  c.n_layers = 1;
  const auto m = Model<double>::build(c);
  zero_weight(m, 0, LinearKind::Q);
  const std::vector<int> X = {4, 9, 2, 7}, Y = {5};
  const auto s = gt_importance(m, X, Y);
  for (double v : s.values) CHECK(v == doctest::Approx(0.2));

  // Identical keys: every column is equally important.
  const auto m2 = Model<double>::build(c);
  zero_weight(m2, 0, LinearKind::K);
  const auto s2 = gt_importance(m2, X, std::vector<int>{5, 6});
  for (std::size_t h = 0; h < s2.n_heads; ++h) {
    const auto r = s2.row(0, h);
    for (double v : r) CHECK(v == doctest::Approx(r[0]));
  }
}

TEST_CASE("surrogate suffix window") {
  std::mt19937_64 rng(32);
  const ModelConfig c = tiny_config();
  const auto m = Model<double>::build(c);
  const auto X = random_tokens(rng, 6, c.vocab_size);
  const auto ref = reference_forward<double>(m, nullptr, X);
  const auto s = surrogate_importance(m, X, WindowSpec::suffix_of(2));
  CHECK(s.n_cols == 4);
  CHECK(ref_gap(s, ref, 4, 6) < 1e-12);

  const auto one = surrogate_importance(m, X, WindowSpec::suffix_of(5));
  CHECK(one.n_cols == 1);
  for (double v : one.values) CHECK(v > 0.0);

  CHECK_THROWS_AS(surrogate_importance(m, X, WindowSpec::suffix_of(6)), InputError);
  CHECK_THROWS_AS(surrogate_importance(m, X, WindowSpec::suffix_of(9)), InputError);
  CHECK_THROWS_AS(surrogate_importance(m, X, WindowSpec{}), InputError);
}

TEST_CASE("appended window of the response equals ground truth") {
  std::mt19937_64 rng(33);
  const ModelConfig c = tiny_config();
  const auto m = Model<double>::build(c);
  const auto X = random_tokens(rng, 12, c.vocab_size), Y = random_tokens(rng, 4, c.vocab_size);
  const auto gt = gt_importance(m, X, Y);
  CHECK(surrogate_importance(m, X, WindowSpec::appended_tokens(Y)) == gt);
  const auto pre = forward_prefill<double>(m, nullptr, X);
  const auto app = appended_window_importance(m, pre.cache, X.size(), Y);
  CHECK(max_abs_diff(app.values, gt.values) < 1e-12);
  CHECK(pre.cache.size(0, 0) == X.size());
}

TEST_CASE("lookahead scores against the eager oracle") {
  std::mt19937_64 rng(34);
  const ModelConfig c = tiny_config();
  const auto m = Model<double>::build(c);
  auto la = LookaheadParams<double>::init(c, tiny_lookahead(4));
  const auto X = random_tokens(rng, 15, c.vocab_size);
  {
    const auto ref = reference_forward(m, &la, X);
    CHECK(ref_gap(lookahead_importance(m, la, X), ref, X.size(), X.size() + 4) < 1e-12);
  }
  la.randomize_adapters(5, 0.5);
  const auto ref = reference_forward(m, &la, X);
  const auto s = lookahead_importance(m, la, X);
  CHECK(ref_gap(s, ref, X.size(), X.size() + 4) < 1e-12);
  CHECK(lookahead_importance(m, la, X) == s);

  const auto long_x = random_tokens(rng, c.max_seq_len - 2, c.vocab_size);
  CHECK_THROWS_AS(lookahead_importance(m, la, long_x), InputError);
}

TEST_CASE("content-only attention permutes with the prompt") {
  ModelConfig c = tiny_config();
  c.n_layers = 1;
  c.rope_enabled = false;
  const auto m = Model<double>::build(c);
  const auto la = LookaheadParams<double>::init(c, tiny_lookahead(3));
  const std::vector<int> X = {5, 8, 11, 2, 19, 7};
  std::vector<int> P = X;
  std::swap(P[1], P[4]);
  const auto a = lookahead_importance(m, la, X);
  const auto b = lookahead_importance(m, la, P);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const auto ra = a.row(0, h), rb = b.row(0, h);
    CHECK(ra[1] == doctest::Approx(rb[4]).epsilon(1e-12));
    CHECK(ra[4] == doctest::Approx(rb[1]).epsilon(1e-12));
    CHECK(ra[0] == doctest::Approx(rb[0]).epsilon(1e-12));
  }
}

TEST_CASE("scores are probabilities") {
  std::mt19937_64 rng(35);
  const ModelConfig c = tiny_config();
  const auto m = Model<float>::build(c);
  const auto X = random_tokens(rng, 30, c.vocab_size), Y = random_tokens(rng, 6, c.vocab_size);
  for (const auto& s : {gt_importance(m, X, Y), surrogate_importance(m, X, WindowSpec::suffix_of(8))}) {
    for (std::size_t l = 0; l < s.n_layers; ++l) {
      for (std::size_t h = 0; h < s.n_heads; ++h) {
        double total = 0.0;
        for (double v : s.row(l, h)) {
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
          total += v;
        }
        CHECK(total <= 1.0 + 1e-6);
      }
    }
  }
}

TEST_CASE("gqa mean reduction") {
  const auto s = kv_scores(4, 2, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto r = gqa_mean_reduce(s, 4, 2);
  CHECK(r.head_space == HeadSpace::KV);
  CHECK(r.values == std::vector<double>{2, 3, 6, 7});
  const auto same = gqa_mean_reduce(s, 4, 4);
  CHECK(same.values == s.values);
  CHECK_THROWS_AS(gqa_mean_reduce(r, 2, 1), ContractError);
  CHECK_THROWS_AS(gqa_mean_reduce(s, 6, 2), ContractError);

  std::mt19937_64 rng(36);
  auto big = ImportanceScores::zeros(HeadSpace::Query, 3, 8, 10);
  big.values = random_vector(rng, big.values.size());
  const auto red = gqa_mean_reduce(big, 8, 2);
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t g = 0; g < 2; ++g) {
      for (std::size_t j = 0; j < 10; ++j) {
        double acc = 0.0;
        for (std::size_t h = g * 4; h < g * 4 + 4; ++h) acc += big.row(l, h)[j];
        CHECK(red.row(l, g)[j] == acc / 4.0);
      }
    }
  }
}

TEST_CASE("max pooling") {
  const std::vector<double> v = {1, 5, 2, 0, 3};
  CHECK(maxpool1d(v, 1) == v);
  CHECK(maxpool1d(v, 3) == std::vector<double>{5, 5, 5, 3, 3});
  CHECK_THROWS_AS(maxpool1d(v, 4), ConfigError);
  CHECK_THROWS_AS(maxpool1d(v, 0), ConfigError);

  std::mt19937_64 rng(37);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_vector(rng, 1 + static_cast<std::size_t>(trial) * 3);
    const auto y = maxpool1d(x, 7);
    for (std::size_t j = 0; j < x.size(); ++j) {
      const std::size_t lo = j >= 3 ? j - 3 : 0, hi = std::min(x.size(), j + 4);
      CHECK(y[j] == *std::max_element(x.begin() + static_cast<std::ptrdiff_t>(lo),
                                      x.begin() + static_cast<std::ptrdiff_t>(hi)));
    }
  }
}

TEST_CASE("l1 normalization") {
  CHECK(l1_normalize(std::vector<double>{2, 2}) == std::vector<double>{0.5, 0.5});
  const std::vector<double> n = {0.1, 0.2, 0.7};
  CHECK(max_abs_diff(l1_normalize(n), n) < 1e-12);
  CHECK_THROWS_AS(l1_normalize(std::vector<double>{0, 0}), ContractError);
  std::mt19937_64 rng(38);
  const auto x = random_vector(rng, 50, 0.01, 3.0);
  double total = 0.0;
  for (double v : x) total += v;
  const auto y = l1_normalize(x);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(y[i] == x[i] / total);
    s += y[i];
  }
  CHECK(std::abs(s - 1.0) < 1e-9);
}

TEST_CASE("combining with suffix scores") {
  const auto a = kv_scores(1, 2, {1, 0}), b = kv_scores(1, 2, {0, 1});
  CHECK(combine_with_suffix(a, b).values == std::vector<double>{0.5, 0.5});
  CHECK(combine_with_suffix(a, a) == a);
  CHECK_THROWS_AS(combine_with_suffix(a, kv_scores(1, 3, {0, 0, 1})), DimensionError);
  std::mt19937_64 rng(39);
  auto x = kv_scores(2, 5, random_vector(rng, 10)), y = kv_scores(2, 5, random_vector(rng, 10));
  const auto z = combine_with_suffix(x, y);
  for (std::size_t i = 0; i < 10; ++i) CHECK(z.values[i] == (x.values[i] + y.values[i]) / 2.0);
}

TEST_CASE("blockwise cross scores") {
  std::mt19937_64 rng(40);
  const ModelConfig c = tiny_config();
  const auto m32 = Model<float>::build(c);
  const auto m64 = Model<double>::build(c);
  const auto tokens = random_tokens(rng, 64, c.vocab_size);
  const auto ref = reference_forward<double>(m64, nullptr, tokens);
  const auto cs = blockwise_cross_scores(m32, tokens, 8);
  CHECK(cs.scores.n_cols == 56);
  CHECK(ref_gap(cs.scores, ref, 56, 64) < 1e-6);
  CHECK(cs.peak_prob_elements <= 8 * 64 * c.n_heads);
  CHECK(cs.peak_prob_elements > 0);

  const auto eager = surrogate_importance(m64, tokens, WindowSpec::suffix_of(8));
  CHECK(max_abs_diff(blockwise_cross_scores(m64, tokens, 8).scores.values, eager.values) < 1e-12);
  const auto whole = blockwise_cross_scores(m64, tokens, 63);
  CHECK(max_abs_diff(whole.scores.values, surrogate_importance(m64, tokens, WindowSpec::suffix_of(63)).values) < 1e-12);
}

TEST_CASE("eviction pipeline order") {
  std::mt19937_64 rng(41);
  auto s = ImportanceScores::zeros(HeadSpace::Query, 2, 4, 12);
  s.values = random_vector(rng, s.values.size());
  const auto e = eviction_scores(s, 4, 2, 3);
  CHECK(e == maxpool_scores(gqa_mean_reduce(s, 4, 2), 3));
}

TEST_CASE("score jsonl round trip") {
  std::mt19937_64 rng(42);
  auto s = ImportanceScores::zeros(HeadSpace::KV, 2, 3, 7);
  s.values = random_vector(rng, s.values.size());
  CHECK(scores_from_jsonl(scores_to_jsonl(s)) == s);
  CHECK_THROWS_AS(scores_from_jsonl("{\"layer\":0}\n"), InputError);
  CHECK_THROWS_AS(scores_from_jsonl("not json\n"), InputError);
  CHECK_THROWS_AS(scores_from_jsonl(""), InputError);
}
