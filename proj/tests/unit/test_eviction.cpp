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
#include <numeric>
#include <random>
#include <set>

#include <json.hpp>

#include "doctest.h"
#include "kvlab/eviction.hpp"
#include "kvlab/generation.hpp"
#include "kvlab/metrics.hpp"
#include "support/fixtures.hpp"
#include "support/reference_model.hpp"

using namespace kvlab;
using namespace kvlab::testing;

namespace {

// Sort-based top-k honoring the smaller-index tie rule.
std::vector<std::size_t> sort_topk(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(std::min(k, v.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Reference column means for rows [r0, r1), reduced to kv heads and pooled.
std::vector<std::vector<double>> staged_scores(const RefResult& ref, const ModelConfig& c, std::size_t r0,
                                               std::size_t r1, std::size_t n_cols, std::size_t kernel) {
  std::vector<std::vector<double>> out;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
      std::vector<double> acc(n_cols, 0.0);
      for (std::size_t h = g * c.group_size(); h < (g + 1) * c.group_size(); ++h) {
        const auto s = ref_column_means(ref, l, h, r0, r1, n_cols);
        for (std::size_t j = 0; j < n_cols; ++j) acc[j] += s[j] / static_cast<double>(c.group_size());
      }
      out.push_back(maxpool1d(acc, kernel));
    }
  }
  return out;
}

template <typename T>
std::vector<T> decode_after(const Model<T>& m, KVCache<T> cache, int token, std::int64_t pos) {
  return decode_step(m, cache, token, pos);
}

}  // namespace

TEST_CASE("select topk") {
  CHECK(select_topk(std::vector<double>{0.1, 0.4, 0.2, 0.3}, 2) == std::vector<std::size_t>{1, 3});
  CHECK(select_topk(std::vector<double>{0.1, 0.4}, 5) == std::vector<std::size_t>{0, 1});
  CHECK(select_topk(std::vector<double>{1, 1, 1}, 2) == std::vector<std::size_t>{0, 1});
  CHECK_THROWS_AS(select_topk(std::vector<double>{}, 1), InputError);

  std::mt19937_64 rng(51);
  std::uniform_int_distribution<int> coarse(0, 5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + static_cast<std::size_t>(trial % 40));
    for (auto& x : v) x = coarse(rng) * 0.25;
    const std::size_t k = 1 + static_cast<std::size_t>(trial) % v.size();
    const auto got = select_topk(v, k);
    CHECK(got == sort_topk(v, k));
    std::vector<double> scaled = v;
    for (auto& x : scaled) x *= 3.7;
    CHECK(select_topk(scaled, k) == got);
  }
}

TEST_CASE("pyramid budgets") {
  CHECK(pyramid_budgets(1, 64, 0.5, 9) == std::vector<std::size_t>{64});
  const auto b = pyramid_budgets(4, 64, 0.5, 9);
  CHECK(b == std::vector<std::size_t>{96, 74, 54, 32});
  CHECK(std::accumulate(b.begin(), b.end(), std::size_t{0}) == 256);
  const auto floored = pyramid_budgets(4, 20, 0.9, 17);
  CHECK(std::accumulate(floored.begin(), floored.end(), std::size_t{0}) == 80);
  for (auto v : floored) CHECK(v >= 17);
  for (std::size_t L : {2, 3, 5, 8}) {
    const auto p = pyramid_budgets(L, 40, 0.5, 9);
    CHECK(std::accumulate(p.begin(), p.end(), std::size_t{0}) == L * 40);
    CHECK(std::is_sorted(p.rbegin(), p.rend()));
  }
}

TEST_CASE("streaming selection") {
  const auto r = streaming_retained(2, 2, 10, 6, 4);
  for (const auto& s : r.indices) CHECK(s == std::vector<std::size_t>{0, 1, 2, 3, 8, 9});
  CHECK(streaming_retained(1, 1, 10, 12, 4) == RetainedSet::all(1, 1, 10));
  CHECK_THROWS_AS(streaming_retained(1, 1, 10, 4, 4), ConfigError);

  const ModelConfig c = tiny_config();
  const auto m = Model<float>::build(c);
  std::mt19937_64 rng(52);
  EvictionConfig cfg;
  cfg.budget = 12;
  const auto a = evict_streaming(m, random_tokens(rng, 30, c.vocab_size), cfg);
  const auto b = evict_streaming(m, random_tokens(rng, 30, c.vocab_size), cfg);
  CHECK(a.retained == b.retained);
}

TEST_CASE("compress cache") {
  std::mt19937_64 rng(53);
  const ModelConfig c = tiny_config();
  const auto m = Model<float>::build(c);
  const auto la = LookaheadParams<float>::init(c, tiny_lookahead(3));
  const auto X = random_tokens(rng, 20, c.vocab_size);
  const auto plain = forward_prefill<float>(m, nullptr, X);
  const auto with_la = forward_prefill(m, &la, X);

  const auto all = RetainedSet::all(c.n_layers, c.n_kv_heads, X.size());
  const auto kept = compress_cache(with_la.cache, all);
  CHECK(kept == plain.cache);
  CHECK(kept.n_lookahead_tail() == 0);
  CHECK(decode_after(m, kept, 3, 20) == decode_after(m, plain.cache, 3, 20));

  RetainedSet some = all;
  some.at(1, 0) = {0, 4, 19};
  const auto small = compress_cache(plain.cache, some);
  CHECK(small.size(1, 0) == 3);
  CHECK(small.positions(1, 0)[1] == 4);
  small.check_invariants();

  RetainedSet empty = all;
  empty.at(0, 1).clear();
  CHECK_THROWS_AS(compress_cache(plain.cache, empty), ContractError);
  RetainedSet outside = all;
  outside.at(0, 0) = {3, 20};
  CHECK_THROWS_AS(compress_cache(plain.cache, outside), ContractError);
  CHECK_THROWS_AS(compress_cache(plain.cache, RetainedSet::all(1, c.n_kv_heads, X.size())), ContractError);
}

TEST_CASE("lookahead eviction against a staged oracle") {
  ModelConfig c = tiny_config();
  c.n_layers = 1;
  const auto m = Model<double>::build(c);
  const auto la = LookaheadParams<double>::init(c, tiny_lookahead(4));
  std::mt19937_64 rng(54);
  const auto X = random_tokens(rng, 25, c.vocab_size);
  EvictionConfig cfg;
  cfg.budget = 9;
  cfg.pooling_kernel = 3;
  const auto r = evict_lookahead(m, la, X, cfg);
  const auto ref = reference_forward(m, &la, X);
  const auto staged = staged_scores(ref, c, X.size(), X.size() + 4, X.size(), 3);
  for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
    CHECK(r.retained.at(0, g) == sort_topk(staged[g], 9));
    CHECK(max_abs_diff(std::vector<double>(r.scores.row(0, g).begin(), r.scores.row(0, g).end()), staged[g]) <
          1e-12);
  }
  CHECK(r.cache.size(0, 0) == 9);
  CHECK(r.cache.n_lookahead_tail() == 0);
  CHECK(evict_lookahead(m, la, X, cfg).retained == r.retained);

  cfg.budget = 25;
  CHECK(evict_lookahead(m, la, X, cfg).retained == RetainedSet::all(1, c.n_kv_heads, 25));
}

TEST_CASE("snapkv against a staged oracle") {
  const ModelConfig c = tiny_config();
  const auto m = Model<double>::build(c);
  std::mt19937_64 rng(55);
  const auto X = random_tokens(rng, 30, c.vocab_size);
  EvictionConfig cfg;
  cfg.budget = 12;
  cfg.window = 5;
  cfg.pooling_kernel = 3;
  const auto r = evict_snapkv(m, X, cfg);
  const auto ref = reference_forward<double>(m, nullptr, X);
  const auto staged = staged_scores(ref, c, 25, 30, 25, 3);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
      auto want = sort_topk(staged[l * c.n_kv_heads + g], 7);
      for (std::size_t j = 25; j < 30; ++j) want.push_back(j);
      CHECK(r.retained.at(l, g) == want);
    }
  }
  cfg.window = 12;
  CHECK_THROWS_AS(evict_snapkv(m, X, cfg), ConfigError);
  cfg.window = 5;
  cfg.budget = 30;
  CHECK(evict_snapkv(m, X, cfg).retained == RetainedSet::all(c.n_layers, c.n_kv_heads, 30));
}

TEST_CASE("pyramidkv") {
  std::mt19937_64 rng(56);
  const auto X = random_tokens(rng, 60, 32);
  EvictionConfig cfg;
  cfg.budget = 16;
  cfg.window = 4;
  ModelConfig one = tiny_config();
  one.n_layers = 1;
  const auto m1 = Model<float>::build(one);
  CHECK(evict_pyramidkv(m1, X, cfg).retained == evict_snapkv(m1, X, cfg).retained);

  ModelConfig four = tiny_config();
  four.n_layers = 4;
  const auto m4 = Model<float>::build(four);
  const auto r = evict_pyramidkv(m4, X, cfg);
  const auto b = pyramid_budgets(4, 16, 0.5, 5);
  std::size_t total = 0;
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(r.retained.at(l, 0).size() == b[l]);
    CHECK(r.retained.at(l, 0).back() == 59);
    total += r.retained.at(l, 1).size();
  }
  CHECK(total == 64);
}

TEST_CASE("laq") {
  const ModelConfig c = tiny_config();
  const auto m = Model<float>::build(c);
  std::mt19937_64 rng(57);
  const auto X = random_tokens(rng, 40, c.vocab_size);
  EvictionConfig cfg;
  cfg.budget = 12;
  cfg.window = 4;
  cfg.draft_len = 0;
  CHECK(evict_laq(m, X, cfg).retained == evict_snapkv(m, X, cfg).retained);
  cfg.draft_len = 6;
  const auto r = evict_laq(m, X, cfg);
  CHECK(!r.draft.empty());
  CHECK(r.draft.size() <= 6);
  for (const auto& s : r.retained.indices) CHECK(s.size() == 12);
  cfg.budget = 40;
  CHECK(evict_laq(m, X, cfg).retained == RetainedSet::all(c.n_layers, c.n_kv_heads, 40));
}

TEST_CASE("speckv") {
  const ModelConfig c = tiny_config();
  const auto target = Model<double>::build(c);
  ModelConfig dc = c;
  dc.n_layers = 1;
  dc.rng_seed = 99;
  const auto draft = Model<double>::build(dc);
  std::mt19937_64 rng(58);
  const auto X = random_tokens(rng, 30, c.vocab_size);
  EvictionConfig cfg;
  cfg.budget = 10;
  cfg.draft_len = 5;
  cfg.pooling_kernel = 3;

  const auto r = evict_speckv(target, draft, X, cfg);
  GenSpec gen;
  gen.max_new_tokens = 5;
  const auto d = generate(draft, X, gen);
  CHECK(r.draft == d);
  std::vector<int> seq = X;
  seq.insert(seq.end(), d.begin(), d.end());
  const auto ref = reference_forward<double>(target, nullptr, seq);
  const auto staged = staged_scores(ref, c, X.size(), seq.size(), X.size(), 3);
  for (std::size_t s = 0; s < staged.size(); ++s) CHECK(r.retained.indices[s] == sort_topk(staged[s], 10));

  // Draft equal to the target: scores are the ground truth over the greedy response.
  const auto self = evict_speckv(target, target, X, cfg);
  const auto greedy = generate(target, X, gen);
  const auto gt = eviction_scores(gt_importance(target, X, greedy), c.n_heads, c.n_kv_heads, 3);
  CHECK(max_abs_diff(self.scores.values, gt.values) < 1e-12);

  ModelConfig other = c;
  other.vocab_size = 40;
  CHECK_THROWS_AS(evict_speckv(target, Model<double>::build(other), X, cfg), ConfigError);
}

TEST_CASE("identity eviction for every policy") {
  const ModelConfig c = tiny_config();
  const auto m = Model<float>::build(c);
  auto la = LookaheadParams<float>::init(c, tiny_lookahead(4));
  la.randomize_adapters(2, 0.2);
  ModelConfig dc = c;
  dc.rng_seed = 77;
  const auto draft = Model<float>::build(dc);
  std::mt19937_64 rng(59);
  const auto X = random_tokens(rng, 24, c.vocab_size), Y = random_tokens(rng, 3, c.vocab_size);
  const auto full = forward_prefill<float>(m, nullptr, X);
  const auto want = decode_after(m, full.cache, 5, 24);
  PolicyInputs<float> in{&la, &draft, Y};
  for (Policy p : {Policy::Lookahead, Policy::SnapKV, Policy::PyramidKV, Policy::Streaming, Policy::LAQ,
                   Policy::SpecKV, Policy::GT, Policy::Random}) {
    INFO(to_string(p));
    for (std::size_t budget : {24, 40}) {
      EvictionConfig cfg;
      cfg.budget = budget;
      cfg.window = 4;
      const auto r = evict(p, m, X, cfg, in);
      CHECK(r.retained == RetainedSet::all(c.n_layers, c.n_kv_heads, 24));
      CHECK(decode_after(m, r.cache, 5, 24) == want);
    }
  }
}

TEST_CASE("every policy keeps min(budget, n_in) sorted indices") {
  const ModelConfig c = tiny_config();
  const auto m = Model<float>::build(c);
  const auto la = LookaheadParams<float>::init(c, tiny_lookahead(4));
  std::mt19937_64 rng(60);
  const auto X = random_tokens(rng, 36, c.vocab_size), Y = random_tokens(rng, 4, c.vocab_size);
  PolicyInputs<float> in{&la, &m, Y};
  for (Policy p : {Policy::Lookahead, Policy::SnapKV, Policy::Streaming, Policy::LAQ, Policy::SpecKV, Policy::GT,
                   Policy::Random}) {
    INFO(to_string(p));
    EvictionConfig cfg;
    cfg.budget = 10;
    cfg.window = 4;
    cfg.draft_len = 4;
    const auto r = evict(p, m, X, cfg, in);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
        const auto& s = r.retained.at(l, g);
        CHECK(s.size() == 10);
        CHECK(std::is_sorted(s.begin(), s.end()));
        CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == s.size());
        CHECK(s.back() < 36);
        CHECK(r.cache.size(l, g) == 10);
      }
    }
    r.cache.check_invariants();
    CHECK(evict(p, m, X, cfg, in).retained == r.retained);
  }
  EvictionConfig cfg;
  cfg.budget = 10;
  CHECK_THROWS_AS(evict(Policy::Lookahead, m, X, cfg), ConfigError);
  CHECK_THROWS_AS(evict(Policy::SpecKV, m, X, cfg), ConfigError);
  CHECK_THROWS_AS(evict(Policy::GT, m, X, cfg), ContractError);
  CHECK_THROWS_AS(parse_policy("h2o"), ConfigError);
  CHECK(parse_policy("pyramidkv") == Policy::PyramidKV);
}

TEST_CASE("ground-truth retention beats random subsets") {
  ModelConfig c = tiny_config(8);
  c.qk_init_scale = 3.0;
  const auto m = Model<double>::build(c);
  std::mt19937_64 rng(61);
  const auto X = random_tokens(rng, 48, c.vocab_size), Y = random_tokens(rng, 6, c.vocab_size);
  const auto probes = response_probes(m, X, Y);
  const auto pre = forward_prefill<double>(m, nullptr, X);
  EvictionConfig cfg;
  cfg.budget = 16;
  cfg.pooling_kernel = 1;
  const auto gt = evict_gt(m, X, Y, cfg);
  const double gt_err = attn_output_error(m, pre.cache, gt.retained, probes);
  double total = 0.0;
  for (int i = 0; i < 100; ++i) {
    cfg.rng_seed = static_cast<std::uint64_t>(i);
    total += attn_output_error(m, pre.cache, evict_random(m, X, cfg).retained, probes);
  }
  CHECK(gt_err < total / 100.0);
}

TEST_CASE("retained set json") {
  RetainedSet r = RetainedSet::all(2, 1, 3);
  r.at(1, 0) = {0, 2};
  const auto j = nlohmann::json::parse(retained_to_json(r));
  REQUIRE(j.size() == 2);
  CHECK(j[1]["layer"] == 1);
  CHECK(j[1]["kv_head"] == 0);
  CHECK(j[1]["indices"].get<std::vector<std::size_t>>() == std::vector<std::size_t>{0, 2});
}
