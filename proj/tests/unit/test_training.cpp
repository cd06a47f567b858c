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

#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "kvlab/training.hpp"
#include "support/fixtures.hpp"

using namespace kvlab;
using namespace kvlab::testing;

namespace {

ImportanceScores scores_of(std::size_t heads, std::size_t cols, std::vector<double> v) {
  auto s = ImportanceScores::zeros(HeadSpace::Query, 1, heads, cols);
  s.values = std::move(v);
  return s;
}

std::vector<TrainSample> small_corpus(std::size_t n, std::uint64_t seed) {
  CorpusSpec spec;
  spec.n_samples = n;
  spec.prompt_len_min = 20;
  spec.prompt_len_max = 28;
  spec.vocab_size = 32;
  spec.rng_seed = seed;
  return build_needle_corpus(spec);
}

template <typename T>
std::vector<std::vector<T>> snapshot(const LookaheadParams<T>& la) {
  std::vector<std::vector<T>> out;
  for (const auto& t : la.parameters()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.steps = 100;
  cfg.warmup_frac = 0.1;
  CHECK(warmup_steps(cfg) == 10);
  CHECK(lr_at(cfg, 0) == 0.0);
  CHECK(lr_at(cfg, 5) == doctest::Approx(5e-3));
  CHECK(lr_at(cfg, 10) == doctest::Approx(1e-2));
  CHECK(lr_at(cfg, 99) < 1e-12);
  for (std::size_t s = 11; s < 100; ++s) CHECK(lr_at(cfg, s) <= lr_at(cfg, s - 1));
  cfg.warmup_frac = 0.02;
  CHECK(warmup_steps(cfg) == 2);
  cfg.steps = 10;
  CHECK(warmup_steps(cfg) == 1);
  cfg.warmup_frac = 0.0;
  CHECK(lr_at(cfg, 0) == doctest::Approx(1e-2));
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.warmup_frac = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.checkpoint_every = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_config(KeyValueConfig::parse("lr = 0.1\nlearning_rate = 2\n")), ConfigError);
  const auto parsed = TrainConfig::from_config(KeyValueConfig::parse("lr = 0.25\nsteps = 7\n"));
  CHECK(parsed.lr == 0.25);
  CHECK(parsed.steps == 7);
}

TEST_CASE("kl loss values") {
  const auto p = scores_of(1, 2, {0.5, 0.5});
  CHECK(std::abs(kl_loss(p, p, 1e-8)) < 1e-9);
  const auto q = scores_of(1, 2, {0.25, 0.75});
  const double want = 0.5 * std::log((0.5 + 1e-8) / (0.25 + 1e-8)) + 0.5 * std::log((0.5 + 1e-8) / (0.75 + 1e-8));
  CHECK(kl_loss(p, q, 1e-8) == doctest::Approx(want).epsilon(1e-12));
  CHECK(kl_loss(p, q, 1e-8) == doctest::Approx(0.143841).epsilon(1e-5));

  // Mean over heads.
  const auto p2 = scores_of(2, 2, {0.5, 0.5, 0.5, 0.5});
  const auto q2 = scores_of(2, 2, {0.25, 0.75, 0.5, 0.5});
  CHECK(kl_loss(p2, q2, 1e-8) == doctest::Approx(want / 2.0).epsilon(1e-12));

  CHECK_THROWS_AS(kl_loss(p, scores_of(1, 3, {1, 1, 1}), 1e-8), DimensionError);
  auto kv = p;
  kv.head_space = HeadSpace::KV;
  CHECK_THROWS_AS(kl_loss(kv, kv, 1e-8), ContractError);
}

TEST_CASE("kl loss properties") {
  std::mt19937_64 rng(71);
  for (int trial = 0; trial < 50; ++trial) {
    const auto g = scores_of(3, 9, random_vector(rng, 27, 0.0, 1.0));
    const auto e = scores_of(3, 9, random_vector(rng, 27, 0.0, 1.0));
    const double base = kl_loss(g, e, 1e-8);
    CHECK(base >= -1e-9);
    for (double c : {0.5, 3.0}) {
      auto scaled = g;
      for (auto& v : scaled.values) v *= c;
      CHECK(std::abs(kl_loss(scaled, e, 1e-8) - base) < 1e-9);
    }
    std::vector<std::vector<Tensor<double>>> rows(1);
    for (std::size_t h = 0; h < 3; ++h) {
      const auto r = e.row(0, h);
      rows[0].push_back(Tensor<double>::matrix(1, 9, std::vector<double>(r.begin(), r.end())));
    }
    CHECK(kl_loss_tensor<double>(g, rows, 1e-8).item() == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("loss gradient matches finite differences") {
  const ModelConfig c = tiny_config();
  const auto m = Model<double>::build(c);
  auto la = LookaheadParams<double>::init(c, tiny_lookahead(2));
  la.randomize_adapters(6, 0.05);
  const auto corpus = small_corpus(1, 3);
  const auto target = compute_gt_target(m, corpus[0], 2);
  const std::size_t n_in = corpus[0].X.size();
  const double err = finite_diff_check<double>([&] { return lookahead_loss(m, la, target, n_in, 1e-8); },
                                               la.parameters(), 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("zero learning rate keeps parameters") {
  const ModelConfig c = tiny_config();
  const auto m = Model<float>::build(c);
  auto la = LookaheadParams<float>::init(c, tiny_lookahead(3));
  const auto corpus = small_corpus(1, 4);
  TrainConfig cfg;
  auto opt = AdamState<float>::for_params(la);
  const auto before = snapshot(la);
  const double l1 = train_step(m, la, corpus[0], opt, cfg, 0.0);
  const double l2 = train_step(m, la, corpus[0], opt, cfg, 0.0);
  CHECK(l1 == l2);
  CHECK(snapshot(la) == before);
}

TEST_CASE("base weights stay frozen") {
  const ModelConfig c = tiny_config();
  const auto m = Model<float>::build(c);
  const auto sum_before = m.checksum();
  auto la = LookaheadParams<float>::init(c, tiny_lookahead(3));
  TrainConfig cfg;
  cfg.steps = 100;
  cfg.batch_size = 1;
  cfg.lr = 1e-2;
  const auto before = snapshot(la);
  train_loop(m, la, small_corpus(5, 5), cfg);
  CHECK(m.checksum() == sum_before);
  CHECK(snapshot(la) != before);
}

TEST_CASE("training loop") {
  const ModelConfig c = tiny_config();
  const auto m = Model<float>::build(c);
  const auto corpus = small_corpus(12, 6);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.lr = 1e-2;
  cfg.rng_seed = 3;

  cfg.steps = 0;
  auto idle = LookaheadParams<float>::init(c, tiny_lookahead(3));
  const auto before = snapshot(idle);
  CHECK(train_loop(m, idle, corpus, cfg).trace.empty());
  CHECK(snapshot(idle) == before);
  CHECK_THROWS_AS(train_loop(m, idle, std::vector<TrainSample>{}, cfg), ConfigError);

  cfg.steps = 12;
  auto a = LookaheadParams<float>::init(c, tiny_lookahead(3));
  auto b = LookaheadParams<float>::init(c, tiny_lookahead(3));
  const auto ra = train_loop(m, a, corpus, cfg);
  cfg.cache_gt = false;
  const auto rb = train_loop(m, b, corpus, cfg);
  CHECK(snapshot(a) == snapshot(b));
  REQUIRE(ra.trace.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(ra.trace[i].loss == rb.trace[i].loss);
    CHECK(ra.trace[i].step == i);
    CHECK(ra.trace[i].lr == lr_at(cfg, i));
  }
  const auto csv = trace_to_csv(ra.trace);
  CHECK(csv.rfind("step,lr,loss\n", 0) == 0);
}

TEST_CASE("checkpoint resume reproduces an uninterrupted run") {
  const std::string dir = scratch_dir("train");
  const ModelConfig c = tiny_config();
  const auto m = Model<float>::build(c);
  const auto corpus = small_corpus(8, 7);
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.lr = 5e-3;
  cfg.steps = 6;

  auto whole = LookaheadParams<float>::init(c, tiny_lookahead(3));
  train_loop(m, whole, corpus, cfg);

  // Interrupted run: the callback aborts after the step-3 checkpoint is written.
  TrainConfig first = cfg;
  first.checkpoint_every = 3;
  first.checkpoint_path = dir + "/mid.bin";
  auto part = LookaheadParams<float>::init(c, tiny_lookahead(3));
  struct Abort {};
  CHECK_THROWS_AS(train_loop(m, part, corpus, first,
                             [](const TrainRecord& r) {
                               if (r.step == 3) throw Abort{};
                             }),
                  Abort);

  TrainConfig resume = cfg;
  resume.resume_from = dir + "/mid.bin";
  auto resumed = LookaheadParams<float>::init(c, tiny_lookahead(3));
  const auto rr = train_loop(m, resumed, corpus, resume);
  CHECK(rr.start_step == 3);
  CHECK(rr.trace.size() == 3);
  CHECK(snapshot(resumed) == snapshot(whole));

  AdamState<float> opt;
  CHECK_THROWS_AS(load_checkpoint(dir + "/missing.bin", resumed, opt), ConfigError);
}

TEST_CASE("batch indices walk seeded epochs") {
  std::multiset<std::size_t> seen;
  for (std::size_t step = 0; step < 5; ++step) {
    for (auto i : batch_indices(10, 4, step, 9)) seen.insert(i);
  }
  for (std::size_t i = 0; i < 10; ++i) CHECK(seen.count(i) == 2);
  CHECK(batch_indices(10, 4, 3, 9) == batch_indices(10, 4, 3, 9));
  CHECK(batch_indices(10, 4, 0, 9) != batch_indices(10, 4, 0, 10));
  CHECK_THROWS_AS(batch_indices(0, 4, 0, 1), ConfigError);
}
