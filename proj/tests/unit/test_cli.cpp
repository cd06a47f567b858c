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

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "kvlab/experiment.hpp"
#include "kvlab/metrics.hpp"
#include "kvlab/scoring.hpp"
#include "support/fixtures.hpp"

using namespace kvlab;
using namespace kvlab::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run kvlab_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kExperiment = R"(model.n_layers = 2
model.n_query_heads = 4
model.n_kv_heads = 2
model.d_model = 16
model.d_head = 4
model.d_ff = 32
model.vocab_size = 32
model.max_seq_len = 96
lookahead.n_lookahead = 4
lookahead.lora_rank = 2
data.task = needle
data.vocab_size = 32
data.n_samples = 12
data.prompt_len_min = 24
data.prompt_len_max = 40
data.test_samples = 4
train.steps = 6
train.batch_size = 4
evict.window = 4
evict.pooling_kernel = 1
eval.policies = lookahead,snapkv,pyramidkv,streaming,laq,speckv,gt,random
eval.budgets = 8,12
eval.dump_scores = true
draft.n_layers = 1
draft.n_query_heads = 4
draft.n_kv_heads = 2
draft.d_model = 16
draft.d_head = 4
draft.d_ff = 32
draft.vocab_size = 32
draft.max_seq_len = 96
)";

// Writes the experiment with artifact paths inside `dir`.
std::string write_experiment(const std::string& dir, const std::string& extra = "") {
  const std::string path = dir + "/exp.cfg";
  std::ofstream(path) << kExperiment << "artifacts.train_corpus = " << dir << "/train.jsonl\n"
                      << "artifacts.eval_corpus = " << dir << "/test.jsonl\n"
                      << "artifacts.params = " << dir << "/la.bin\n"
                      << extra;
  return path;
}

}  // namespace

TEST_CASE("experiment config parsing") {
  const auto cfg = ExperimentConfig::parse(KeyValueConfig::parse(kExperiment));
  CHECK(cfg.model.n_layers == 2);
  CHECK(cfg.lookahead.n_lookahead == 4);
  CHECK(cfg.eval.policies.size() == 8);
  CHECK(cfg.eval.budgets == std::vector<std::size_t>{8, 12});
  REQUIRE(cfg.draft.has_value());
  CHECK(cfg.draft->n_layers == 1);
  CHECK(cfg.test_samples == 4);
  CHECK(cfg.echo.count("model.n_layers") == 1);

  auto seeded = cfg;
  seeded.apply_seed(5);
  auto again = cfg;
  again.apply_seed(5);
  CHECK(seeded.model.rng_seed == again.model.rng_seed);
  CHECK(seeded.data.rng_seed == again.data.rng_seed);
  auto other = cfg;
  other.apply_seed(6);
  CHECK(other.model.rng_seed != seeded.model.rng_seed);

  CHECK_THROWS_AS(ExperimentConfig::parse(KeyValueConfig::parse("model.n_layrs = 2\n")), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse(KeyValueConfig::parse("nosection = 2\n")), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse(KeyValueConfig::parse("eval.policies = snapkv,h2o\n")), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/exp.cfg"), ConfigError);

  auto empty = cfg;
  empty.eval.policies.clear();
  CHECK_THROWS_AS(run_experiment<float>(empty, "f32", 1), ConfigError);
  CHECK_THROWS_AS(run_experiment<float>(cfg, "f32", 1), ConfigError);  // corpus artifact missing
}

TEST_CASE("cost methods for policies") {
  CHECK(cost_method_for(Policy::SnapKV) == CostMethod::SnapKV);
  CHECK(cost_method_for(Policy::Lookahead) == CostMethod::Lookahead);
  CHECK(cost_method_for(Policy::LAQ) == CostMethod::LAQ);
  CHECK(!cost_method_for(Policy::Random).has_value());
}

TEST_CASE("score recall over covered columns") {
  const std::vector<double> gt = {0.1, 0.9, 0.3, 0.8};
  CHECK(score_recall(gt, std::vector<double>{1.0, 0.0, 0.5}, 2) == 0.5);
  CHECK(score_recall(gt, gt, 2) == 1.0);
  CHECK_THROWS_AS(score_recall(std::vector<double>{1.0}, gt, 1), DimensionError);
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("command line exit codes") {
  const std::string dir = scratch_dir("cli_codes");
  const std::string cfg = write_experiment(dir);
  CHECK(kvlab_run({"--help"}).code == cli::kExitOk);
  CHECK(kvlab_run({"--bogus"}).code == cli::kExitConfig);
  CHECK(kvlab_run({"--precision", "f16", "cost"}).code == cli::kExitConfig);
  CHECK(kvlab_run({"--config", dir + "/missing.cfg", "gen-data", "--out", dir + "/x.jsonl"}).code ==
        cli::kExitConfig);
  CHECK(kvlab_run({"cost", "--lengths", "0"}).code == cli::kExitConfig);
  CHECK(kvlab_run({"cost", "--methods", "h2o"}).code == cli::kExitConfig);

  const auto cost = kvlab_run({"cost", "--lengths", "8192"});
  CHECK(cost.code == cli::kExitOk);
  CHECK(parse_cost_csv(cost.out).size() == 5);

  REQUIRE(kvlab_run({"--config", cfg, "gen-data", "--split", "test", "--out", dir + "/test.jsonl"}).code == 0);
  CHECK(kvlab_run({"--config", cfg, "evict", "--policy", "snapkv", "--budget", "2"}).code == cli::kExitConfig);
  CHECK(kvlab_run({"--config", cfg, "evict", "--sample", "99"}).code == cli::kExitConfig);
  const auto ok = kvlab_run({"--config", cfg, "evict", "--policy", "streaming", "--budget", "8"});
  CHECK(ok.code == cli::kExitOk);
  CHECK(ok.out.find("\"retained\"") != std::string::npos);

  // A response-free sample cannot be scored by the ground truth.
  std::ofstream(dir + "/empty.jsonl") << R"({"X":[5,6,7,8,9,10,11,12,13,14],"Y":[],"origin":"source-response","task":"needle"})"
                                      << "\n";
  const auto bad = kvlab_run({"--config", cfg, "evict", "--corpus", dir + "/empty.jsonl", "--policy", "gt",
                              "--budget", "6"});
  CHECK(bad.code == cli::kExitContract);
  CHECK(bad.err.find("contract violation") != std::string::npos);
}

TEST_CASE("full pipeline is deterministic") {
  const std::string dir = scratch_dir("cli_pipeline");
  const std::string cfg = write_experiment(dir);
  REQUIRE(kvlab_run({"--config", cfg, "gen-data", "--split", "train", "--out", dir + "/train.jsonl"}).code == 0);
  REQUIRE(kvlab_run({"--config", cfg, "gen-data", "--split", "test", "--out", dir + "/test.jsonl"}).code == 0);
  const auto tr = kvlab_run({"--config", cfg, "train", "--out", dir + "/la.bin", "--trace", dir + "/trace.csv"});
  REQUIRE(tr.code == 0);
  CHECK(fs::exists(dir + "/trace.csv"));

  const auto e1 = kvlab_run({"--config", cfg, "eval", "--out-dir", dir + "/r1"});
  const auto e2 = kvlab_run({"--config", cfg, "eval", "--out-dir", dir + "/r2"});
  REQUIRE(e1.code == 0);
  REQUIRE(e2.code == 0);
  const std::string json = read_file(dir + "/r1/report.json");
  CHECK(json == read_file(dir + "/r2/report.json"));
  CHECK(read_file(dir + "/r1/results.csv") == read_file(dir + "/r2/results.csv"));
  for (const char* svg : {"recall_vs_budget.svg", "accuracy_vs_budget.svg", "tradeoff.svg"}) {
    CHECK(read_file(fs::path(dir) / "r1" / svg).rfind("<svg", 0) == 0);
  }

  const auto report = report_from_json(json);
  CHECK(report.schema_version == kReportSchemaVersion);
  CHECK(report.n_samples == 4);
  CHECK(report.results.size() == 16);
  CHECK(report_to_json(report) == json);
  for (const auto& r : report.results) {
    CHECK(r.retained_recall >= 0.0);
    CHECK(r.retained_recall <= 1.0 + 1e-12);
    CHECK(r.attn_output_l2 >= 0.0);
    if (r.policy == "gt") CHECK(r.retained_recall == doctest::Approx(1.0));
  }

  // Recall of snapkv at budget 8, recomputed from the dumped scores.
  const fs::path scores = fs::path(dir) / "r1" / "scores";
  double sum = 0.0;
  for (std::size_t s = 0; s < report.n_samples; ++s) {
    const auto gt = scores_from_jsonl(read_file(scores / ("gt_s" + std::to_string(s) + ".jsonl")));
    const auto est = scores_from_jsonl(read_file(scores / ("snapkv_b8_s" + std::to_string(s) + ".jsonl")));
    double r = 0.0;
    for (std::size_t l = 0; l < gt.n_layers; ++l) {
      for (std::size_t g = 0; g < gt.n_heads; ++g) r += score_recall(gt.row(l, g), est.row(l, g), 8);
    }
    sum += r / static_cast<double>(gt.n_layers * gt.n_heads);
  }
  bool found = false;
  for (const auto& r : report.results) {
    if (r.policy != "snapkv" || r.budget != 8) continue;
    found = true;
    REQUIRE(r.recall_at_k.count(8) == 1);
    CHECK(r.recall_at_k.at(8) == doctest::Approx(sum / static_cast<double>(report.n_samples)).epsilon(1e-12));
  }
  CHECK(found);

  // Re-rendering a report reproduces it.
  REQUIRE(kvlab_run({"report", "--report", dir + "/r1/report.json", "--out-dir", dir + "/r3"}).code == 0);
  CHECK(read_file(dir + "/r3/report.json") == json);

  // f64 reports record their precision and differ from f32 only numerically.
  const auto e64 = kvlab_run({"--config", cfg, "--precision", "f64", "eval", "--out-dir", dir + "/r64"});
  REQUIRE(e64.code == 0);
  const auto r64 = report_from_json(read_file(dir + "/r64/report.json"));
  CHECK(r64.precision == "f64");
  CHECK(r64.results.size() == report.results.size());

  // A different seed changes the model.
  REQUIRE(kvlab_run({"--config", cfg, "--seed", "99", "eval", "--out-dir", dir + "/rs"}).code == 0);
  CHECK(report_from_json(read_file(dir + "/rs/report.json")).model_checksum != report.model_checksum);
}
