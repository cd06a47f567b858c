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

// Experiment configuration and evaluation reports.
//
// An experiment file is a flat key/value file whose keys carry a section
// prefix, e.g. `model.n_layers = 4` or `eval.budgets = 16,32`. Sections:
// model, lookahead, draft, data, train, evict, eval, cost, artifacts.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kvlab/costmodel.hpp"
#include "kvlab/eviction.hpp"
#include "kvlab/generation.hpp"
#include "kvlab/kvconfig.hpp"
#include "kvlab/model.hpp"
#include "kvlab/training.hpp"

namespace kvlab {

inline constexpr int kReportSchemaVersion = 1;

struct EvalSpec {
  std::vector<Policy> policies;
  std::vector<std::size_t> budgets = {16, 32};
  /// k values for score recall; empty means the budgets.
  std::vector<std::size_t> recall_ks;
  /// 0 evaluates every sample of the corpus.
  std::size_t max_samples = 0;
  bool dump_scores = false;
};

struct CostSpec {
  ArchSpec arch = ArchSpec::llama31_8b();
  HardwareProfile hw;
  MethodParams params;
  std::size_t context_len = 8192;
};

struct Artifacts {
  std::string model_weights;
  std::string draft_weights;
  std::string params;
  std::string train_corpus;
  std::string eval_corpus;
};

struct ExperimentConfig {
  ModelConfig model;
  LookaheadConfig lookahead;
  std::optional<ModelConfig> draft;
  CorpusSpec data;
  Origin origin = Origin::SourceResponse;
  GenSpec gen;
  std::size_t test_samples = 200;
  std::uint64_t test_seed = 1;
  TrainConfig train;
  EvictionConfig evict;
  EvalSpec eval;
  CostSpec cost;
  Artifacts artifacts;
  /// Every non-artifact key as given, for echoing into reports.
  std::map<std::string, std::string> echo;

  static ExperimentConfig parse(const KeyValueConfig& kv);
  static ExperimentConfig load(const std::string& path);

  /// Derives every seed from one base seed.
  void apply_seed(std::uint64_t seed);
};

struct PolicyMetrics {
  std::string policy;
  std::size_t budget = 0;
  std::size_t n_samples = 0;
  double retained_recall = 0.0;
  std::map<std::size_t, double> recall_at_k;
  std::optional<double> kendall_tau;
  double attn_output_l2 = 0.0;
  double task_accuracy = 0.0;
  std::optional<double> overhead_ms;

  bool operator==(const PolicyMetrics&) const = default;
};

struct MetricsReport {
  int schema_version = kReportSchemaVersion;
  std::string precision;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config;
  std::string model_checksum;
  std::string params_checksum;
  std::string corpus_checksum;
  std::size_t n_samples = 0;
  std::vector<PolicyMetrics> results;

  bool operator==(const MetricsReport&) const = default;
};

/// Cost-model method standing in for an eviction policy, if any.
std::optional<CostMethod> cost_method_for(Policy p);

/// Model weights from `artifacts.model_weights`, else built from the seed.
template <typename T>
Model<T> load_or_build_model(const ExperimentConfig& cfg);

template <typename T>
std::optional<Model<T>> load_or_build_draft(const ExperimentConfig& cfg);

/// Evaluates every (policy, budget) on the evaluation corpus. When
/// `score_dir` is non-empty and dumping is enabled, per-sample ground-truth
/// and policy scores are written there as JSONL.
template <typename T>
MetricsReport run_experiment(const ExperimentConfig& cfg, const std::string& precision, std::uint64_t seed,
                             const std::string& score_dir = "");

/// Recall of `est` against `gt` over the columns `est` covers.
double score_recall(std::span<const double> gt, std::span<const double> est, std::size_t k);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);
std::string report_to_csv(const MetricsReport& report);

/// File name -> SVG: recall and accuracy against budget, and the
/// recall-versus-overhead trade-off.
std::map<std::string, std::string> report_plots(const MetricsReport& report);

/// Writes report.json, results.csv and the plots into `dir`.
void write_report_dir(const MetricsReport& report, const std::string& dir);

/// FNV-1a of a byte string, as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace kvlab
