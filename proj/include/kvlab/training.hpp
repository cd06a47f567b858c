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

// Fitting lookahead parameters: the lookahead rows' attention onto the prompt
// is pulled towards the attention of the true response via a KL objective.
// Base weights are never written.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kvlab/generation.hpp"
#include "kvlab/kvconfig.hpp"
#include "kvlab/model.hpp"
#include "kvlab/scoring.hpp"

namespace kvlab {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  std::size_t batch_size = 32;
  double warmup_frac = 0.02;
  double grad_clip = 1.0;
  std::size_t steps = 100;
  double eps_kl = 1e-8;
  std::uint64_t rng_seed = 0;
  /// Keep ground-truth scores and prompt caches across steps.
  bool cache_gt = true;
  std::size_t checkpoint_every = 0;
  std::string checkpoint_path;
  std::string resume_from;

  void validate() const;
  static TrainConfig from_config(const KeyValueConfig& kv);
};

/// Number of warmup steps: round(warmup_frac * steps), at least one when the
/// fraction is positive.
std::size_t warmup_steps(const TrainConfig& cfg);

/// Linear warmup from 0 to `lr`, then cosine decay reaching 0 at the last step.
double lr_at(const TrainConfig& cfg, std::size_t step);

/// Mean over (layer, head) of KL(normalize(gt) || normalize(est)) with
/// smoothing inside the logarithm.
double kl_loss(const ImportanceScores& gt, const ImportanceScores& est, double eps);

/// The same loss as a taped scalar. `est_rows[layer][head]` are 1 x n_in
/// unnormalized score rows.
template <typename T>
Tensor<T> kl_loss_tensor(const ImportanceScores& gt, const std::vector<std::vector<Tensor<T>>>& est_rows, T eps);

/// Ground truth for one sample: query-head scores and the prompt cache.
template <typename T>
struct GtTarget {
  ImportanceScores scores;
  KVCache<T> prompt_cache;
};

template <typename T>
GtTarget<T> compute_gt_target(const Model<T>& model, const TrainSample& sample, std::size_t n_lookahead);

/// Taped loss for one sample given its target.
template <typename T>
Tensor<T> lookahead_loss(const Model<T>& model, const LookaheadParams<T>& la, const GtTarget<T>& target,
                         std::size_t n_in, T eps);

template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static AdamState for_params(const LookaheadParams<T>& la);
};

/// Gradient accumulation over `batch`, global-norm clipping and one Adam
/// update of the lookahead parameters. Returns the mean loss of the batch.
template <typename T>
double train_step(const Model<T>& model, LookaheadParams<T>& la, std::span<const GtTarget<T>* const> targets,
                  std::span<const TrainSample* const> batch, AdamState<T>& opt, const TrainConfig& cfg, double lr);

/// Convenience single-sample step.
template <typename T>
double train_step(const Model<T>& model, LookaheadParams<T>& la, const TrainSample& sample, AdamState<T>& opt,
                  const TrainConfig& cfg, double lr);

struct TrainRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<TrainRecord> trace;
  std::size_t start_step = 0;
};

/// Sample indices used at `step`: a fresh seeded permutation per epoch.
std::vector<std::size_t> batch_indices(std::size_t corpus_size, std::size_t batch_size, std::size_t step,
                                       std::uint64_t seed);

template <typename T>
TrainResult train_loop(const Model<T>& model, LookaheadParams<T>& la, const std::vector<TrainSample>& corpus,
                       const TrainConfig& cfg, const std::function<void(const TrainRecord&)>& on_step = {});

template <typename T>
void save_checkpoint(const std::string& path, const LookaheadParams<T>& la, const AdamState<T>& opt);
template <typename T>
void load_checkpoint(const std::string& path, LookaheadParams<T>& la, AdamState<T>& opt);

std::string trace_to_csv(const std::vector<TrainRecord>& trace);

}  // namespace kvlab
