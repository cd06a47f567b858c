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

// Prompt KV eviction. Every policy prefills the prompt once, scores prompt
// entries per (layer, kv head), keeps the top `budget` of them and drops the
// rest. Budgets count retained prompt entries per kv head per layer.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvlab/model.hpp"
#include "kvlab/scoring.hpp"

namespace kvlab {

/// Per (layer, kv head): ascending retained prompt indices.
struct RetainedSet {
  std::size_t n_layers = 0;
  std::size_t n_kv_heads = 0;
  std::size_t n_in = 0;
  std::vector<std::vector<std::size_t>> indices;  // [layer * n_kv_heads + g]

  static RetainedSet all(std::size_t n_layers, std::size_t n_kv_heads, std::size_t n_in);

  const std::vector<std::size_t>& at(std::size_t layer, std::size_t g) const {
    return indices.at(layer * n_kv_heads + g);
  }
  std::vector<std::size_t>& at(std::size_t layer, std::size_t g) { return indices.at(layer * n_kv_heads + g); }
  bool operator==(const RetainedSet&) const = default;
};

/// Indices of the k largest entries, ties toward the smaller index, returned
/// ascending. k >= |v| returns every index.
std::vector<std::size_t> select_topk(std::span<const double> v, std::size_t k);

/// Top-k per (layer, kv head) of kv-head scores. `budgets` holds one entry per layer.
RetainedSet retain_topk(const ImportanceScores& kv_scores, const std::vector<std::size_t>& budgets);

/// Keeps the retained prompt rows; lookahead-slot rows are always dropped.
template <typename T>
KVCache<T> compress_cache(const KVCache<T>& cache, const RetainedSet& retained);

enum class Policy { Lookahead, SnapKV, PyramidKV, Streaming, LAQ, SpecKV, GT, Random };

std::string to_string(Policy p);
Policy parse_policy(const std::string& s);

struct EvictionConfig {
  std::size_t budget = 128;
  std::size_t window = 32;
  std::size_t pooling_kernel = 7;
  std::size_t n_sink = 4;
  std::size_t draft_len = 32;
  double pyramid_beta = 0.5;
  /// Average lookahead scores with suffix-window scores over the whole prompt.
  bool combine_suffix = false;
  std::uint64_t rng_seed = 0;  // random policy only
};

/// Layer budgets k + trunc(k * beta * (L-1-2l) / (L-1)), raised to at least
/// `min_budget` with the excess taken back from the largest layers. The sum
/// stays L * k whenever that is feasible.
std::vector<std::size_t> pyramid_budgets(std::size_t n_layers, std::size_t k, double beta, std::size_t min_budget);

template <typename T>
struct EvictionResult {
  RetainedSet retained;
  KVCache<T> cache;
  /// Next-token logits after the prompt.
  std::vector<T> last_logits;
  /// kv-head scores used for selection (empty when every entry was kept
  /// without scoring).
  ImportanceScores scores;
  /// Draft tokens produced by draft-based policies.
  std::vector<int> draft;
};

/// Inputs a policy may need besides the prompt.
template <typename T>
struct PolicyInputs {
  const LookaheadParams<T>* lookahead = nullptr;
  const Model<T>* draft_model = nullptr;
  std::span<const int> response;  // GT policy only
};

template <typename T>
EvictionResult<T> evict_lookahead(const Model<T>& model, const LookaheadParams<T>& la, std::span<const int> X,
                                  const EvictionConfig& cfg);

template <typename T>
EvictionResult<T> evict_snapkv(const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg);

template <typename T>
EvictionResult<T> evict_pyramidkv(const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg);

/// Sink plus recency selection; needs no model.
RetainedSet streaming_retained(std::size_t n_layers, std::size_t n_kv_heads, std::size_t n_in, std::size_t budget,
                               std::size_t n_sink);

template <typename T>
EvictionResult<T> evict_streaming(const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg);

template <typename T>
EvictionResult<T> evict_laq(const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg);

template <typename T>
EvictionResult<T> evict_speckv(const Model<T>& target, const Model<T>& draft, std::span<const int> X,
                               const EvictionConfig& cfg);

/// Oracle policy scoring with the true response.
template <typename T>
EvictionResult<T> evict_gt(const Model<T>& model, std::span<const int> X, std::span<const int> Y,
                           const EvictionConfig& cfg);

template <typename T>
EvictionResult<T> evict_random(const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg);

template <typename T>
EvictionResult<T> evict(Policy policy, const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg,
                        const PolicyInputs<T>& inputs = {});

/// JSON array of {layer, kv_head, indices}.
std::string retained_to_json(const RetainedSet& retained);

}  // namespace kvlab
