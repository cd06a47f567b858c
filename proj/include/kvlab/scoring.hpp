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

// Per-token importance from attention probabilities. A score vector for
// (layer, head) is the mean, over a set of query rows, of the probability
// each row assigns to every prompt column.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "kvlab/model.hpp"

namespace kvlab {

enum class HeadSpace { Query, KV };

std::string to_string(HeadSpace s);

struct ImportanceScores {
  HeadSpace head_space = HeadSpace::Query;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t n_cols = 0;
  std::vector<double> values;  // [layer][head][col]

  static ImportanceScores zeros(HeadSpace space, std::size_t n_layers, std::size_t n_heads, std::size_t n_cols);

  std::span<const double> row(std::size_t layer, std::size_t head) const {
    return std::span<const double>(values).subspan((layer * n_heads + head) * n_cols, n_cols);
  }
  std::span<double> row(std::size_t layer, std::size_t head) {
    return std::span<double>(values).subspan((layer * n_heads + head) * n_cols, n_cols);
  }
  bool same_shape(const ImportanceScores& o) const {
    return head_space == o.head_space && n_layers == o.n_layers && n_heads == o.n_heads && n_cols == o.n_cols;
  }
  bool operator==(const ImportanceScores& o) const = default;
};

/// Column means of `probs[layer][head]` over columns [0, n_cols).
template <typename T>
ImportanceScores scores_from_probs(const std::vector<std::vector<Tensor<T>>>& probs, std::size_t n_cols);

/// Mean attention of the response rows Y onto the prompt columns, from a
/// forward over [X; Y]. `chunk_rows` > 0 processes X in blocks of that many
/// rows; `peak_prob_elements` receives the largest per-layer buffer.
template <typename T>
ImportanceScores gt_importance(const Model<T>& model, std::span<const int> X, std::span<const int> Y,
                               std::size_t chunk_rows = 0, std::size_t* peak_prob_elements = nullptr);

/// Observation rows for a surrogate estimate: either the last `suffix` prompt
/// tokens (scores cover the columns before them) or `appended` tokens placed
/// after the prompt (scores cover the whole prompt).
struct WindowSpec {
  std::size_t suffix = 0;
  std::vector<int> appended;

  static WindowSpec suffix_of(std::size_t n) { return WindowSpec{n, {}}; }
  static WindowSpec appended_tokens(std::vector<int> t) { return WindowSpec{0, std::move(t)}; }
};

template <typename T>
ImportanceScores surrogate_importance(const Model<T>& model, std::span<const int> X, const WindowSpec& window);

/// Scores from `window_tokens` appended after an existing prompt cache
/// holding `n_in` entries per head. The cache is not modified.
template <typename T>
ImportanceScores appended_window_importance(const Model<T>& model, const KVCache<T>& prompt_cache, std::size_t n_in,
                                            std::span<const int> window_tokens);

/// Mean attention of the lookahead rows onto the prompt columns.
template <typename T>
ImportanceScores lookahead_importance(const Model<T>& model, const LookaheadParams<T>& la, std::span<const int> X);

/// Query-head scores to kv-head scores by averaging each group.
ImportanceScores gqa_mean_reduce(const ImportanceScores& scores, std::size_t n_heads, std::size_t n_kv_heads);

/// Same-length max filter with truncated windows. Even kernels are rejected.
std::vector<double> maxpool1d(std::span<const double> v, std::size_t kernel);
ImportanceScores maxpool_scores(const ImportanceScores& scores, std::size_t kernel);

std::vector<double> l1_normalize(std::span<const double> v);

/// Element-wise mean of two score sets of the same shape.
ImportanceScores combine_with_suffix(const ImportanceScores& lkv, const ImportanceScores& snap);

/// Eviction-time pipeline: GQA reduce, then pool.
ImportanceScores eviction_scores(const ImportanceScores& query_scores, std::size_t n_heads, std::size_t n_kv_heads,
                                 std::size_t kernel);

struct CrossScores {
  ImportanceScores scores;
  std::size_t peak_prob_elements = 0;
};

/// Scores of the last `tail_rows` rows of `tokens` onto the columns before
/// them, processing the prefix in blocks of `tail_rows` rows so no
/// probability buffer exceeds tail_rows x seq_len per head.
template <typename T>
CrossScores blockwise_cross_scores(const Model<T>& model, std::span<const int> tokens, std::size_t tail_rows);

/// JSON lines {layer, head, head_space, values}.
std::string scores_to_jsonl(const ImportanceScores& scores);
ImportanceScores scores_from_jsonl(const std::string& text);

}  // namespace kvlab
