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

// Decoding and synthetic corpora.
//
// Token layout shared by every task:
//   0 end of response, 1 key/needle mark, 2 query mark, 3 separator,
//   4.. content tokens.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kvlab/kvconfig.hpp"
#include "kvlab/model.hpp"

namespace kvlab {

inline constexpr int kEndToken = 0;
inline constexpr int kKeyMark = 1;
inline constexpr int kQueryMark = 2;
inline constexpr int kSeparator = 3;
inline constexpr int kFirstContent = 4;

enum class DecodeMode { Greedy, Temperature };

struct GenSpec {
  std::size_t max_new_tokens = 32;
  DecodeMode mode = DecodeMode::Greedy;
  double temperature = 1.0;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

/// Index of the largest logit; ties go to the smallest id.
template <typename T>
int argmax_token(std::span<const T> logits);

/// Samples from softmax(logits / temperature), computed in double.
template <typename T, typename Rng>
int sample_token(std::span<const T> logits, double temperature, Rng& rng) {
  if (logits.empty()) throw ContractError("sample_token: empty logits");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> w(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
    total += w[i];
  }
  const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u < acc) return static_cast<int>(i);
  }
  // u landed on the upper edge; fall back to the heaviest token.
  return static_cast<int>(std::max_element(w.begin(), w.end()) - w.begin());
}

/// Continues from a prepared cache whose next-token logits are `logits`.
/// Stops after `max_new_tokens` or once the end token has been emitted (the
/// end token is part of the output).
template <typename T>
std::vector<int> continue_generation(const Model<T>& model, KVCache<T>& cache, std::vector<T> logits,
                                     std::int64_t next_position, const GenSpec& spec);

/// Prefill X, then decode.
template <typename T>
std::vector<int> generate(const Model<T>& model, std::span<const int> X, const GenSpec& spec);

enum class Task { Needle, Copy, KVRetrieval, FewshotPattern, TruncationCompletion };
enum class Origin { ModelGenerated, SourceResponse };

std::string to_string(Task t);
Task parse_task(const std::string& s);
std::string to_string(Origin o);
Origin parse_origin(const std::string& s);

struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  bool operator==(const TokenSpan&) const = default;
};

struct TrainSample {
  std::vector<int> X;
  std::vector<int> Y;
  Origin origin = Origin::SourceResponse;
  Task task = Task::Needle;
  /// Prompt spans holding planted information (needles, key-value pairs).
  std::vector<TokenSpan> needle_spans;

  bool operator==(const TrainSample&) const = default;
};

struct CorpusSpec {
  Task task = Task::Needle;
  std::size_t n_samples = 100;
  std::size_t prompt_len_min = 64;
  std::size_t prompt_len_max = 96;
  std::size_t vocab_size = 64;
  std::uint64_t rng_seed = 0;
  std::size_t n_needles = 1;
  std::size_t key_len = 2;
  std::size_t value_len = 4;
  std::size_t copy_len = 8;
  std::size_t continuation_len = 8;
  /// Optional task mixture (task, weight); empty means `task` only.
  std::vector<std::pair<Task, double>> mixture;

  void validate() const;
  static CorpusSpec from_config(const KeyValueConfig& kv);
};

/// Samples with canonical answers as Y and origin source-response.
std::vector<TrainSample> build_corpus(const CorpusSpec& spec);
std::vector<TrainSample> build_needle_corpus(const CorpusSpec& spec);

/// Recomputes a task's answer from its prompt alone.
std::vector<int> canonical_answer(Task task, std::span<const int> X, const CorpusSpec& spec);

/// Replaces Y by model output when origin is model-generated.
template <typename T>
std::vector<TrainSample> make_training_pairs(const Model<T>& model, const CorpusSpec& corpus, const GenSpec& gen,
                                             Origin origin);

std::string corpus_to_jsonl(const std::vector<TrainSample>& samples);
std::vector<TrainSample> corpus_from_jsonl(const std::string& text);
void save_corpus(const std::string& path, const std::vector<TrainSample>& samples);
std::vector<TrainSample> load_corpus(const std::string& path);

}  // namespace kvlab
