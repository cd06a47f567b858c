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

// Toy decoder-only transformer: RMSNorm, rotary grouped-query attention,
// SiLU-gated MLP, untied output head. Lookahead rows may be appended to any
// forward block; adapters only ever touch those rows.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kvlab/kvconfig.hpp"
#include "kvlab/tensor.hpp"

namespace kvlab {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 2;
  std::size_t d_model = 32;
  std::size_t d_head = 8;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 256;
  double rope_base = 10000.0;
  std::uint64_t rng_seed = 0;
  // Test mode: attention depends on content only.
  bool rope_enabled = true;
  double norm_eps = 1e-6;
  /// Multiplies the init stddev of W_q and W_k. Values above 1 give the
  /// peaked attention of trained models to a random toy model.
  double qk_init_scale = 1.0;

  std::size_t group_size() const { return n_heads / n_kv_heads; }
  std::size_t kv_width() const { return n_kv_heads * d_head; }

  void validate() const;
  static ModelConfig from_config(const KeyValueConfig& kv);
  KeyValueConfig to_config() const;
};

enum class TargetModules { EmbOnly, QV, All };

std::string to_string(TargetModules t);
TargetModules parse_target_modules(const std::string& s);

struct LookaheadConfig {
  std::size_t n_lookahead = 32;
  std::size_t lora_rank = 8;
  double lora_alpha = 32.0;
  TargetModules target_modules = TargetModules::All;
  std::size_t pooling_kernel = 7;
  std::uint64_t rng_seed = 1;

  // Effective rank: emb-only ignores lora_rank.
  std::size_t rank() const { return target_modules == TargetModules::EmbOnly ? 0 : lora_rank; }

  void validate() const;
  static LookaheadConfig from_config(const KeyValueConfig& kv);
  KeyValueConfig to_config() const;
};

enum class LinearKind : std::size_t { Q = 0, K, V, O, Gate, Up, Down };
inline constexpr std::size_t kNumLinearKinds = 7;
const char* linear_name(LinearKind kind);

/// (d_in, d_out) of a projection.
std::pair<std::size_t, std::size_t> linear_dims(const ModelConfig& cfg, LinearKind kind);

bool is_adapted(TargetModules target, LinearKind kind);

/// Base parameter count (embedding, projections, norms, head).
std::size_t count_model_params(const ModelConfig& cfg);

/// n_lookahead * d + sum over adapted projections of r * (d_in + d_out).
std::size_t count_trainable_params(const ModelConfig& cfg, const LookaheadConfig& lcfg);

template <typename T>
struct LayerWeights {
  std::array<Tensor<T>, kNumLinearKinds> linear;  // each d_in x d_out
  Tensor<T> attn_norm;
  Tensor<T> mlp_norm;

  const Tensor<T>& operator[](LinearKind k) const { return linear[static_cast<std::size_t>(k)]; }
};

template <typename T>
class Model {
 public:
  static Model build(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const Tensor<T>& embedding() const { return embed_; }
  const LayerWeights<T>& layer(std::size_t l) const { return layers_.at(l); }
  const Tensor<T>& final_norm() const { return final_norm_; }
  const Tensor<T>& lm_head() const { return lm_head_; }

  /// Every weight tensor in a fixed order with a stable name.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  /// FNV-1a over the raw bytes of every weight.
  std::uint64_t checksum() const;

  void save(const std::string& path) const;
  /// Rebuilds from `cfg` and overwrites weights from the file.
  static Model load(const ModelConfig& cfg, const std::string& path);

 private:
  ModelConfig cfg_;
  Tensor<T> embed_;  // vocab x d
  std::vector<LayerWeights<T>> layers_;
  Tensor<T> final_norm_;
  Tensor<T> lm_head_;  // d x vocab
};

template <typename T>
struct LoraAdapter {
  Tensor<T> a;  // r x d_in
  Tensor<T> b;  // d_out x r
};

template <typename T>
class LookaheadParams {
 public:
  static LookaheadParams init(const ModelConfig& mcfg, const LookaheadConfig& lcfg);

  const LookaheadConfig& config() const { return cfg_; }
  const Tensor<T>& embeddings() const { return embeddings_; }
  const std::optional<LoraAdapter<T>>& adapter(std::size_t layer, LinearKind kind) const {
    return adapters_.at(layer)[static_cast<std::size_t>(kind)];
  }
  T lora_scale() const {
    return cfg_.rank() == 0 ? T(0) : static_cast<T>(cfg_.lora_alpha / static_cast<double>(cfg_.rank()));
  }

  /// Trainable tensors in a fixed order; they share storage with this object.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  std::vector<Tensor<T>> parameters() const;
  std::size_t n_trainable() const;

  /// Independent copy with its own storage.
  LookaheadParams clone() const;
  /// Draws every adapter B from N(0, stddev); used by tests that need a nonzero delta.
  void randomize_adapters(std::uint64_t seed, double stddev);
  void zero_grad();

  void save(const std::string& path) const;
  static LookaheadParams load(const ModelConfig& mcfg, const LookaheadConfig& lcfg, const std::string& path);

 private:
  LookaheadConfig cfg_;
  Tensor<T> embeddings_;  // n_lookahead x d
  std::vector<std::array<std::optional<LoraAdapter<T>>, kNumLinearKinds>> adapters_;
};

/// Per (layer, kv-head) key/value rows in insertion order. Keys are stored
/// after rotation, so entries keep their original position information.
template <typename T>
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t n_layers, std::size_t n_kv_heads, std::size_t d_head);
  static KVCache empty_for(const ModelConfig& cfg) { return KVCache(cfg.n_layers, cfg.n_kv_heads, cfg.d_head); }

  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_kv_heads() const { return n_kv_heads_; }
  std::size_t d_head() const { return d_head_; }

  std::size_t size(std::size_t layer, std::size_t g) const { return positions_[slot(layer, g)].size(); }
  std::span<const T> keys(std::size_t layer, std::size_t g) const { return keys_[slot(layer, g)]; }
  std::span<const T> values(std::size_t layer, std::size_t g) const { return values_[slot(layer, g)]; }
  std::span<const std::int64_t> positions(std::size_t layer, std::size_t g) const {
    return positions_[slot(layer, g)];
  }
  /// Largest stored position or -1 when empty.
  std::int64_t max_position() const;
  std::size_t total_entries() const;

  /// Trailing entries (per layer/head) that came from lookahead slots.
  std::size_t n_lookahead_tail() const { return n_lookahead_tail_; }
  void set_lookahead_tail(std::size_t n) { n_lookahead_tail_ = n; }

  void append(std::size_t layer, std::size_t g, std::span<const T> key, std::span<const T> value,
              std::int64_t position);
  /// Keeps exactly the given rows (ascending) of one (layer, head).
  void keep_rows(std::size_t layer, std::size_t g, std::span<const std::size_t> rows);
  /// Copy holding only the first n entries of every (layer, head).
  KVCache truncated(std::size_t n) const;

  /// Structural and position-order checks.
  void check_invariants() const;

  bool operator==(const KVCache& other) const = default;

 private:
  std::size_t slot(std::size_t layer, std::size_t g) const;

  std::size_t n_layers_ = 0;
  std::size_t n_kv_heads_ = 0;
  std::size_t d_head_ = 0;
  std::size_t n_lookahead_tail_ = 0;
  std::vector<std::vector<T>> keys_;
  std::vector<std::vector<T>> values_;
  std::vector<std::vector<std::int64_t>> positions_;
};

struct ForwardOptions {
  bool compute_logits = true;
  /// Record softmax probabilities for the last `probe_rows` rows of the block.
  std::size_t probe_rows = 0;
  /// Record post-rotation query rows of the block, per layer.
  bool record_queries = false;
  /// Record each layer's attention output before the output projection.
  bool record_attention = false;
};

template <typename T>
struct BlockResult {
  Tensor<T> logits;  // block_rows x vocab when requested
  /// probs[layer][head]: probe_rows x (cached + block) keys; taped when the
  /// block involves trainable tensors.
  std::vector<std::vector<Tensor<T>>> probs;
  std::vector<Tensor<T>> queries;    // [layer]: block_rows x (H * d_head)
  std::vector<Tensor<T>> attention;  // [layer]: block_rows x (H * d_head)
  /// Largest probability buffer held at once within a layer, in elements,
  /// summed over heads.
  std::size_t peak_prob_elements = 0;
};

/// Runs one block of rows through the model on top of `cache`, appending the
/// block's keys and values. The block consists of `tokens` followed by all
/// lookahead rows when `n_la_rows` > 0 (then `la` must be given and
/// n_la_rows == its n_lookahead). Row i attends to every cached entry and to
/// block rows <= i. Adapter deltas are added only to the lookahead rows.
template <typename T>
BlockResult<T> forward_block(const Model<T>& model, const LookaheadParams<T>* la, KVCache<T>& cache,
                             std::span<const int> tokens, std::size_t n_la_rows,
                             std::span<const std::int64_t> positions, const ForwardOptions& opts);

struct PrefillOptions {
  bool compute_logits = true;
  /// Probability rows recorded for the last `probe_rows` rows of the sequence.
  std::size_t probe_rows = 0;
  /// 0: the whole sequence is one block. Otherwise the prefix before the probe
  /// rows is processed in chunks of this many rows and the probe rows form the
  /// final block, bounding the probability buffers.
  std::size_t chunk_rows = 0;
  bool record_queries = false;
};

template <typename T>
struct PrefillResult {
  Tensor<T> logits;  // rows of the final block only when chunked
  KVCache<T> cache;
  BlockResult<T> probe;  // block holding the probe rows
  std::size_t peak_prob_elements = 0;
};

/// Prefill over `tokens`, optionally followed by all lookahead slots at
/// positions n, n+1, ...
template <typename T>
PrefillResult<T> forward_prefill(const Model<T>& model, const LookaheadParams<T>* la, std::span<const int> tokens,
                                 const PrefillOptions& opts = {});

/// One decoding step. `position` must exceed every position in the cache.
template <typename T>
std::vector<T> decode_step(const Model<T>& model, KVCache<T>& cache, int token, std::int64_t position);

/// Attention output of one query row (d_head wide) of head `h` against the
/// cache entries of its kv group, restricted to the first `limit` entries.
template <typename T>
std::vector<double> attend_cached(const KVCache<T>& cache, std::size_t layer, std::size_t g,
                                  std::span<const T> query, std::size_t limit);

std::vector<std::int64_t> iota_positions(std::size_t n, std::int64_t start = 0);

}  // namespace kvlab
