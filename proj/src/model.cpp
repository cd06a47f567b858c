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

#include "kvlab/model.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "kvlab/serialize.hpp"

namespace kvlab {
namespace {

void reject_unknown(const KeyValueConfig& kv, const char* what) {
  const auto unused = kv.unused_keys();
  if (!unused.empty()) throw ConfigError(std::string("unknown ") + what + " config key '" + unused.front() + "'");
}

template <typename T>
Tensor<T> gaussian(std::mt19937_64& rng, Shape shape, double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> ones(std::size_t n) {
  return Tensor<T>({n}, std::vector<T>(n, T(1)));
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configs

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || n_kv_heads == 0 || d_model == 0 || d_head == 0 || d_ff == 0 ||
      vocab_size == 0 || max_seq_len == 0) {
    throw ConfigError("model dimensions must all be >= 1");
  }
  if (n_heads % n_kv_heads != 0) {
    throw ConfigError("n_query_heads (" + std::to_string(n_heads) + ") is not a multiple of n_kv_heads (" +
                      std::to_string(n_kv_heads) + ")");
  }
  if (d_model != n_heads * d_head) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") != n_query_heads * d_head (" +
                      std::to_string(n_heads * d_head) + ")");
  }
  if (d_head % 2 != 0) throw ConfigError("d_head must be even for rotary embeddings");
  if (!(rope_base > 0.0)) throw ConfigError("rope_base must be positive");
  if (!(norm_eps >= 0.0)) throw ConfigError("norm_eps must be non-negative");
  if (!(qk_init_scale > 0.0)) throw ConfigError("qk_init_scale must be positive");
}

ModelConfig ModelConfig::from_config(const KeyValueConfig& kv) {
  ModelConfig c;
  c.n_layers = kv.get_size("n_layers", c.n_layers);
  c.n_heads = kv.get_size("n_query_heads", c.n_heads);
  c.n_kv_heads = kv.get_size("n_kv_heads", c.n_kv_heads);
  c.d_model = kv.get_size("d_model", c.d_model);
  c.d_head = kv.get_size("d_head", c.d_head);
  c.d_ff = kv.get_size("d_ff", c.d_ff);
  c.vocab_size = kv.get_size("vocab_size", c.vocab_size);
  c.max_seq_len = kv.get_size("max_seq_len", c.max_seq_len);
  c.rope_base = kv.get_double("rope_base", c.rope_base);
  c.rng_seed = kv.get_u64("rng_seed", c.rng_seed);
  c.rope_enabled = kv.get_bool("rope_enabled", c.rope_enabled);
  c.norm_eps = kv.get_double("norm_eps", c.norm_eps);
  c.qk_init_scale = kv.get_double("qk_init_scale", c.qk_init_scale);
  reject_unknown(kv, "model");
  c.validate();
  return c;
}

KeyValueConfig ModelConfig::to_config() const {
  KeyValueConfig kv;
  kv.set("n_layers", std::to_string(n_layers));
  kv.set("n_query_heads", std::to_string(n_heads));
  kv.set("n_kv_heads", std::to_string(n_kv_heads));
  kv.set("d_model", std::to_string(d_model));
  kv.set("d_head", std::to_string(d_head));
  kv.set("d_ff", std::to_string(d_ff));
  kv.set("vocab_size", std::to_string(vocab_size));
  kv.set("max_seq_len", std::to_string(max_seq_len));
  kv.set("rope_base", std::to_string(rope_base));
  kv.set("rng_seed", std::to_string(rng_seed));
  kv.set("rope_enabled", rope_enabled ? "true" : "false");
  kv.set("norm_eps", std::to_string(norm_eps));
  kv.set("qk_init_scale", std::to_string(qk_init_scale));
  return kv;
}

std::string to_string(TargetModules t) {
  switch (t) {
    case TargetModules::EmbOnly: return "emb-only";
    case TargetModules::QV: return "QV";
    case TargetModules::All: return "all";
  }
  return "?";
}

TargetModules parse_target_modules(const std::string& s) {
  if (s == "emb-only") return TargetModules::EmbOnly;
  if (s == "QV" || s == "qv") return TargetModules::QV;
  if (s == "all") return TargetModules::All;
  throw ConfigError("unknown target_modules '" + s + "' (expected emb-only, QV or all)");
}

void LookaheadConfig::validate() const {
  if (n_lookahead == 0) throw ConfigError("n_lookahead must be >= 1");
  if (pooling_kernel == 0 || pooling_kernel % 2 == 0) throw ConfigError("pooling_kernel must be odd and >= 1");
  if (rank() > 0 && !(lora_alpha > 0.0)) throw ConfigError("lora_alpha must be positive");
}

LookaheadConfig LookaheadConfig::from_config(const KeyValueConfig& kv) {
  LookaheadConfig c;
  c.n_lookahead = kv.get_size("n_lookahead", c.n_lookahead);
  c.lora_rank = kv.get_size("lora_rank", c.lora_rank);
  c.lora_alpha = kv.get_double("lora_alpha", c.lora_alpha);
  c.target_modules = parse_target_modules(kv.get_string("target_modules", to_string(c.target_modules)));
  c.pooling_kernel = kv.get_size("pooling_kernel", c.pooling_kernel);
  c.rng_seed = kv.get_u64("rng_seed", c.rng_seed);
  reject_unknown(kv, "lookahead");
  c.validate();
  return c;
}

KeyValueConfig LookaheadConfig::to_config() const {
  KeyValueConfig kv;
  kv.set("n_lookahead", std::to_string(n_lookahead));
  kv.set("lora_rank", std::to_string(lora_rank));
  kv.set("lora_alpha", std::to_string(lora_alpha));
  kv.set("target_modules", to_string(target_modules));
  kv.set("pooling_kernel", std::to_string(pooling_kernel));
  kv.set("rng_seed", std::to_string(rng_seed));
  return kv;
}

const char* linear_name(LinearKind kind) {
  static constexpr const char* kNames[] = {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};
  return kNames[static_cast<std::size_t>(kind)];
}

std::pair<std::size_t, std::size_t> linear_dims(const ModelConfig& cfg, LinearKind kind) {
  const std::size_t d = cfg.d_model, q = cfg.n_heads * cfg.d_head, kv = cfg.kv_width();
  switch (kind) {
    case LinearKind::Q: return {d, q};
    case LinearKind::K:
    case LinearKind::V: return {d, kv};
    case LinearKind::O: return {q, d};
    case LinearKind::Gate:
    case LinearKind::Up: return {d, cfg.d_ff};
    case LinearKind::Down: return {cfg.d_ff, d};
  }
  throw ContractError("unknown linear kind");
}

bool is_adapted(TargetModules target, LinearKind kind) {
  switch (target) {
    case TargetModules::EmbOnly: return false;
    case TargetModules::QV: return kind == LinearKind::Q || kind == LinearKind::V;
    case TargetModules::All: return true;
  }
  return false;
}

std::size_t count_model_params(const ModelConfig& cfg) {
  std::size_t per_layer = 2 * cfg.d_model;
  for (std::size_t k = 0; k < kNumLinearKinds; ++k) {
    const auto [din, dout] = linear_dims(cfg, static_cast<LinearKind>(k));
    per_layer += din * dout;
  }
  return cfg.vocab_size * cfg.d_model * 2 + cfg.d_model + cfg.n_layers * per_layer;
}

std::size_t count_trainable_params(const ModelConfig& cfg, const LookaheadConfig& lcfg) {
  std::size_t total = lcfg.n_lookahead * cfg.d_model;
  const std::size_t r = lcfg.rank();
  if (r == 0) return total;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t k = 0; k < kNumLinearKinds; ++k) {
      const auto kind = static_cast<LinearKind>(k);
      if (!is_adapted(lcfg.target_modules, kind)) continue;
      const auto [din, dout] = linear_dims(cfg, kind);
      total += r * (din + dout);
    }
  }
  return total;
}

std::vector<std::int64_t> iota_positions(std::size_t n, std::int64_t start) {
  std::vector<std::int64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = start + static_cast<std::int64_t>(i);
  return out;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
Model<T> Model<T>::build(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  std::mt19937_64 rng(cfg.rng_seed);
  m.embed_ = gaussian<T>(rng, {cfg.vocab_size, cfg.d_model}, 1.0, false);
  m.layers_.resize(cfg.n_layers);
  for (auto& layer : m.layers_) {
    for (std::size_t k = 0; k < kNumLinearKinds; ++k) {
      const auto [din, dout] = linear_dims(cfg, static_cast<LinearKind>(k));
      const auto kind = static_cast<LinearKind>(k);
      const double gain = (kind == LinearKind::Q || kind == LinearKind::K) ? cfg.qk_init_scale : 1.0;
      layer.linear[k] = gaussian<T>(rng, {din, dout}, gain * std::sqrt(1.0 / static_cast<double>(din)), false);
    }
    layer.attn_norm = ones<T>(cfg.d_model);
    layer.mlp_norm = ones<T>(cfg.d_model);
  }
  m.final_norm_ = ones<T>(cfg.d_model);
  m.lm_head_ = gaussian<T>(rng, {cfg.d_model, cfg.vocab_size}, std::sqrt(1.0 / static_cast<double>(cfg.d_model)), false);
  return m;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Model<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("embed", embed_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    for (std::size_t k = 0; k < kNumLinearKinds; ++k) {
      out.emplace_back(prefix + linear_name(static_cast<LinearKind>(k)), layers_[l].linear[k]);
    }
    out.emplace_back(prefix + "attn_norm", layers_[l].attn_norm);
    out.emplace_back(prefix + "mlp_norm", layers_[l].mlp_norm);
  }
  out.emplace_back("final_norm", final_norm_);
  out.emplace_back("lm_head", lm_head_);
  return out;
}

template <typename T>
std::uint64_t Model<T>::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : named_parameters()) h = fnv1a(h, t.data().data(), t.size() * sizeof(T));
  return h;
}

template <typename T>
void Model<T>::save(const std::string& path) const {
  save_tensors(path, named_parameters());
}

template <typename T>
Model<T> Model<T>::load(const ModelConfig& cfg, const std::string& path) {
  Model m = build(cfg);
  load_tensors(path, m.named_parameters());
  return m;
}

// ---------------------------------------------------------------------------
// Lookahead parameters

template <typename T>
LookaheadParams<T> LookaheadParams<T>::init(const ModelConfig& mcfg, const LookaheadConfig& lcfg) {
  mcfg.validate();
  lcfg.validate();
  LookaheadParams p;
  p.cfg_ = lcfg;
  std::mt19937_64 rng(lcfg.rng_seed);
  p.embeddings_ = gaussian<T>(rng, {lcfg.n_lookahead, mcfg.d_model}, 0.02, true);
  p.adapters_.resize(mcfg.n_layers);
  const std::size_t r = lcfg.rank();
  if (r == 0) return p;
  for (std::size_t l = 0; l < mcfg.n_layers; ++l) {
    for (std::size_t k = 0; k < kNumLinearKinds; ++k) {
      const auto kind = static_cast<LinearKind>(k);
      if (!is_adapted(lcfg.target_modules, kind)) continue;
      const auto [din, dout] = linear_dims(mcfg, kind);
      LoraAdapter<T> ad;
      ad.a = gaussian<T>(rng, {r, din}, std::sqrt(1.0 / static_cast<double>(r)), true);
      ad.b = Tensor<T>::zeros({dout, r}, true);
      p.adapters_[l][k] = std::move(ad);
    }
  }
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> LookaheadParams<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("lookahead.embeddings", embeddings_);
  for (std::size_t l = 0; l < adapters_.size(); ++l) {
    for (std::size_t k = 0; k < kNumLinearKinds; ++k) {
      const auto& ad = adapters_[l][k];
      if (!ad) continue;
      const std::string prefix = "layers." + std::to_string(l) + "." + linear_name(static_cast<LinearKind>(k));
      out.emplace_back(prefix + ".lora_a", ad->a);
      out.emplace_back(prefix + ".lora_b", ad->b);
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> LookaheadParams<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

template <typename T>
std::size_t LookaheadParams<T>::n_trainable() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.size();
  return n;
}

template <typename T>
LookaheadParams<T> LookaheadParams<T>::clone() const {
  LookaheadParams p;
  p.cfg_ = cfg_;
  p.embeddings_ = embeddings_.clone();
  p.adapters_.resize(adapters_.size());
  for (std::size_t l = 0; l < adapters_.size(); ++l) {
    for (std::size_t k = 0; k < kNumLinearKinds; ++k) {
      if (adapters_[l][k]) p.adapters_[l][k] = LoraAdapter<T>{adapters_[l][k]->a.clone(), adapters_[l][k]->b.clone()};
    }
  }
  return p;
}

template <typename T>
void LookaheadParams<T>::randomize_adapters(std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& layer : adapters_) {
    for (auto& ad : layer) {
      if (!ad) continue;
      for (auto& v : ad->b.mutable_data()) v = static_cast<T>(dist(rng));
    }
  }
}

template <typename T>
void LookaheadParams<T>::zero_grad() {
  for (auto t : parameters()) t.zero_grad();
}

template <typename T>
void LookaheadParams<T>::save(const std::string& path) const {
  save_tensors(path, named_parameters());
}

template <typename T>
LookaheadParams<T> LookaheadParams<T>::load(const ModelConfig& mcfg, const LookaheadConfig& lcfg,
                                            const std::string& path) {
  LookaheadParams p = init(mcfg, lcfg);
  load_tensors(path, p.named_parameters());
  return p;
}

// ---------------------------------------------------------------------------
// KV cache

template <typename T>
KVCache<T>::KVCache(std::size_t n_layers, std::size_t n_kv_heads, std::size_t d_head)
    : n_layers_(n_layers),
      n_kv_heads_(n_kv_heads),
      d_head_(d_head),
      keys_(n_layers * n_kv_heads),
      values_(n_layers * n_kv_heads),
      positions_(n_layers * n_kv_heads) {}

template <typename T>
std::size_t KVCache<T>::slot(std::size_t layer, std::size_t g) const {
  if (layer >= n_layers_ || g >= n_kv_heads_) {
    throw ContractError("cache slot (" + std::to_string(layer) + ", " + std::to_string(g) + ") out of range");
  }
  return layer * n_kv_heads_ + g;
}

template <typename T>
std::int64_t KVCache<T>::max_position() const {
  std::int64_t mx = -1;
  for (const auto& p : positions_) {
    if (!p.empty()) mx = std::max(mx, p.back());
  }
  return mx;
}

template <typename T>
std::size_t KVCache<T>::total_entries() const {
  std::size_t n = 0;
  for (const auto& p : positions_) n += p.size();
  return n;
}

template <typename T>
void KVCache<T>::append(std::size_t layer, std::size_t g, std::span<const T> key, std::span<const T> value,
                        std::int64_t position) {
  const std::size_t s = slot(layer, g);
  if (key.size() != d_head_ || value.size() != d_head_) throw DimensionError("cache append: wrong row width");
  if (!positions_[s].empty() && positions_[s].back() >= position) {
    throw InputError("cache append: position " + std::to_string(position) + " does not exceed " +
                     std::to_string(positions_[s].back()));
  }
  keys_[s].insert(keys_[s].end(), key.begin(), key.end());
  values_[s].insert(values_[s].end(), value.begin(), value.end());
  positions_[s].push_back(position);
}

template <typename T>
void KVCache<T>::keep_rows(std::size_t layer, std::size_t g, std::span<const std::size_t> rows) {
  const std::size_t s = slot(layer, g);
  const std::size_t n = positions_[s].size();
  std::vector<T> k, v;
  std::vector<std::int64_t> p;
  k.reserve(rows.size() * d_head_);
  v.reserve(rows.size() * d_head_);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    if (r >= n) throw ContractError("cache row " + std::to_string(r) + " out of range " + std::to_string(n));
    if (i > 0 && rows[i - 1] >= r) throw ContractError("retained rows must be strictly ascending");
    k.insert(k.end(), keys_[s].begin() + r * d_head_, keys_[s].begin() + (r + 1) * d_head_);
    v.insert(v.end(), values_[s].begin() + r * d_head_, values_[s].begin() + (r + 1) * d_head_);
    p.push_back(positions_[s][r]);
  }
  keys_[s] = std::move(k);
  values_[s] = std::move(v);
  positions_[s] = std::move(p);
}

template <typename T>
KVCache<T> KVCache<T>::truncated(std::size_t n) const {
  KVCache out(n_layers_, n_kv_heads_, d_head_);
  for (std::size_t s = 0; s < positions_.size(); ++s) {
    const std::size_t m = std::min(n, positions_[s].size());
    out.keys_[s].assign(keys_[s].begin(), keys_[s].begin() + m * d_head_);
    out.values_[s].assign(values_[s].begin(), values_[s].begin() + m * d_head_);
    out.positions_[s].assign(positions_[s].begin(), positions_[s].begin() + m);
  }
  return out;
}

template <typename T>
void KVCache<T>::check_invariants() const {
  for (std::size_t s = 0; s < positions_.size(); ++s) {
    const std::size_t n = positions_[s].size();
    if (keys_[s].size() != n * d_head_ || values_[s].size() != n * d_head_) {
      throw ContractError("cache slot " + std::to_string(s) + ": key/value/position lengths disagree");
    }
    for (std::size_t i = 1; i < n; ++i) {
      if (positions_[s][i - 1] >= positions_[s][i]) {
        throw ContractError("cache slot " + std::to_string(s) + ": positions not strictly increasing");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <typename T>
Tensor<T> project(const Model<T>& model, const LookaheadParams<T>* la, std::size_t layer, LinearKind kind,
                  const Tensor<T>& x, std::size_t n_la_rows) {
  Tensor<T> y = matmul(x, model.layer(layer)[kind]);
  if (la == nullptr || n_la_rows == 0) return y;
  const auto& ad = la->adapter(layer, kind);
  if (!ad) return y;
  const std::size_t n = x.dim(0);
  const Tensor<T> xs = slice_rows(x, n - n_la_rows, n);
  const Tensor<T> delta = scale(matmul_nt(matmul_nt(xs, ad->a), ad->b), la->lora_scale());
  return add_rows(y, n - n_la_rows, delta);
}

}  // namespace

template <typename T>
BlockResult<T> forward_block(const Model<T>& model, const LookaheadParams<T>* la, KVCache<T>& cache,
                             std::span<const int> tokens, std::size_t n_la_rows,
                             std::span<const std::int64_t> positions, const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config();
  const std::size_t n_tok = tokens.size();
  const std::size_t n_b = n_tok + n_la_rows;
  if (n_b == 0) throw ContractError("forward_block: empty block");
  if (positions.size() != n_b) throw DimensionError("forward_block: one position per row required");
  if (cache.n_layers() != cfg.n_layers || cache.n_kv_heads() != cfg.n_kv_heads || cache.d_head() != cfg.d_head) {
    throw ContractError("forward_block: cache structure does not match the model");
  }
  if (cache.n_lookahead_tail() != 0) {
    throw ContractError("forward_block: cache ends with lookahead slots; evict before continuing");
  }
  if (n_la_rows > 0) {
    if (la == nullptr) throw ContractError("forward_block: lookahead rows without lookahead parameters");
    if (n_la_rows != la->config().n_lookahead) {
      throw ContractError("forward_block: lookahead rows must cover every lookahead slot");
    }
    if (la->embeddings().dim(1) != cfg.d_model) throw DimensionError("lookahead embeddings width mismatch");
  }
  if (opts.probe_rows > n_b) throw ContractError("forward_block: probe rows exceed the block");
  std::int64_t prev = cache.max_position();
  for (auto p : positions) {
    if (p <= prev) {
      throw InputError("position " + std::to_string(p) + " conflicts with cached position " + std::to_string(prev));
    }
    if (static_cast<std::size_t>(p) >= cfg.max_seq_len) {
      throw InputError("position " + std::to_string(p) + " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    prev = p;
  }

  Tensor<T> x;
  if (n_tok > 0) x = gather_rows(model.embedding(), tokens);
  if (n_la_rows > 0) x = n_tok > 0 ? concat_rows<T>({x, la->embeddings()}) : la->embeddings();

  const std::size_t H = cfg.n_heads, Hkv = cfg.n_kv_heads, dh = cfg.d_head, group = cfg.group_size();
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const T eps = static_cast<T>(cfg.norm_eps);

  BlockResult<T> res;
  if (opts.probe_rows > 0) res.probs.resize(cfg.n_layers);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& w = model.layer(l);
    const Tensor<T> a = rmsnorm(x, w.attn_norm, eps);
    Tensor<T> q = project(model, la, l, LinearKind::Q, a, n_la_rows);
    Tensor<T> k = project(model, la, l, LinearKind::K, a, n_la_rows);
    const Tensor<T> v = project(model, la, l, LinearKind::V, a, n_la_rows);
    if (cfg.rope_enabled) {
      q = rope(q, positions, H, dh, cfg.rope_base);
      k = rope(k, positions, Hkv, dh, cfg.rope_base);
    }
    if (opts.record_queries) res.queries.push_back(q.detach());

    std::vector<Tensor<T>> k_full(Hkv), v_full(Hkv);
    std::vector<std::size_t> n_cached(Hkv);
    for (std::size_t g = 0; g < Hkv; ++g) {
      const Tensor<T> kg = slice_cols(k, g * dh, (g + 1) * dh);
      const Tensor<T> vg = slice_cols(v, g * dh, (g + 1) * dh);
      n_cached[g] = cache.size(l, g);
      if (n_cached[g] > 0) {
        const auto ck = cache.keys(l, g);
        const auto cv = cache.values(l, g);
        const Tensor<T> kc({n_cached[g], dh}, std::vector<T>(ck.begin(), ck.end()));
        const Tensor<T> vc({n_cached[g], dh}, std::vector<T>(cv.begin(), cv.end()));
        k_full[g] = concat_rows<T>({kc, kg});
        v_full[g] = concat_rows<T>({vc, vg});
      } else {
        k_full[g] = kg;
        v_full[g] = vg;
      }
      for (std::size_t r = 0; r < n_b; ++r) {
        cache.append(l, g, kg.data().subspan(r * dh, dh), vg.data().subspan(r * dh, dh), positions[r]);
      }
    }

    std::vector<Tensor<T>> heads(H);
    std::size_t layer_prob_elems = 0;
    if (opts.probe_rows > 0) res.probs[l].resize(H);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t g = h / group;
      const Tensor<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
      const Tensor<T> logits = scale(matmul_nt(qh, k_full[g]), inv_sqrt);
      const Tensor<T> p = softmax_rows(logits, CausalMask{n_cached[g]});
      layer_prob_elems += p.size();
      if (opts.probe_rows > 0) {
        res.probs[l][h] = opts.probe_rows == n_b ? p : slice_rows(p, n_b - opts.probe_rows, n_b);
      }
      heads[h] = matmul(p, v_full[g]);
    }
    res.peak_prob_elements = std::max(res.peak_prob_elements, layer_prob_elems);
    const Tensor<T> o = H == 1 ? heads[0] : concat_cols(heads);
    if (opts.record_attention) res.attention.push_back(o.detach());
    x = add(x, project(model, la, l, LinearKind::O, o, n_la_rows));

    const Tensor<T> m = rmsnorm(x, w.mlp_norm, eps);
    const Tensor<T> gate = silu(project(model, la, l, LinearKind::Gate, m, n_la_rows));
    const Tensor<T> up = project(model, la, l, LinearKind::Up, m, n_la_rows);
    x = add(x, project(model, la, l, LinearKind::Down, mul(gate, up), n_la_rows));
  }
  if (n_la_rows > 0) cache.set_lookahead_tail(n_la_rows);
  if (opts.compute_logits) res.logits = matmul(rmsnorm(x, model.final_norm(), eps), model.lm_head());
  return res;
}

template <typename T>
PrefillResult<T> forward_prefill(const Model<T>& model, const LookaheadParams<T>* la, std::span<const int> tokens,
                                 const PrefillOptions& opts) {
  const ModelConfig& cfg = model.config();
  const std::size_t n_tok = tokens.size();
  const std::size_t n_la = la ? la->config().n_lookahead : 0;
  const std::size_t n = n_tok + n_la;
  if (n > cfg.max_seq_len) {
    throw InputError("sequence of " + std::to_string(n) + " rows exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  if (opts.probe_rows > n) throw InputError("probe rows exceed the sequence length");
  PrefillResult<T> out;
  out.cache = KVCache<T>::empty_for(cfg);
  if (n == 0) return out;
  const auto positions = iota_positions(n);

  // Rows of the final block: the probe rows, widened to cover the lookahead slots.
  const std::size_t tail = opts.chunk_rows == 0 ? n : std::max(opts.probe_rows, n_la);
  const std::size_t head = n - tail;  // token-only prefix
  std::vector<Tensor<T>> logits;
  for (std::size_t begin = 0; begin < head;) {
    const std::size_t end = std::min(head, begin + opts.chunk_rows);
    ForwardOptions fo;
    fo.compute_logits = opts.compute_logits;
    auto r = forward_block(model, la, out.cache, tokens.subspan(begin, end - begin), 0,
                           std::span<const std::int64_t>(positions).subspan(begin, end - begin), fo);
    out.peak_prob_elements = std::max(out.peak_prob_elements, r.peak_prob_elements);
    if (opts.compute_logits) logits.push_back(r.logits);
    begin = end;
  }
  if (tail > 0) {
    ForwardOptions fo;
    fo.compute_logits = opts.compute_logits;
    fo.probe_rows = opts.probe_rows;
    fo.record_queries = opts.record_queries;
    const std::size_t tail_tokens = n_tok - head;
    out.probe = forward_block(model, la, out.cache, tokens.subspan(head, tail_tokens), n_la,
                              std::span<const std::int64_t>(positions).subspan(head, tail), fo);
    out.peak_prob_elements = std::max(out.peak_prob_elements, out.probe.peak_prob_elements);
    if (opts.compute_logits) logits.push_back(out.probe.logits);
  }
  if (opts.compute_logits) out.logits = logits.size() == 1 ? logits[0] : concat_rows(logits);
  return out;
}

template <typename T>
std::vector<T> decode_step(const Model<T>& model, KVCache<T>& cache, int token, std::int64_t position) {
  if (position <= cache.max_position()) {
    throw InputError("decode position " + std::to_string(position) + " conflicts with cache max " +
                     std::to_string(cache.max_position()));
  }
  const int ids[1] = {token};
  const std::int64_t pos[1] = {position};
  auto r = forward_block<T>(model, nullptr, cache, ids, 0, pos, ForwardOptions{});
  return std::vector<T>(r.logits.data().begin(), r.logits.data().end());
}

template <typename T>
std::vector<double> attend_cached(const KVCache<T>& cache, std::size_t layer, std::size_t g,
                                  std::span<const T> query, std::size_t limit) {
  const std::size_t dh = cache.d_head();
  if (query.size() != dh) throw DimensionError("attend_cached: query width mismatch");
  const std::size_t n = std::min(limit, cache.size(layer, g));
  if (n == 0) throw ContractError("attend_cached: no entries to attend to");
  const auto keys = cache.keys(layer, g);
  const auto values = cache.values(layer, g);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> logits(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < dh; ++c) acc += static_cast<double>(query[c]) * static_cast<double>(keys[j * dh + c]);
    logits[j] = acc * inv;
    mx = std::max(mx, logits[j]);
  }
  double sum = 0.0;
  for (auto& v : logits) {
    v = std::exp(v - mx);
    sum += v;
  }
  std::vector<double> out(dh, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double p = logits[j] / sum;
    for (std::size_t c = 0; c < dh; ++c) out[c] += p * static_cast<double>(values[j * dh + c]);
  }
  return out;
}

#define KVLAB_INSTANTIATE(T)                                                                                  \
  template class Model<T>;                                                                                    \
  template class LookaheadParams<T>;                                                                          \
  template class KVCache<T>;                                                                                  \
  template BlockResult<T> forward_block<T>(const Model<T>&, const LookaheadParams<T>*, KVCache<T>&,           \
                                           std::span<const int>, std::size_t, std::span<const std::int64_t>, \
                                           const ForwardOptions&);                                            \
  template PrefillResult<T> forward_prefill<T>(const Model<T>&, const LookaheadParams<T>*,                    \
                                               std::span<const int>, const PrefillOptions&);                  \
  template std::vector<T> decode_step<T>(const Model<T>&, KVCache<T>&, int, std::int64_t);                    \
  template std::vector<double> attend_cached<T>(const KVCache<T>&, std::size_t, std::size_t,                  \
                                                std::span<const T>, std::size_t);

KVLAB_INSTANTIATE(float)
KVLAB_INSTANTIATE(double)

#undef KVLAB_INSTANTIATE

}  // namespace kvlab
