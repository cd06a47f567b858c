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

#include "kvlab/eviction.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

#include "kvlab/generation.hpp"

namespace kvlab {

RetainedSet RetainedSet::all(std::size_t n_layers, std::size_t n_kv_heads, std::size_t n_in) {
  RetainedSet r{n_layers, n_kv_heads, n_in, {}};
  std::vector<std::size_t> every(n_in);
  std::iota(every.begin(), every.end(), std::size_t{0});
  r.indices.assign(n_layers * n_kv_heads, every);
  return r;
}

std::vector<std::size_t> select_topk(std::span<const double> v, std::size_t k) {
  if (v.empty()) throw InputError("select_topk: empty score vector");
  if (k == 0) throw ContractError("select_topk: k must be >= 1");
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k >= v.size()) return idx;
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

RetainedSet retain_topk(const ImportanceScores& kv_scores, const std::vector<std::size_t>& budgets) {
  if (kv_scores.head_space != HeadSpace::KV) throw ContractError("retain_topk expects kv-head scores");
  if (budgets.size() != kv_scores.n_layers) throw ContractError("retain_topk: one budget per layer required");
  RetainedSet r{kv_scores.n_layers, kv_scores.n_heads, kv_scores.n_cols, {}};
  r.indices.resize(kv_scores.n_layers * kv_scores.n_heads);
  for (std::size_t l = 0; l < kv_scores.n_layers; ++l) {
    for (std::size_t g = 0; g < kv_scores.n_heads; ++g) r.at(l, g) = select_topk(kv_scores.row(l, g), budgets[l]);
  }
  return r;
}

template <typename T>
KVCache<T> compress_cache(const KVCache<T>& cache, const RetainedSet& retained) {
  if (retained.n_layers != cache.n_layers() || retained.n_kv_heads != cache.n_kv_heads() ||
      retained.indices.size() != retained.n_layers * retained.n_kv_heads) {
    throw ContractError("compress_cache: retained set does not match the cache structure");
  }
  KVCache<T> out = cache;
  out.set_lookahead_tail(0);
  for (std::size_t l = 0; l < retained.n_layers; ++l) {
    for (std::size_t g = 0; g < retained.n_kv_heads; ++g) {
      const auto& rows = retained.at(l, g);
      if (rows.empty()) throw ContractError("compress_cache: empty retained set");
      const std::size_t prompt_rows = cache.size(l, g) - cache.n_lookahead_tail();
      for (auto r : rows) {
        if (r >= retained.n_in || r >= prompt_rows) {
          throw ContractError("compress_cache: index " + std::to_string(r) + " outside the prompt");
        }
      }
      out.keep_rows(l, g, rows);
    }
  }
  return out;
}

std::string to_string(Policy p) {
  switch (p) {
    case Policy::Lookahead: return "lookahead";
    case Policy::SnapKV: return "snapkv";
    case Policy::PyramidKV: return "pyramidkv";
    case Policy::Streaming: return "streaming";
    case Policy::LAQ: return "laq";
    case Policy::SpecKV: return "speckv";
    case Policy::GT: return "gt";
    case Policy::Random: return "random";
  }
  return "?";
}

Policy parse_policy(const std::string& s) {
  for (Policy p : {Policy::Lookahead, Policy::SnapKV, Policy::PyramidKV, Policy::Streaming, Policy::LAQ,
                   Policy::SpecKV, Policy::GT, Policy::Random}) {
    if (to_string(p) == s) return p;
  }
  throw ConfigError("unknown policy '" + s + "'");
}

std::vector<std::size_t> pyramid_budgets(std::size_t n_layers, std::size_t k, double beta, std::size_t min_budget) {
  if (n_layers == 0) throw ConfigError("pyramid_budgets: no layers");
  if (n_layers == 1) return {std::max(k, min_budget)};
  std::vector<std::size_t> b(n_layers);
  const double span = static_cast<double>(n_layers - 1);
  for (std::size_t l = 0; l < n_layers; ++l) {
    const double ramp = static_cast<double>(static_cast<long long>(n_layers - 1) - 2 * static_cast<long long>(l));
    const auto offset = static_cast<long long>(std::trunc(static_cast<double>(k) * beta * ramp / span));
    b[l] = static_cast<std::size_t>(std::max<long long>(0, static_cast<long long>(k) + offset));
  }
  std::size_t deficit = 0;
  for (auto& v : b) {
    if (v < min_budget) {
      deficit += min_budget - v;
      v = min_budget;
    }
  }
  while (deficit > 0) {
    std::size_t best = n_layers;
    for (std::size_t l = 0; l < n_layers; ++l) {
      if (b[l] > min_budget && (best == n_layers || b[l] > b[best])) best = l;
    }
    if (best == n_layers) break;  // L * k < L * min_budget: keep the floor
    --b[best];
    --deficit;
  }
  return b;
}

namespace {

template <typename T>
std::vector<T> logits_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t V = logits.dim(1);
  const auto d = logits.data().subspan(row * V, V);
  return std::vector<T>(d.begin(), d.end());
}

template <typename T>
PrefillResult<T> prefill(const Model<T>& model, const LookaheadParams<T>* la, std::span<const int> X,
                         std::size_t probe_rows) {
  if (X.empty()) throw InputError("eviction needs a non-empty prompt");
  PrefillOptions opts;
  opts.probe_rows = probe_rows;
  return forward_prefill<T>(model, la, X, opts);
}

template <typename T>
EvictionResult<T> keep_everything(PrefillResult<T>&& pre, std::size_t n_in, const ModelConfig& cfg) {
  EvictionResult<T> out;
  out.retained = RetainedSet::all(cfg.n_layers, cfg.n_kv_heads, n_in);
  out.last_logits = logits_row(pre.logits, n_in - 1);
  out.cache = compress_cache(pre.cache.truncated(n_in), out.retained);
  return out;
}

void check_window_budget(const EvictionConfig& cfg) {
  if (cfg.window == 0) throw ConfigError("observation window must be >= 1");
  if (cfg.budget <= cfg.window) {
    throw ConfigError("budget " + std::to_string(cfg.budget) + " must exceed the observation window " +
                      std::to_string(cfg.window));
  }
}

// Top (b_l - window) outside the window plus the window itself, per layer.
RetainedSet window_select(const ImportanceScores& kv_scores, const std::vector<std::size_t>& budgets, std::size_t n_in,
                          std::size_t window) {
  RetainedSet r{kv_scores.n_layers, kv_scores.n_heads, n_in, {}};
  r.indices.resize(kv_scores.n_layers * kv_scores.n_heads);
  for (std::size_t l = 0; l < kv_scores.n_layers; ++l) {
    for (std::size_t g = 0; g < kv_scores.n_heads; ++g) {
      auto& dst = r.at(l, g);
      if (budgets[l] >= n_in) {
        dst.resize(n_in);
        std::iota(dst.begin(), dst.end(), std::size_t{0});
        continue;
      }
      dst = select_topk(kv_scores.row(l, g), budgets[l] - window);
      for (std::size_t j = n_in - window; j < n_in; ++j) dst.push_back(j);
    }
  }
  return r;
}

template <typename T>
struct SnapStage {
  PrefillResult<T> full;
  ImportanceScores kv_scores;
  RetainedSet retained;
};

template <typename T>
SnapStage<T> snap_stage(const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg,
                        const std::vector<std::size_t>& budgets) {
  const ModelConfig& mc = model.config();
  const std::size_t n_in = X.size();
  SnapStage<T> st{prefill<T>(model, nullptr, X, cfg.window), {}, {}};
  const auto q = scores_from_probs(st.full.probe.probs, n_in - cfg.window);
  st.kv_scores = eviction_scores(q, mc.n_heads, mc.n_kv_heads, cfg.pooling_kernel);
  st.retained = window_select(st.kv_scores, budgets, n_in, cfg.window);
  return st;
}

template <typename T>
EvictionResult<T> finish(PrefillResult<T>& pre, std::size_t n_in, RetainedSet retained, ImportanceScores scores) {
  EvictionResult<T> out;
  out.last_logits = logits_row(pre.logits, n_in - 1);
  out.cache = compress_cache(pre.cache, retained);
  out.retained = std::move(retained);
  out.scores = std::move(scores);
  return out;
}

std::vector<std::size_t> uniform_budgets(std::size_t n_layers, std::size_t k) {
  return std::vector<std::size_t>(n_layers, k);
}

}  // namespace

template <typename T>
EvictionResult<T> evict_lookahead(const Model<T>& model, const LookaheadParams<T>& la, std::span<const int> X,
                                  const EvictionConfig& cfg) {
  if (cfg.budget == 0) throw ConfigError("budget must be >= 1");
  const ModelConfig& mc = model.config();
  const std::size_t n_in = X.size();
  if (cfg.budget >= n_in) return keep_everything(prefill<T>(model, nullptr, X, 0), n_in, mc);
  const std::size_t m = la.config().n_lookahead;
  const bool combine = cfg.combine_suffix;
  const std::size_t w = combine ? std::min(cfg.window, n_in) : 0;
  auto pre = prefill<T>(model, &la, X, m + w);
  std::vector<std::vector<Tensor<T>>> la_rows(mc.n_layers), suffix_rows(mc.n_layers);
  for (std::size_t l = 0; l < mc.n_layers; ++l) {
    for (const auto& p : pre.probe.probs[l]) {
      la_rows[l].push_back(w == 0 ? p : slice_rows(p, w, w + m));
      if (w > 0) suffix_rows[l].push_back(slice_rows(p, 0, w));
    }
  }
  auto q = scores_from_probs(la_rows, n_in);
  if (combine) q = combine_with_suffix(q, scores_from_probs(suffix_rows, n_in));
  auto kv = eviction_scores(q, mc.n_heads, mc.n_kv_heads, cfg.pooling_kernel);
  auto retained = retain_topk(kv, uniform_budgets(mc.n_layers, cfg.budget));
  return finish(pre, n_in, std::move(retained), std::move(kv));
}

template <typename T>
EvictionResult<T> evict_snapkv(const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg) {
  check_window_budget(cfg);
  const std::size_t n_in = X.size();
  if (cfg.budget >= n_in) return keep_everything(prefill<T>(model, nullptr, X, 0), n_in, model.config());
  auto st = snap_stage(model, X, cfg, uniform_budgets(model.config().n_layers, cfg.budget));
  return finish(st.full, n_in, std::move(st.retained), std::move(st.kv_scores));
}

template <typename T>
EvictionResult<T> evict_pyramidkv(const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg) {
  check_window_budget(cfg);
  const std::size_t n_in = X.size();
  if (cfg.budget >= n_in) return keep_everything(prefill<T>(model, nullptr, X, 0), n_in, model.config());
  const auto budgets = pyramid_budgets(model.config().n_layers, cfg.budget, cfg.pyramid_beta, cfg.window + 1);
  auto st = snap_stage(model, X, cfg, budgets);
  return finish(st.full, n_in, std::move(st.retained), std::move(st.kv_scores));
}

RetainedSet streaming_retained(std::size_t n_layers, std::size_t n_kv_heads, std::size_t n_in, std::size_t budget,
                               std::size_t n_sink) {
  if (budget <= n_sink) {
    throw ConfigError("streaming budget " + std::to_string(budget) + " must exceed n_sink " + std::to_string(n_sink));
  }
  if (budget >= n_in) return RetainedSet::all(n_layers, n_kv_heads, n_in);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n_sink; ++i) keep.push_back(i);
  for (std::size_t i = n_in - (budget - n_sink); i < n_in; ++i) keep.push_back(i);
  RetainedSet r{n_layers, n_kv_heads, n_in, {}};
  r.indices.assign(n_layers * n_kv_heads, keep);
  return r;
}

template <typename T>
EvictionResult<T> evict_streaming(const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg) {
  const ModelConfig& mc = model.config();
  auto retained = streaming_retained(mc.n_layers, mc.n_kv_heads, X.size(), cfg.budget, cfg.n_sink);
  auto pre = prefill<T>(model, nullptr, X, 0);
  return finish(pre, X.size(), std::move(retained), ImportanceScores{});
}

template <typename T>
EvictionResult<T> evict_laq(const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg) {
  check_window_budget(cfg);
  const ModelConfig& mc = model.config();
  const std::size_t n_in = X.size();
  if (cfg.budget >= n_in) return keep_everything(prefill<T>(model, nullptr, X, 0), n_in, mc);
  const auto budgets = uniform_budgets(mc.n_layers, cfg.budget);
  auto st = snap_stage(model, X, cfg, budgets);
  if (cfg.draft_len == 0) return finish(st.full, n_in, std::move(st.retained), std::move(st.kv_scores));

  KVCache<T> draft_cache = compress_cache(st.full.cache, st.retained);
  GenSpec gen;
  gen.max_new_tokens = cfg.draft_len;
  auto draft = continue_generation(model, draft_cache, logits_row(st.full.logits, n_in - 1),
                                   static_cast<std::int64_t>(n_in), gen);
  const auto q = appended_window_importance(model, st.full.cache, n_in, std::span<const int>(draft));
  auto kv = eviction_scores(q, mc.n_heads, mc.n_kv_heads, cfg.pooling_kernel);
  auto retained = retain_topk(kv, budgets);
  auto out = finish(st.full, n_in, std::move(retained), std::move(kv));
  out.draft = std::move(draft);
  return out;
}

template <typename T>
EvictionResult<T> evict_speckv(const Model<T>& target, const Model<T>& draft_model, std::span<const int> X,
                               const EvictionConfig& cfg) {
  const ModelConfig& mc = target.config();
  if (draft_model.config().vocab_size != mc.vocab_size) {
    throw ConfigError("draft model vocabulary (" + std::to_string(draft_model.config().vocab_size) +
                      ") differs from the target's (" + std::to_string(mc.vocab_size) + ")");
  }
  if (cfg.budget == 0) throw ConfigError("budget must be >= 1");
  const std::size_t n_in = X.size();
  auto pre = prefill<T>(target, nullptr, X, 0);
  if (cfg.budget >= n_in) return keep_everything(std::move(pre), n_in, mc);
  if (cfg.draft_len == 0) throw ConfigError("speckv needs draft_len >= 1");
  GenSpec gen;
  gen.max_new_tokens = cfg.draft_len;
  auto draft = generate(draft_model, X, gen);
  const auto q = appended_window_importance(target, pre.cache, n_in, std::span<const int>(draft));
  auto kv = eviction_scores(q, mc.n_heads, mc.n_kv_heads, cfg.pooling_kernel);
  auto retained = retain_topk(kv, uniform_budgets(mc.n_layers, cfg.budget));
  auto out = finish(pre, n_in, std::move(retained), std::move(kv));
  out.draft = std::move(draft);
  return out;
}

template <typename T>
EvictionResult<T> evict_gt(const Model<T>& model, std::span<const int> X, std::span<const int> Y,
                           const EvictionConfig& cfg) {
  if (cfg.budget == 0) throw ConfigError("budget must be >= 1");
  if (Y.empty()) throw ContractError("gt eviction needs the response");
  const ModelConfig& mc = model.config();
  const std::size_t n_in = X.size();
  std::vector<int> seq(X.begin(), X.end());
  seq.insert(seq.end(), Y.begin(), Y.end());
  auto pre = prefill<T>(model, nullptr, seq, Y.size());
  if (cfg.budget >= n_in) return keep_everything(std::move(pre), n_in, mc);
  const auto q = scores_from_probs(pre.probe.probs, n_in);
  auto kv = eviction_scores(q, mc.n_heads, mc.n_kv_heads, cfg.pooling_kernel);
  pre.cache = pre.cache.truncated(n_in);
  auto retained = retain_topk(kv, uniform_budgets(mc.n_layers, cfg.budget));
  return finish(pre, n_in, std::move(retained), std::move(kv));
}

template <typename T>
EvictionResult<T> evict_random(const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg) {
  if (cfg.budget == 0) throw ConfigError("budget must be >= 1");
  const ModelConfig& mc = model.config();
  const std::size_t n_in = X.size();
  auto pre = prefill<T>(model, nullptr, X, 0);
  if (cfg.budget >= n_in) return keep_everything(std::move(pre), n_in, mc);
  std::mt19937_64 rng(cfg.rng_seed);
  RetainedSet r{mc.n_layers, mc.n_kv_heads, n_in, {}};
  r.indices.resize(mc.n_layers * mc.n_kv_heads);
  for (auto& set : r.indices) {
    std::vector<std::size_t> all(n_in);
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(cfg.budget);
    std::sort(all.begin(), all.end());
    set = std::move(all);
  }
  return finish(pre, n_in, std::move(r), ImportanceScores{});
}

template <typename T>
EvictionResult<T> evict(Policy policy, const Model<T>& model, std::span<const int> X, const EvictionConfig& cfg,
                        const PolicyInputs<T>& inputs) {
  switch (policy) {
    case Policy::Lookahead:
      if (!inputs.lookahead) throw ConfigError("lookahead policy needs lookahead parameters");
      return evict_lookahead(model, *inputs.lookahead, X, cfg);
    case Policy::SnapKV: return evict_snapkv(model, X, cfg);
    case Policy::PyramidKV: return evict_pyramidkv(model, X, cfg);
    case Policy::Streaming: return evict_streaming(model, X, cfg);
    case Policy::LAQ: return evict_laq(model, X, cfg);
    case Policy::SpecKV:
      if (!inputs.draft_model) throw ConfigError("speckv policy needs a draft model");
      return evict_speckv(model, *inputs.draft_model, X, cfg);
    case Policy::GT: return evict_gt(model, X, inputs.response, cfg);
    case Policy::Random: return evict_random(model, X, cfg);
  }
  throw ConfigError("unknown policy");
}

std::string retained_to_json(const RetainedSet& retained) {
  auto arr = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < retained.n_layers; ++l) {
    for (std::size_t g = 0; g < retained.n_kv_heads; ++g) {
      nlohmann::ordered_json j;
      j["layer"] = l;
      j["kv_head"] = g;
      j["indices"] = retained.at(l, g);
      arr.push_back(j);
    }
  }
  return arr.dump();
}

#define KVLAB_INSTANTIATE(T)                                                                                       \
  template KVCache<T> compress_cache<T>(const KVCache<T>&, const RetainedSet&);                                    \
  template EvictionResult<T> evict_lookahead<T>(const Model<T>&, const LookaheadParams<T>&, std::span<const int>, \
                                                const EvictionConfig&);                                            \
  template EvictionResult<T> evict_snapkv<T>(const Model<T>&, std::span<const int>, const EvictionConfig&);        \
  template EvictionResult<T> evict_pyramidkv<T>(const Model<T>&, std::span<const int>, const EvictionConfig&);     \
  template EvictionResult<T> evict_streaming<T>(const Model<T>&, std::span<const int>, const EvictionConfig&);     \
  template EvictionResult<T> evict_laq<T>(const Model<T>&, std::span<const int>, const EvictionConfig&);           \
  template EvictionResult<T> evict_speckv<T>(const Model<T>&, const Model<T>&, std::span<const int>,               \
                                             const EvictionConfig&);                                               \
  template EvictionResult<T> evict_gt<T>(const Model<T>&, std::span<const int>, std::span<const int>,              \
                                         const EvictionConfig&);                                                   \
  template EvictionResult<T> evict_random<T>(const Model<T>&, std::span<const int>, const EvictionConfig&);        \
  template EvictionResult<T> evict<T>(Policy, const Model<T>&, std::span<const int>, const EvictionConfig&,        \
                                      const PolicyInputs<T>&);

KVLAB_INSTANTIATE(float)
KVLAB_INSTANTIATE(double)

#undef KVLAB_INSTANTIATE

}  // namespace kvlab
