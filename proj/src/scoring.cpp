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

#include "kvlab/scoring.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

namespace kvlab {

std::string to_string(HeadSpace s) { return s == HeadSpace::Query ? "query-heads" : "kv-heads"; }

ImportanceScores ImportanceScores::zeros(HeadSpace space, std::size_t n_layers, std::size_t n_heads,
                                         std::size_t n_cols) {
  ImportanceScores s;
  s.head_space = space;
  s.n_layers = n_layers;
  s.n_heads = n_heads;
  s.n_cols = n_cols;
  s.values.assign(n_layers * n_heads * n_cols, 0.0);
  return s;
}

template <typename T>
ImportanceScores scores_from_probs(const std::vector<std::vector<Tensor<T>>>& probs, std::size_t n_cols) {
  if (probs.empty() || probs[0].empty()) throw ContractError("scores_from_probs: no probability rows recorded");
  auto out = ImportanceScores::zeros(HeadSpace::Query, probs.size(), probs[0].size(), n_cols);
  for (std::size_t l = 0; l < probs.size(); ++l) {
    for (std::size_t h = 0; h < probs[l].size(); ++h) {
      const Tensor<T>& p = probs[l][h];
      const std::size_t rows = p.dim(0), cols = p.dim(1);
      if (rows == 0) throw ContractError("scores_from_probs: empty window");
      if (cols < n_cols) throw DimensionError("scores_from_probs: fewer columns than requested");
      auto dst = out.row(l, h);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n_cols; ++j) dst[j] += static_cast<double>(p.data()[i * cols + j]);
      for (auto& v : dst) v /= static_cast<double>(rows);
    }
  }
  return out;
}

template <typename T>
ImportanceScores gt_importance(const Model<T>& model, std::span<const int> X, std::span<const int> Y,
                               std::size_t chunk_rows, std::size_t* peak_prob_elements) {
  if (Y.empty()) throw ContractError("gt_importance: response must hold at least one token");
  std::vector<int> seq(X.begin(), X.end());
  seq.insert(seq.end(), Y.begin(), Y.end());
  PrefillOptions opts;
  opts.compute_logits = false;
  opts.probe_rows = Y.size();
  opts.chunk_rows = chunk_rows;
  auto r = forward_prefill<T>(model, nullptr, seq, opts);
  if (peak_prob_elements) *peak_prob_elements = r.peak_prob_elements;
  return scores_from_probs(r.probe.probs, X.size());
}

template <typename T>
ImportanceScores surrogate_importance(const Model<T>& model, std::span<const int> X, const WindowSpec& window) {
  if (!window.appended.empty()) {
    if (window.suffix != 0) throw ContractError("surrogate_importance: window is either suffix or appended");
    return gt_importance(model, X, std::span<const int>(window.appended));
  }
  const std::size_t w = window.suffix;
  if (w == 0) throw InputError("surrogate_importance: empty observation window");
  if (w >= X.size()) {
    throw InputError("surrogate_importance: window of " + std::to_string(w) + " rows leaves no prompt columns in " +
                     std::to_string(X.size()) + " tokens");
  }
  PrefillOptions opts;
  opts.compute_logits = false;
  opts.probe_rows = w;
  auto r = forward_prefill<T>(model, nullptr, X, opts);
  return scores_from_probs(r.probe.probs, X.size() - w);
}

template <typename T>
ImportanceScores appended_window_importance(const Model<T>& model, const KVCache<T>& prompt_cache, std::size_t n_in,
                                            std::span<const int> window_tokens) {
  if (window_tokens.empty()) throw InputError("appended window is empty");
  KVCache<T> cache = prompt_cache;
  const auto positions = iota_positions(window_tokens.size(), static_cast<std::int64_t>(n_in));
  ForwardOptions opts;
  opts.compute_logits = false;
  opts.probe_rows = window_tokens.size();
  auto r = forward_block<T>(model, nullptr, cache, window_tokens, 0, positions, opts);
  return scores_from_probs(r.probs, n_in);
}

template <typename T>
ImportanceScores lookahead_importance(const Model<T>& model, const LookaheadParams<T>& la, std::span<const int> X) {
  PrefillOptions opts;
  opts.compute_logits = false;
  opts.probe_rows = la.config().n_lookahead;
  auto r = forward_prefill<T>(model, &la, X, opts);
  return scores_from_probs(r.probe.probs, X.size());
}

ImportanceScores gqa_mean_reduce(const ImportanceScores& scores, std::size_t n_heads, std::size_t n_kv_heads) {
  if (scores.head_space != HeadSpace::Query) throw ContractError("gqa_mean_reduce expects query-head scores");
  if (scores.n_heads != n_heads || n_kv_heads == 0 || n_heads % n_kv_heads != 0) {
    throw ContractError("gqa_mean_reduce: head counts do not match the scores");
  }
  const std::size_t group = n_heads / n_kv_heads;
  auto out = ImportanceScores::zeros(HeadSpace::KV, scores.n_layers, n_kv_heads, scores.n_cols);
  for (std::size_t l = 0; l < scores.n_layers; ++l) {
    for (std::size_t g = 0; g < n_kv_heads; ++g) {
      auto dst = out.row(l, g);
      for (std::size_t i = 0; i < group; ++i) {
        const auto src = scores.row(l, g * group + i);
        for (std::size_t j = 0; j < scores.n_cols; ++j) dst[j] += src[j];
      }
      for (auto& v : dst) v /= static_cast<double>(group);
    }
  }
  return out;
}

std::vector<double> maxpool1d(std::span<const double> v, std::size_t kernel) {
  if (kernel == 0 || kernel % 2 == 0) throw ConfigError("maxpool kernel must be odd and >= 1");
  const std::size_t radius = kernel / 2;
  const std::size_t n = v.size();
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t lo = j >= radius ? j - radius : 0;
    const std::size_t hi = std::min(n - 1, j + radius);
    double m = v[lo];
    for (std::size_t i = lo + 1; i <= hi; ++i) m = std::max(m, v[i]);
    out[j] = m;
  }
  return out;
}

ImportanceScores maxpool_scores(const ImportanceScores& scores, std::size_t kernel) {
  ImportanceScores out = scores;
  if (kernel == 1) {
    maxpool1d({}, kernel);  // validates
    return out;
  }
  for (std::size_t l = 0; l < scores.n_layers; ++l) {
    for (std::size_t h = 0; h < scores.n_heads; ++h) {
      const auto pooled = maxpool1d(scores.row(l, h), kernel);
      std::copy(pooled.begin(), pooled.end(), out.row(l, h).begin());
    }
  }
  return out;
}

std::vector<double> l1_normalize(std::span<const double> v) {
  double norm = 0.0;
  for (double x : v) norm += std::abs(x);
  if (!(norm > 0.0)) throw ContractError("l1_normalize: zero vector");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / norm;
  return out;
}

ImportanceScores combine_with_suffix(const ImportanceScores& lkv, const ImportanceScores& snap) {
  if (!lkv.same_shape(snap)) throw DimensionError("combine_with_suffix: score shapes differ");
  ImportanceScores out = lkv;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = (lkv.values[i] + snap.values[i]) / 2.0;
  return out;
}

ImportanceScores eviction_scores(const ImportanceScores& query_scores, std::size_t n_heads, std::size_t n_kv_heads,
                                 std::size_t kernel) {
  return maxpool_scores(gqa_mean_reduce(query_scores, n_heads, n_kv_heads), kernel);
}

template <typename T>
CrossScores blockwise_cross_scores(const Model<T>& model, std::span<const int> tokens, std::size_t tail_rows) {
  if (tail_rows == 0 || tail_rows > tokens.size()) {
    throw InputError("blockwise_cross_scores: tail of " + std::to_string(tail_rows) + " rows for " +
                     std::to_string(tokens.size()) + " tokens");
  }
  const std::size_t n_in = tokens.size() - tail_rows;
  CrossScores out;
  out.scores = gt_importance(model, tokens.first(n_in), tokens.subspan(n_in), tail_rows, &out.peak_prob_elements);
  return out;
}

std::string scores_to_jsonl(const ImportanceScores& scores) {
  std::string out;
  for (std::size_t l = 0; l < scores.n_layers; ++l) {
    for (std::size_t h = 0; h < scores.n_heads; ++h) {
      nlohmann::ordered_json j;
      j["layer"] = l;
      j["head"] = h;
      j["head_space"] = to_string(scores.head_space);
      const auto row = scores.row(l, h);
      j["values"] = std::vector<double>(row.begin(), row.end());
      out += j.dump() + "\n";
    }
  }
  return out;
}

ImportanceScores scores_from_jsonl(const std::string& text) {
  ImportanceScores out;
  std::istringstream in(text);
  std::string line;
  std::size_t expect = 0;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const auto layer = j.at("layer").get<std::size_t>();
      const auto head = j.at("head").get<std::size_t>();
      const auto space = j.at("head_space").get<std::string>();
      const auto values = j.at("values").get<std::vector<double>>();
      if (expect == 0) {
        out.head_space = space == to_string(HeadSpace::KV) ? HeadSpace::KV : HeadSpace::Query;
        out.n_cols = values.size();
      }
      if (values.size() != out.n_cols || to_string(out.head_space) != space) {
        throw InputError("score file: rows disagree in width or head space");
      }
      out.n_layers = std::max(out.n_layers, layer + 1);
      out.n_heads = std::max(out.n_heads, head + 1);
      out.values.insert(out.values.end(), values.begin(), values.end());
      ++expect;
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("score file: ") + e.what());
  }
  if (expect == 0 || expect != out.n_layers * out.n_heads) throw InputError("score file: incomplete (layer, head) grid");
  return out;
}

#define KVLAB_INSTANTIATE(T)                                                                                 \
  template ImportanceScores scores_from_probs<T>(const std::vector<std::vector<Tensor<T>>>&, std::size_t);   \
  template ImportanceScores gt_importance<T>(const Model<T>&, std::span<const int>, std::span<const int>,    \
                                             std::size_t, std::size_t*);                                     \
  template ImportanceScores surrogate_importance<T>(const Model<T>&, std::span<const int>, const WindowSpec&); \
  template ImportanceScores appended_window_importance<T>(const Model<T>&, const KVCache<T>&, std::size_t,   \
                                                          std::span<const int>);                             \
  template ImportanceScores lookahead_importance<T>(const Model<T>&, const LookaheadParams<T>&,              \
                                                    std::span<const int>);                                   \
  template CrossScores blockwise_cross_scores<T>(const Model<T>&, std::span<const int>, std::size_t);

KVLAB_INSTANTIATE(float)
KVLAB_INSTANTIATE(double)

#undef KVLAB_INSTANTIATE

}  // namespace kvlab
