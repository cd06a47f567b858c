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

#include "kvlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>

#include "kvlab/errors.hpp"

namespace kvlab {

namespace {

void check_k(std::size_t n, std::size_t k, const char* what) {
  if (k == 0) throw ContractError(std::string(what) + ": k must be >= 1");
  if (k > n) {
    throw ContractError(std::string(what) + ": k = " + std::to_string(k) + " exceeds length " + std::to_string(n));
  }
}

// Ties counted as pairs within runs of equal values of a sorted sequence.
std::uint64_t tied_pairs(const std::vector<double>& sorted) {
  std::uint64_t total = 0, run = 1;
  for (std::size_t i = 1; i <= sorted.size(); ++i) {
    if (i < sorted.size() && sorted[i] == sorted[i - 1]) {
      ++run;
    } else {
      total += run * (run - 1) / 2;
      run = 1;
    }
  }
  return total;
}

// Merge sort that counts inversions (strictly decreasing pairs).
std::uint64_t sort_count_swaps(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::uint64_t swaps = sort_count_swaps(v, buf, lo, mid) + sort_count_swaps(v, buf, mid, hi);
  std::size_t i = lo, j = mid, o = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += mid - i;
      buf[o++] = v[j++];
    } else {
      buf[o++] = v[i++];
    }
  }
  while (i < mid) buf[o++] = v[i++];
  while (j < hi) buf[o++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

}  // namespace

double recall_at_k(std::span<const double> gt, std::span<const double> est, std::size_t k) {
  if (gt.size() != est.size()) throw DimensionError("recall_at_k: score vectors differ in length");
  check_k(gt.size(), k, "recall_at_k");
  return retained_recall(gt, select_topk(est, k), k);
}

double retained_recall(std::span<const double> gt, std::span<const std::size_t> retained, std::size_t k) {
  check_k(gt.size(), k, "retained_recall");
  const auto top = select_topk(gt, k);
  const std::set<std::size_t> truth(top.begin(), top.end());
  std::size_t hit = 0;
  for (const auto i : retained) hit += truth.count(i);
  return static_cast<double>(hit) / static_cast<double>(k);
}

double kendall_tau(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("kendall_tau: vectors differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw ContractError("kendall_tau: need at least two elements");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw ContractError("kendall_tau: non-finite value");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return a[i] != a[j] ? a[i] < a[j] : b[i] < b[j];
  });

  std::vector<double> sa(n), sb(n);
  for (std::size_t i = 0; i < n; ++i) {
    sa[i] = a[order[i]];
    sb[i] = b[order[i]];
  }
  const std::uint64_t n0 = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  const std::uint64_t n1 = tied_pairs(sa);
  std::uint64_t n3 = 0, run = 1;  // pairs tied in both
  for (std::size_t i = 1; i <= n; ++i) {
    if (i < n && sa[i] == sa[i - 1] && sb[i] == sb[i - 1]) {
      ++run;
    } else {
      n3 += run * (run - 1) / 2;
      run = 1;
    }
  }
  std::vector<double> buf(n);
  const std::uint64_t swaps = sort_count_swaps(sb, buf, 0, n);
  const std::uint64_t n2 = tied_pairs(sb);
  if (n1 == n0 || n2 == n0) throw ContractError("kendall_tau: undefined for a constant vector");
  // concordant - discordant = n0 - n1 - n2 + n3 - 2 * swaps
  const double num = static_cast<double>(static_cast<std::int64_t>(n0 - n1 - n2 + n3) -
                                         2 * static_cast<std::int64_t>(swaps));
  return num / std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
}

template <typename T>
AttnProbes<T> response_probes(const Model<T>& model, std::span<const int> X, std::span<const int> Y) {
  if (X.empty() || Y.empty()) throw ContractError("response_probes: prompt and response must be non-empty");
  PrefillOptions popts;
  popts.compute_logits = false;
  auto prefill = forward_prefill<T>(model, nullptr, X, popts);
  ForwardOptions fopts;
  fopts.compute_logits = false;
  fopts.record_queries = true;
  const auto positions = iota_positions(Y.size(), static_cast<std::int64_t>(X.size()));
  auto block = forward_block<T>(model, nullptr, prefill.cache, Y, 0, positions, fopts);
  return AttnProbes<T>{std::move(block.queries)};
}

template <typename T>
double attn_output_error(const Model<T>& model, const KVCache<T>& prompt_cache, const RetainedSet& retained,
                         const AttnProbes<T>& probes) {
  const auto& cfg = model.config();
  if (probes.queries.size() != cfg.n_layers || probes.rows() == 0) {
    throw ContractError("attn_output_error: probes must hold at least one row for every layer");
  }
  const KVCache<T> compressed = compress_cache(prompt_cache, retained);
  const std::size_t dh = cfg.d_head, group = cfg.group_size();
  double total = 0.0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& q = probes.queries[l];
    for (std::size_t r = 0; r < q.rows(); ++r) {
      double sq = 0.0;
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t g = h / group;
        const std::span<const T> qh = q.data().subspan(r * q.cols() + h * dh, dh);
        const auto full = attend_cached(prompt_cache, l, g, qh, prompt_cache.size(l, g));
        const auto kept = attend_cached(compressed, l, g, qh, compressed.size(l, g));
        for (std::size_t c = 0; c < dh; ++c) sq += (full[c] - kept[c]) * (full[c] - kept[c]);
      }
      total += std::sqrt(sq);
    }
  }
  return total / static_cast<double>(cfg.n_layers * probes.rows());
}

template <typename T>
double attn_output_error(const Model<T>& model, std::span<const int> X, const RetainedSet& retained,
                         const AttnProbes<T>& probes) {
  PrefillOptions opts;
  opts.compute_logits = false;
  const auto prefill = forward_prefill<T>(model, nullptr, X, opts);
  return attn_output_error(model, prefill.cache, retained, probes);
}

#define KVLAB_INSTANTIATE(T)                                                                                  \
  template AttnProbes<T> response_probes<T>(const Model<T>&, std::span<const int>, std::span<const int>);    \
  template double attn_output_error<T>(const Model<T>&, const KVCache<T>&, const RetainedSet&,               \
                                       const AttnProbes<T>&);                                                 \
  template double attn_output_error<T>(const Model<T>&, std::span<const int>, const RetainedSet&,            \
                                       const AttnProbes<T>&);

KVLAB_INSTANTIATE(float)
KVLAB_INSTANTIATE(double)

#undef KVLAB_INSTANTIATE

}  // namespace kvlab
