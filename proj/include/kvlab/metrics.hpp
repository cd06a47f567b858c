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

#pragma once

#include <span>
#include <vector>

#include "kvlab/eviction.hpp"
#include "kvlab/model.hpp"

namespace kvlab {

/// |topk(gt) ∩ topk(est)| / k with the eviction tie rule.
double recall_at_k(std::span<const double> gt, std::span<const double> est, std::size_t k);

/// |retained ∩ topk(gt)| / k.
double retained_recall(std::span<const double> gt, std::span<const std::size_t> retained, std::size_t k);

/// Kendall tau-b in O(n log n). Throws when either side is constant.
double kendall_tau(std::span<const double> a, std::span<const double> b);

/// Post-rotation query rows used to probe attention outputs, per layer.
template <typename T>
struct AttnProbes {
  std::vector<Tensor<T>> queries;  // [layer]: rows x (H * d_head)
  std::size_t rows() const { return queries.empty() ? 0 : queries.front().rows(); }
};

/// Queries of the response rows when Y is decoded after the full prompt.
template <typename T>
AttnProbes<T> response_probes(const Model<T>& model, std::span<const int> X, std::span<const int> Y);

/// Mean over probe rows and layers of the L2 distance between attention
/// outputs (all heads concatenated) over `prompt_cache` and over its
/// compressed version.
template <typename T>
double attn_output_error(const Model<T>& model, const KVCache<T>& prompt_cache, const RetainedSet& retained,
                         const AttnProbes<T>& probes);

/// Prefills X and measures against it.
template <typename T>
double attn_output_error(const Model<T>& model, std::span<const int> X, const RetainedSet& retained,
                         const AttnProbes<T>& probes);

}  // namespace kvlab
