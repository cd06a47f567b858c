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

// Analytical time-to-first-token model. Every tensor op is costed as
// max(compute time, memory time) on a single accelerator at batch size 1 and
// the op times are summed.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvlab/kvconfig.hpp"

namespace kvlab {

struct HardwareProfile {
  double peak_flops = 756e12;
  double peak_mem_bw = 2.039e12;
  double flops_efficiency = 0.7;
  double mem_efficiency = 0.9;

  void validate() const;
  static HardwareProfile from_config(const KeyValueConfig& kv);
};

struct ArchSpec {
  std::string name = "custom";
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t d_ff = 0;
  std::size_t vocab = 0;
  bool tied_embeddings = false;
  /// Weights read by one forward pass. 0 means derive from the dims.
  double total_params = 0.0;
  /// Set when total_params deliberately departs from the dims.
  bool params_overridden = false;
  double weight_bytes = 2.0;

  std::size_t d_head() const { return d_model / n_heads; }
  /// Projection and MLP weights of one layer.
  double layer_linear_params() const;
  /// All matmul weights: every layer plus the output head.
  double matmul_params() const;
  /// Parameter count implied by the dims.
  double derived_params() const;
  double effective_params() const { return total_params > 0.0 ? total_params : derived_params(); }

  void validate() const;
  /// `preset = llama31_8b | llama32_1b` seeds the fields; other keys override.
  static ArchSpec from_config(const KeyValueConfig& kv);

  static ArchSpec llama31_8b();
  static ArchSpec llama32_1b();
};

struct OpCost {
  std::string name;
  double flops = 0.0;
  double bytes = 0.0;
};

/// Seconds for one op under the roofline.
double op_time(const OpCost& op, const HardwareProfile& hw);

enum class CostMethod { Forward, SnapKV, Lookahead, SpecKV, LAQ };

std::string to_string(CostMethod m);
CostMethod parse_cost_method(const std::string& s);

struct MethodParams {
  std::size_t budget = 128;
  std::size_t n_lookahead = 32;
  std::size_t window = 32;
  std::size_t lora_rank = 8;
  std::size_t draft_len = 32;
  ArchSpec draft = ArchSpec::llama32_1b();
};

struct CostReport {
  std::string method;
  std::size_t context_len = 0;
  double compute_tflops = 0.0;
  double mem_traffic_gb = 0.0;
  double ttft_ms = 0.0;
  double overhead_ms = 0.0;

  bool operator==(const CostReport&) const = default;
};

/// Ops of a prefill over `n_ctx` prompt tokens, producing logits for the
/// last row only. Prefill attention is fused, so its K/V traffic stays on chip.
std::vector<OpCost> forward_ops(const ArchSpec& arch, std::size_t n_ctx);

/// Every op of `method` including its prefill.
std::vector<OpCost> method_ops(CostMethod method, const ArchSpec& arch, std::size_t n_ctx, const MethodParams& params);

CostReport summarize(const std::string& method, std::size_t n_ctx, const std::vector<OpCost>& ops,
                     const HardwareProfile& hw);

CostReport forward_cost(const ArchSpec& arch, const HardwareProfile& hw, std::size_t n_ctx);

/// Total cost of `method`; overhead_ms is relative to forward_cost.
CostReport method_overhead(CostMethod method, const ArchSpec& arch, const HardwareProfile& hw, std::size_t n_ctx,
                           const MethodParams& params = {});

/// For each length: the forward baseline followed by each method.
std::vector<CostReport> cost_grid(const ArchSpec& arch, const HardwareProfile& hw,
                                  const std::vector<CostMethod>& methods, const std::vector<std::size_t>& lengths,
                                  const MethodParams& params = {});

std::string emit_cost_csv(const std::vector<CostReport>& reports);
std::vector<CostReport> parse_cost_csv(const std::string& text);
std::string emit_cost_json(const std::vector<CostReport>& reports);
std::vector<CostReport> parse_cost_json(const std::string& text);

struct QuadraticFit {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  double r2 = 0.0;
};

/// Least squares y = a + b x + c x^2. Needs at least three distinct x.
QuadraticFit fit_quadratic(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace kvlab
