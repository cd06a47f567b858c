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

#include "kvlab/costmodel.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "kvlab/errors.hpp"

namespace kvlab {

namespace {

constexpr const char* kCsvHeader = "method,context_len,compute_tflops,mem_traffic_gb,ttft_ms,overhead_ms";

double dd(std::size_t v) { return static_cast<double>(v); }

// The effective parameter count is spread over the matmuls in proportion to
// their size, so the weight read of a full pass equals effective_params.
double weight_scale(const ArchSpec& a) { return a.effective_params() / a.matmul_params(); }

void append_linear(std::vector<OpCost>& ops, const std::string& name, double rows, double params, double scale,
                   double wbytes) {
  ops.push_back({name, 2.0 * rows * params * scale, params * scale * wbytes});
}

// One pass of `rows` new tokens through every layer. `pairs` counts
// (query, key) products per head; `kv_read` is the number of cached entries
// streamed from memory per layer; `logit_rows` rows go through the output head.
void append_pass(std::vector<OpCost>& ops, const ArchSpec& a, const std::string& tag, double rows, double pairs,
                 double kv_read, double logit_rows) {
  const double d = dd(a.d_model), q = dd(a.n_heads * a.d_head()), kv = dd(a.n_kv_heads * a.d_head());
  const double ff = dd(a.d_ff), s = weight_scale(a), wb = a.weight_bytes;
  for (std::size_t l = 0; l < a.n_layers; ++l) {
    const std::string p = tag + ".layer" + std::to_string(l) + ".";
    append_linear(ops, p + "wq", rows, d * q, s, wb);
    append_linear(ops, p + "wk", rows, d * kv, s, wb);
    append_linear(ops, p + "wv", rows, d * kv, s, wb);
    ops.push_back({p + "attention", 4.0 * q * pairs, 2.0 * kv * kv_read * wb});
    append_linear(ops, p + "wo", rows, q * d, s, wb);
    append_linear(ops, p + "w_gate", rows, d * ff, s, wb);
    append_linear(ops, p + "w_up", rows, d * ff, s, wb);
    append_linear(ops, p + "w_down", rows, ff * d, s, wb);
  }
  append_linear(ops, tag + ".lm_head", logit_rows, d * dd(a.vocab), s, wb);
}

void append_compact(std::vector<OpCost>& ops, const ArchSpec& a, double kept) {
  ops.push_back({"kv_compact", 0.0, dd(a.n_layers) * dd(a.n_kv_heads) * kept * dd(a.d_head()) * 2.0 * a.weight_bytes});
}

void append_lora(std::vector<OpCost>& ops, const ArchSpec& a, double rows, double rank) {
  const double d = dd(a.d_model), q = dd(a.n_heads * a.d_head()), kv = dd(a.n_kv_heads * a.d_head());
  const double ff = dd(a.d_ff), wb = a.weight_bytes;
  const std::array<std::pair<double, double>, 7> dims = {
      {{d, q}, {d, kv}, {d, kv}, {q, d}, {d, ff}, {d, ff}, {ff, d}}};
  ops.push_back({"lookahead.embeddings", 0.0, rows * d * wb});
  for (std::size_t l = 0; l < a.n_layers; ++l) {
    for (const auto& [din, dout] : dims) {
      const double params = rank * (din + dout);
      ops.push_back({"lookahead.lora.layer" + std::to_string(l), 2.0 * rows * params, params * wb});
    }
  }
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw InputError("cost table: bad number '" + s + "'");
  return v;
}

}  // namespace

void HardwareProfile::validate() const {
  if (!(peak_flops > 0.0) || !(peak_mem_bw > 0.0)) throw ConfigError("hardware peaks must be positive");
  if (!(flops_efficiency > 0.0 && flops_efficiency <= 1.0) || !(mem_efficiency > 0.0 && mem_efficiency <= 1.0)) {
    throw ConfigError("hardware efficiencies must lie in (0, 1]");
  }
}

HardwareProfile HardwareProfile::from_config(const KeyValueConfig& kv) {
  HardwareProfile h;
  h.peak_flops = kv.get_double("peak_flops", h.peak_flops);
  h.peak_mem_bw = kv.get_double("peak_mem_bw", h.peak_mem_bw);
  h.flops_efficiency = kv.get_double("flops_efficiency", h.flops_efficiency);
  h.mem_efficiency = kv.get_double("mem_efficiency", h.mem_efficiency);
  if (const auto unused = kv.unused_keys(); !unused.empty()) {
    throw ConfigError("unknown hardware config key '" + unused.front() + "'");
  }
  h.validate();
  return h;
}

double ArchSpec::layer_linear_params() const {
  const double d = dd(d_model), q = dd(n_heads * d_head()), kv = dd(n_kv_heads * d_head());
  return d * q + 2.0 * d * kv + q * d + 3.0 * d * dd(d_ff);
}

double ArchSpec::matmul_params() const { return dd(n_layers) * layer_linear_params() + dd(d_model) * dd(vocab); }

double ArchSpec::derived_params() const {
  return matmul_params() + (tied_embeddings ? 0.0 : dd(d_model) * dd(vocab));
}

void ArchSpec::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || n_kv_heads == 0 || d_ff == 0 || vocab == 0) {
    throw ConfigError("arch '" + name + "': dimensions must all be >= 1");
  }
  if (d_model % n_heads != 0 || n_heads % n_kv_heads != 0) {
    throw ConfigError("arch '" + name + "': heads must divide d_model and kv heads must divide heads");
  }
  if (!(weight_bytes > 0.0)) throw ConfigError("arch '" + name + "': weight_bytes must be positive");
  if (total_params < 0.0) throw ConfigError("arch '" + name + "': total_params must be non-negative");
  if (total_params > 0.0 && !params_overridden) {
    const double derived = derived_params();
    if (std::abs(total_params - derived) > 0.02 * derived) {
      throw ConfigError("arch '" + name + "': total_params " + format_double(total_params) +
                        " disagrees with the dims (" + format_double(derived) + "); set params_overridden");
    }
  }
}

ArchSpec ArchSpec::llama31_8b() {
  ArchSpec a;
  a.name = "llama31_8b";
  a.n_layers = 32;
  a.d_model = 4096;
  a.n_heads = 32;
  a.n_kv_heads = 8;
  a.d_ff = 14336;
  a.vocab = 128256;
  // Weight bytes read per forward in the reference table: 13 GB at 2 bytes.
  a.total_params = 6.5e9;
  a.params_overridden = true;
  return a;
}

ArchSpec ArchSpec::llama32_1b() {
  ArchSpec a;
  a.name = "llama32_1b";
  a.n_layers = 16;
  a.d_model = 2048;
  a.n_heads = 32;
  a.n_kv_heads = 8;
  a.d_ff = 8192;
  a.vocab = 128256;
  a.tied_embeddings = true;
  return a;
}

ArchSpec ArchSpec::from_config(const KeyValueConfig& kv) {
  ArchSpec a;
  const std::string preset = kv.get_string("preset", "");
  if (preset == "llama31_8b") {
    a = llama31_8b();
  } else if (preset == "llama32_1b") {
    a = llama32_1b();
  } else if (!preset.empty()) {
    throw ConfigError("unknown arch preset '" + preset + "'");
  }
  a.name = kv.get_string("name", a.name);
  a.n_layers = kv.get_size("n_layers", a.n_layers);
  a.d_model = kv.get_size("d_model", a.d_model);
  a.n_heads = kv.get_size("n_query_heads", a.n_heads);
  a.n_kv_heads = kv.get_size("n_kv_heads", a.n_kv_heads);
  a.d_ff = kv.get_size("d_ff", a.d_ff);
  a.vocab = kv.get_size("vocab_size", a.vocab);
  a.tied_embeddings = kv.get_bool("tied_embeddings", a.tied_embeddings);
  a.total_params = kv.get_double("total_params", a.total_params);
  a.params_overridden = kv.get_bool("params_overridden", a.params_overridden);
  a.weight_bytes = kv.get_double("weight_bytes", a.weight_bytes);
  if (const auto unused = kv.unused_keys(); !unused.empty()) {
    throw ConfigError("unknown arch config key '" + unused.front() + "'");
  }
  a.validate();
  return a;
}

double op_time(const OpCost& op, const HardwareProfile& hw) {
  return std::max(op.flops / (hw.flops_efficiency * hw.peak_flops), op.bytes / (hw.mem_efficiency * hw.peak_mem_bw));
}

std::string to_string(CostMethod m) {
  switch (m) {
    case CostMethod::Forward: return "forward";
    case CostMethod::SnapKV: return "snapkv";
    case CostMethod::Lookahead: return "lookahead";
    case CostMethod::SpecKV: return "speckv";
    case CostMethod::LAQ: return "laq";
  }
  return "?";
}

CostMethod parse_cost_method(const std::string& s) {
  for (auto m : {CostMethod::Forward, CostMethod::SnapKV, CostMethod::Lookahead, CostMethod::SpecKV, CostMethod::LAQ}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown cost method '" + s + "' (expected forward, snapkv, lookahead, speckv or laq)");
}

std::vector<OpCost> forward_ops(const ArchSpec& arch, std::size_t n_ctx) {
  arch.validate();
  if (n_ctx == 0) throw ConfigError("forward cost needs a non-empty context");
  std::vector<OpCost> ops;
  const double n = dd(n_ctx);
  append_pass(ops, arch, "prefill", n, n * n, 0.0, 1.0);
  return ops;
}

std::vector<OpCost> method_ops(CostMethod method, const ArchSpec& arch, std::size_t n_ctx,
                               const MethodParams& params) {
  arch.validate();
  if (n_ctx == 0) throw ConfigError("method cost needs a non-empty context");
  const double n = dd(n_ctx);
  const double kept = std::min(n, dd(params.budget));
  const double draft = dd(params.draft_len);
  std::vector<OpCost> ops;
  switch (method) {
    case CostMethod::Forward:
      return forward_ops(arch, n_ctx);
    case CostMethod::SnapKV:
      // Window scores come from the prefill's own last rows.
      ops = forward_ops(arch, n_ctx);
      append_compact(ops, arch, kept);
      return ops;
    case CostMethod::Lookahead: {
      const double m = dd(params.n_lookahead);
      append_pass(ops, arch, "prefill", n + m, n * n + m * (n + m), 0.0, 1.0);
      append_lora(ops, arch, m, dd(params.lora_rank));
      append_compact(ops, arch, kept);
      return ops;
    }
    case CostMethod::LAQ: {
      ops = forward_ops(arch, n_ctx);
      append_compact(ops, arch, kept);
      for (std::size_t t = 0; t + 1 < params.draft_len; ++t) {
        const double ctx = kept + dd(t);
        append_pass(ops, arch, "draft_decode" + std::to_string(t), 1.0, ctx + 1.0, ctx, 1.0);
      }
      append_pass(ops, arch, "rescore", draft, draft * (n + draft), n, 0.0);
      append_compact(ops, arch, kept);
      return ops;
    }
    case CostMethod::SpecKV: {
      const ArchSpec& small = params.draft;
      small.validate();
      ops = forward_ops(arch, n_ctx);
      append_pass(ops, small, "draft_prefill", n, n * n, 0.0, 1.0);
      for (std::size_t t = 0; t + 1 < params.draft_len; ++t) {
        const double ctx = n + dd(t);
        append_pass(ops, small, "draft_decode" + std::to_string(t), 1.0, ctx + 1.0, ctx, 1.0);
      }
      append_pass(ops, arch, "rescore", draft, draft * (n + draft), n, 0.0);
      append_compact(ops, arch, kept);
      return ops;
    }
  }
  throw ConfigError("unknown cost method");
}

CostReport summarize(const std::string& method, std::size_t n_ctx, const std::vector<OpCost>& ops,
                     const HardwareProfile& hw) {
  hw.validate();
  CostReport r;
  r.method = method;
  r.context_len = n_ctx;
  double flops = 0.0, bytes = 0.0, seconds = 0.0;
  for (const auto& op : ops) {
    flops += op.flops;
    bytes += op.bytes;
    seconds += op_time(op, hw);
  }
  r.compute_tflops = flops / 1e12;
  r.mem_traffic_gb = bytes / 1e9;
  r.ttft_ms = seconds * 1e3;
  return r;
}

CostReport forward_cost(const ArchSpec& arch, const HardwareProfile& hw, std::size_t n_ctx) {
  return summarize("forward", n_ctx, forward_ops(arch, n_ctx), hw);
}

CostReport method_overhead(CostMethod method, const ArchSpec& arch, const HardwareProfile& hw, std::size_t n_ctx,
                           const MethodParams& params) {
  const CostReport base = forward_cost(arch, hw, n_ctx);
  if (method == CostMethod::Forward) return base;
  CostReport r = summarize(to_string(method), n_ctx, method_ops(method, arch, n_ctx, params), hw);
  r.overhead_ms = r.ttft_ms - base.ttft_ms;
  return r;
}

std::vector<CostReport> cost_grid(const ArchSpec& arch, const HardwareProfile& hw,
                                  const std::vector<CostMethod>& methods, const std::vector<std::size_t>& lengths,
                                  const MethodParams& params) {
  if (lengths.empty()) throw ConfigError("cost grid needs at least one context length");
  std::vector<CostReport> out;
  for (const auto n : lengths) {
    out.push_back(forward_cost(arch, hw, n));
    for (const auto m : methods) {
      if (m != CostMethod::Forward) out.push_back(method_overhead(m, arch, hw, n, params));
    }
  }
  return out;
}

std::string emit_cost_csv(const std::vector<CostReport>& reports) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : reports) {
    out += r.method + "," + std::to_string(r.context_len) + "," + format_double(r.compute_tflops) + "," +
           format_double(r.mem_traffic_gb) + "," + format_double(r.ttft_ms) + "," + format_double(r.overhead_ms) +
           "\n";
  }
  return out;
}

std::vector<CostReport> parse_cost_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw InputError("cost table: missing or unexpected header");
  std::vector<CostReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_list(line, ',');
    if (f.size() != 6) throw InputError("cost table: expected 6 fields in '" + line + "'");
    CostReport r;
    r.method = f[0];
    r.context_len = static_cast<std::size_t>(parse_double(f[1]));
    r.compute_tflops = parse_double(f[2]);
    r.mem_traffic_gb = parse_double(f[3]);
    r.ttft_ms = parse_double(f[4]);
    r.overhead_ms = parse_double(f[5]);
    out.push_back(std::move(r));
  }
  return out;
}

std::string emit_cost_json(const std::vector<CostReport>& reports) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["method"] = r.method;
    j["context_len"] = r.context_len;
    j["compute_tflops"] = r.compute_tflops;
    j["mem_traffic_gb"] = r.mem_traffic_gb;
    j["ttft_ms"] = r.ttft_ms;
    j["overhead_ms"] = r.overhead_ms;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

std::vector<CostReport> parse_cost_json(const std::string& text) {
  std::vector<CostReport> out;
  try {
    for (const auto& j : nlohmann::json::parse(text)) {
      CostReport r;
      r.method = j.at("method").get<std::string>();
      r.context_len = j.at("context_len").get<std::size_t>();
      r.compute_tflops = j.at("compute_tflops").get<double>();
      r.mem_traffic_gb = j.at("mem_traffic_gb").get<double>();
      r.ttft_ms = j.at("ttft_ms").get<double>();
      r.overhead_ms = j.at("overhead_ms").get<double>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("cost table: ") + e.what());
  }
  return out;
}

QuadraticFit fit_quadratic(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3) throw ContractError("fit_quadratic: need >= 3 paired points");
  // Work on x / max|x| to keep the normal equations well conditioned.
  double sx = 0.0;
  for (double v : x) sx = std::max(sx, std::abs(v));
  if (sx == 0.0) throw ContractError("fit_quadratic: x values are all zero");
  std::array<std::array<long double, 4>, 3> m{};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const long double u = x[i] / sx;
    const std::array<long double, 3> basis = {1.0L, u, u * u};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m[r][c] += basis[r] * basis[c];
      m[r][3] += basis[r] * y[i];
    }
  }
  for (int col = 0; col < 3; ++col) {
    int piv = col;
    for (int r = col + 1; r < 3; ++r) {
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    }
    if (std::abs(m[piv][col]) < 1e-18L) throw ContractError("fit_quadratic: fewer than 3 distinct x values");
    std::swap(m[col], m[piv]);
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      const long double f = m[r][col] / m[col][col];
      for (int c = col; c < 4; ++c) m[r][c] -= f * m[col][c];
    }
  }
  QuadraticFit fit;
  fit.a = static_cast<double>(m[0][3] / m[0][0]);
  fit.b = static_cast<double>(m[1][3] / m[1][1]) / sx;
  fit.c = static_cast<double>(m[2][3] / m[2][2]) / (sx * sx);
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double pred = fit.a + fit.b * x[i] + fit.c * x[i] * x[i];
    ss_res += (y[i] - pred) * (y[i] - pred);
    ss_tot += (y[i] - mean) * (y[i] - mean);
  }
  fit.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
  return fit;
}

}  // namespace kvlab
