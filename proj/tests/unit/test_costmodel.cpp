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

#include <cmath>

#include "doctest.h"
#include "kvlab/costmodel.hpp"
#include "kvlab/errors.hpp"

using namespace kvlab;

namespace {

const std::vector<std::size_t> kLengths = {4096, 8192, 16384, 32768};

double rel(double got, double want) { return std::abs(got - want) / want; }

}  // namespace

TEST_CASE("roofline op time") {
  HardwareProfile hw;
  hw.peak_flops = 100.0;
  hw.peak_mem_bw = 10.0;
  hw.flops_efficiency = 0.5;
  hw.mem_efficiency = 1.0;
  CHECK(op_time({"a", 100.0, 5.0}, hw) == doctest::Approx(2.0));
  CHECK(op_time({"b", 10.0, 50.0}, hw) == doctest::Approx(5.0));
  CHECK(op_time({"c", 0.0, 0.0}, hw) == 0.0);
  hw.mem_efficiency = 0.0;
  CHECK_THROWS_AS(hw.validate(), ConfigError);
}

TEST_CASE("forward compute and latency") {
  const auto arch = ArchSpec::llama31_8b();
  const HardwareProfile hw;
  const std::vector<double> want = {60, 136, 336, 928};
  std::vector<double> traffic;
  for (std::size_t i = 0; i < kLengths.size(); ++i) {
    const auto r = forward_cost(arch, hw, kLengths[i]);
    INFO(kLengths[i]);
    CHECK(rel(r.compute_tflops, want[i]) < 0.15);
    CHECK(r.overhead_ms == 0.0);
    CHECK(r.method == "forward");
    traffic.push_back(r.mem_traffic_gb);
  }
  CHECK(rel(forward_cost(arch, hw, 8192).ttft_ms, 256.99) < 0.15);
  const auto [lo, hi] = std::minmax_element(traffic.begin(), traffic.end());
  CHECK((*hi - *lo) / *lo < 0.05);
  CHECK(rel(traffic[1], 13.0) < 0.15);
  CHECK_THROWS_AS(forward_cost(arch, hw, 0), ConfigError);
}

TEST_CASE("forward cost is the sum of its ops") {
  const auto arch = ArchSpec::llama32_1b();
  const HardwareProfile hw;
  const auto ops = forward_ops(arch, 2048);
  double flops = 0.0, seconds = 0.0;
  for (const auto& op : ops) {
    CHECK(op.flops >= 0.0);
    CHECK(op.bytes >= 0.0);
    flops += op.flops;
    seconds += op_time(op, hw);
  }
  const auto r = forward_cost(arch, hw, 2048);
  CHECK(r.compute_tflops == doctest::Approx(flops / 1e12).epsilon(1e-12));
  CHECK(r.ttft_ms == doctest::Approx(seconds * 1e3).epsilon(1e-12));
}

TEST_CASE("compute grows quadratically") {
  const auto arch = ArchSpec::llama31_8b();
  const HardwareProfile hw;
  std::vector<double> x, y;
  for (std::size_t n = 1024; n <= 32768; n += 1024) {
    x.push_back(static_cast<double>(n));
    y.push_back(forward_cost(arch, hw, n).compute_tflops);
  }
  const auto fit = fit_quadratic(x, y);
  CHECK(fit.r2 > 0.999);
  CHECK(fit.c > 0.0);

  const auto exact = fit_quadratic({0, 1, 2, 3}, {1, 3, 9, 19});
  CHECK(exact.a == doctest::Approx(1.0));
  CHECK(exact.b == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(exact.c == doctest::Approx(2.0));
  CHECK(exact.r2 == doctest::Approx(1.0));
  CHECK_THROWS(fit_quadratic({1, 1, 2}, {1, 2, 3}));
}

TEST_CASE("method overheads") {
  const auto arch = ArchSpec::llama31_8b();
  const HardwareProfile hw;
  const std::vector<CostMethod> extra = {CostMethod::SnapKV, CostMethod::Lookahead, CostMethod::SpecKV,
                                         CostMethod::LAQ};
  std::map<CostMethod, double> prev;
  for (auto n : kLengths) {
    INFO(n);
    std::map<CostMethod, double> o;
    for (auto m : extra) {
      const auto r = method_overhead(m, arch, hw, n);
      CHECK(r.overhead_ms > 0.0);
      CHECK(r.ttft_ms == doctest::Approx(forward_cost(arch, hw, n).ttft_ms + r.overhead_ms));
      o[m] = r.overhead_ms;
    }
    CHECK(o[CostMethod::SnapKV] < o[CostMethod::Lookahead]);
    CHECK(o[CostMethod::Lookahead] < o[CostMethod::SpecKV]);
    CHECK(o[CostMethod::Lookahead] < o[CostMethod::LAQ]);
    for (auto m : {CostMethod::SpecKV, CostMethod::LAQ}) {
      if (prev.count(m)) CHECK(o[m] >= prev[m]);
    }
    prev = o;
  }
  CHECK(prev[CostMethod::Lookahead] <= prev[CostMethod::LAQ] / 10.0);

  const double snap = method_overhead(CostMethod::SnapKV, arch, hw, 8192).overhead_ms;
  CHECK(snap > 0.0085 / 3.0);
  CHECK(snap < 0.0085 * 3.0);
  CHECK(rel(method_overhead(CostMethod::Lookahead, arch, hw, 8192).overhead_ms, 1.0345) < 0.25);
}

TEST_CASE("arch specs") {
  const auto big = ArchSpec::llama31_8b();
  CHECK(big.d_head() == 128);
  CHECK(big.effective_params() > 6e9);
  CHECK(ArchSpec::llama32_1b().derived_params() > 1e9);
  const auto custom = ArchSpec::from_config(KeyValueConfig::parse("preset = llama32_1b\nn_layers = 4\n"));
  CHECK(custom.n_layers == 4);
  CHECK(custom.d_model == 2048);
  CHECK_THROWS_AS(ArchSpec::from_config(KeyValueConfig::parse("preset = gpt9\n")), ConfigError);
  ArchSpec bad = big;
  bad.n_kv_heads = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(parse_cost_method("laq") == CostMethod::LAQ);
  CHECK_THROWS_AS(parse_cost_method("h2o"), ConfigError);
}

TEST_CASE("cost tables") {
  const auto arch = ArchSpec::llama31_8b();
  const HardwareProfile hw;
  const std::vector<CostMethod> methods = {CostMethod::SnapKV, CostMethod::Lookahead, CostMethod::LAQ};
  const auto grid = cost_grid(arch, hw, methods, kLengths);
  REQUIRE(grid.size() == kLengths.size() * (methods.size() + 1));
  CHECK(grid[0].method == "forward");
  CHECK(grid[1].method == "snapkv");
  CHECK(grid[4].context_len == 8192);

  const auto csv = emit_cost_csv(grid);
  CHECK(csv.rfind("method,context_len,compute_tflops,mem_traffic_gb,ttft_ms,overhead_ms\n", 0) == 0);
  CHECK(parse_cost_csv(csv) == grid);
  CHECK(parse_cost_json(emit_cost_json(grid)) == grid);
  CHECK(emit_cost_csv(grid) == csv);
  CHECK_THROWS_AS(parse_cost_csv("method,context_len\nforward,1\n"), InputError);
}
