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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "kvlab/model.hpp"

namespace kvlab::testing {

inline ModelConfig tiny_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.d_model = 16;
  c.d_head = 4;
  c.d_ff = 32;
  c.vocab_size = 32;
  c.max_seq_len = 160;
  c.rng_seed = seed;
  return c;
}

inline LookaheadConfig tiny_lookahead(std::size_t m = 4, TargetModules target = TargetModules::All) {
  LookaheadConfig l;
  l.n_lookahead = m;
  l.lora_rank = 2;
  l.lora_alpha = 4.0;
  l.target_modules = target;
  l.pooling_kernel = 3;
  l.rng_seed = 11;
  return l;
}

inline std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(vocab) - 1);
  std::vector<int> t(n);
  for (auto& v : t) v = d(rng);
  return t;
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <typename T>
Tensor<T> random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, bool requires_grad = false) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<T> v(r * c);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return Tensor<T>({r, c}, std::move(v), requires_grad);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::string scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("kvlab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace kvlab::testing
