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

// Binary tensor archive:
//   "LKVT" | u32 version | u32 count
//   count x { u32 name_len | name bytes | u32 ndim | ndim x u64 dim }
//   tensor payloads in header order, little-endian f32.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kvlab/tensor.hpp"

namespace kvlab {

inline constexpr std::uint32_t kArchiveVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void write_archive(const std::string& path, const std::vector<StoredTensor>& tensors);
std::vector<StoredTensor> read_archive(const std::string& path);

template <typename T>
StoredTensor to_stored(const std::string& name, const Tensor<T>& t) {
  StoredTensor s{name, t.shape(), {}};
  s.data.reserve(t.size());
  for (T v : t.data()) s.data.push_back(static_cast<float>(v));
  return s;
}

/// Copies stored values into an existing leaf of matching shape.
template <typename T>
void assign_stored(const StoredTensor& s, Tensor<T>& t) {
  if (s.shape != t.shape()) {
    throw InputError("archive tensor '" + s.name + "' has shape " + shape_str(s.shape) + ", expected " +
                     shape_str(t.shape()));
  }
  auto out = t.mutable_data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(s.data[i]);
}

/// Writes named tensors; the names must be unique.
template <typename T>
void save_tensors(const std::string& path, const std::vector<std::pair<std::string, Tensor<T>>>& named) {
  std::vector<StoredTensor> stored;
  stored.reserve(named.size());
  for (const auto& [name, t] : named) stored.push_back(to_stored(name, t));
  write_archive(path, stored);
}

/// Fills every named leaf from the archive; missing or extra names are errors.
template <typename T>
void load_tensors(const std::string& path, std::vector<std::pair<std::string, Tensor<T>>> named) {
  auto stored = read_archive(path);
  if (stored.size() != named.size()) {
    throw InputError("archive " + path + " holds " + std::to_string(stored.size()) + " tensors, expected " +
                     std::to_string(named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (stored[i].name != named[i].first) {
      throw InputError("archive " + path + ": expected tensor '" + named[i].first + "', found '" +
                       stored[i].name + "'");
    }
    assign_stored(stored[i], named[i].second);
  }
}

}  // namespace kvlab
