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

#include "kvlab/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace kvlab {
namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

constexpr char kMagic[4] = {'L', 'K', 'V', 'T'};

template <typename U>
void put(std::ofstream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::ifstream& in, const std::string& path) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw InputError("truncated archive: " + path);
  return v;
}

}  // namespace

void write_archive(const std::string& path, const std::vector<StoredTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write archive: " + path);
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kArchiveVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (shape_numel(t.shape) != t.data.size()) throw ContractError("archive tensor '" + t.name + "' is inconsistent");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put<std::uint64_t>(out, d);
  }
  for (const auto& t : tensors) {
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!out) throw ConfigError("failed writing archive: " + path);
}

std::vector<StoredTensor> read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open archive: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw InputError("not a tensor archive: " + path);
  const auto version = get<std::uint32_t>(in, path);
  if (version != kArchiveVersion) {
    throw InputError("unsupported archive version " + std::to_string(version) + ": " + path);
  }
  const auto count = get<std::uint32_t>(in, path);
  std::vector<StoredTensor> out(count);
  for (auto& t : out) {
    const auto len = get<std::uint32_t>(in, path);
    if (len > (1u << 16)) throw InputError("corrupt tensor name in archive: " + path);
    t.name.resize(len);
    in.read(t.name.data(), len);
    const auto ndim = get<std::uint32_t>(in, path);
    if (ndim > 8) throw InputError("corrupt tensor rank in archive: " + path);
    for (std::uint32_t i = 0; i < ndim; ++i) t.shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(in, path)));
  }
  for (auto& t : out) {
    t.data.resize(shape_numel(t.shape));
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in) throw InputError("truncated archive payload: " + path);
  }
  return out;
}

}  // namespace kvlab
