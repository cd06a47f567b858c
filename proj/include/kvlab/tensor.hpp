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

// Dense row-major tensors with a define-by-run reverse-mode tape.
//
// Every op returns a new Tensor. When any input requires a gradient the result
// records its inputs and a backward rule; `backward(loss)` then walks the
// recorded graph in reverse topological order. Leaves keep accumulating
// gradients across calls until `zero_grad()`.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kvlab/errors.hpp"

namespace kvlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs that require grad.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data size " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(data), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return checked().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? shape()[1] : shape().back(); }
  std::size_t size() const { return checked().value.size(); }

  std::span<const T> data() const { return checked().value; }
  std::span<const T> grad() const { return checked().grad; }
  bool has_grad() const { return !checked().grad.empty(); }
  bool requires_grad() const { return checked().requires_grad; }
  bool is_leaf() const { return checked().is_leaf(); }

  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return data()[0];
  }
  T at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  // Leaves are the only tensors an optimizer or initializer may write to.
  std::span<T> mutable_data() {
    if (!is_leaf()) throw ContractError("mutable_data() on a non-leaf tensor");
    return node_->value;
  }
  std::span<T> mutable_grad() {
    if (!is_leaf()) throw ContractError("mutable_grad() on a non-leaf tensor");
    return node_->ensure_grad();
  }
  void zero_grad() {
    auto& g = checked_mut().grad;
    std::fill(g.begin(), g.end(), T(0));
  }
  void set_requires_grad(bool value) {
    if (!is_leaf()) throw ContractError("set_requires_grad() on a non-leaf tensor");
    node_->requires_grad = value;
  }

  // Same values, no history.
  Tensor detach() const { return Tensor(shape(), std::vector<T>(data().begin(), data().end())); }
  // Deep copy of a leaf, keeping requires_grad.
  Tensor clone() const {
    return Tensor(shape(), std::vector<T>(data().begin(), data().end()), requires_grad());
  }

  const detail::Node<T>* id() const { return node_.get(); }
  const NodePtr& node() const { return node_; }
  static Tensor wrap(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  const detail::Node<T>& checked() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }
  detail::Node<T>& checked_mut() {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }

  NodePtr node_;
};

namespace detail {

template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>::wrap(std::move(node));
}

template <typename T, typename Backward>
Tensor<T> make_result_n(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                        Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>::wrap(std::move(node));
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

// Plain kernels shared by forward and backward rules.

// out[m×n] += a[m×k] · b[k×n]; zero entries of `a` are skipped so masked
// attention columns never contribute, not even a signed zero.
template <typename T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m×n] += a[m×k] · b[n×k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * n + j] += acc;
    }
  }
}

// out[k×n] += a[m×k]^T · b[m×n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      T* orow = out + p * n;
      const T* brow = b + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m×k] · b[k×n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) detail::gemm_nt(self.grad.data(), B.value.data(), A.ensure_grad().data(), m, n, k);
    if (B.requires_grad) detail::gemm_tn(A.value.data(), self.grad.data(), B.ensure_grad().data(), m, k, n);
  });
}

/// a[m×k] · b[n×k]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    // dA = dC · B ; dB = dC^T · A
    if (A.requires_grad) detail::gemm_nn(self.grad.data(), B.value.data(), A.ensure_grad().data(), m, n, k);
    if (B.requires_grad) detail::gemm_tn(self.grad.data(), A.value.data(), B.ensure_grad().data(), m, n, k);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Adds `b` into rows [row_begin, row_begin + b.rows()) of `a`; other rows are
/// copied untouched (bitwise).
template <typename T>
Tensor<T> add_rows(const Tensor<T>& a, std::size_t row_begin, const Tensor<T>& b) {
  detail::require_matrix(a, "add_rows");
  detail::require_matrix(b, "add_rows");
  const std::size_t cols = a.dim(1);
  if (b.dim(1) != cols || row_begin + b.dim(0) > a.dim(0)) {
    throw DimensionError("add_rows: " + shape_str(b.shape()) + " does not fit " + shape_str(a.shape()) +
                         " at row " + std::to_string(row_begin));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  const std::size_t off = row_begin * cols;
  for (std::size_t i = 0; i < b.size(); ++i) out[off + i] += b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [off](detail::Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) {
      auto& g = A.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (B.requires_grad) {
      auto& g = B.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) {
      auto& g = A.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.value[i];
    }
    if (B.requires_grad) {
      auto& g = B.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [factor](detail::Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

/// x · sigmoid(x)
template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = x / (T(1) + std::exp(-x));
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& g = A.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = A.value[i];
      const T s = T(1) / (T(1) + std::exp(-x));
      g[i] += self.grad[i] * s * (T(1) + x * (T(1) - s));
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives

/// Row-wise RMS normalization: y = x / sqrt(mean(x^2) + eps) * gain.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  detail::require_matrix(x, "rmsnorm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (d == 0) throw DimensionError("rmsnorm: zero-width rows");
  if (gain.size() != d) {
    throw DimensionError("rmsnorm: gain of size " + std::to_string(gain.size()) + " for width " +
                         std::to_string(d));
  }
  std::vector<T> inv(n);
  std::vector<T> out(n * d);
  const T* xv = x.data().data();
  const T* gv = gain.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    T ss = T(0);
    for (std::size_t j = 0; j < d; ++j) ss += xv[i * d + j] * xv[i * d + j];
    inv[i] = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * inv[i] * gv[j];
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gain}, [n, d, inv = std::move(inv)](detail::Node<T>& self) {
        auto& X = *self.inputs[0];
        auto& G = *self.inputs[1];
        const T* dy = self.grad.data();
        if (G.requires_grad) {
          auto& gg = G.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[i * d + j] * X.value[i * d + j] * inv[i];
        }
        if (X.requires_grad) {
          auto& gx = X.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j < d; ++j) dot += dy[i * d + j] * G.value[j] * X.value[i * d + j];
            const T r = inv[i];
            const T c = r * r * r * dot / static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              gx[i * d + j] += r * G.value[j] * dy[i * d + j] - c * X.value[i * d + j];
            }
          }
        }
      });
}

/// Row i may attend to columns j <= i + offset.
struct CausalMask {
  std::size_t offset = 0;
};

/// Row-wise softmax, stabilized by subtracting the row max. Columns excluded by
/// the causal mask, or holding -inf, are exactly zero in the output.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits, std::optional<CausalMask> mask = std::nullopt) {
  detail::require_matrix(logits, "softmax_rows");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  std::vector<T> out(n * m, T(0));
  const T* x = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t limit = mask ? std::min(m, i + mask->offset + 1) : m;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < limit; ++j) {
      if (std::isnan(x[i * m + j]) || x[i * m + j] == std::numeric_limits<T>::infinity()) {
        throw ContractError("softmax_rows: non-finite logit in row " + std::to_string(i));
      }
      mx = std::max(mx, x[i * m + j]);
    }
    if (mx == -std::numeric_limits<T>::infinity()) {
      throw ContractError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    }
    T sum = T(0);
    for (std::size_t j = 0; j < limit; ++j) {
      const T v = x[i * m + j];
      const T e = v == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(v - mx);
      out[i * m + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < limit; ++j) out[i * m + j] /= sum;
  }
  return detail::make_result<T>(logits.shape(), std::move(out), {logits}, [n, m](detail::Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const T* p = self.value.data();
    const T* dy = self.grad.data();
    for (std::size_t i = 0; i < n; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < m; ++j) dot += dy[i * m + j] * p[i * m + j];
      for (std::size_t j = 0; j < m; ++j) {
        if (p[i * m + j] != T(0)) g[i * m + j] += p[i * m + j] * (dy[i * m + j] - dot);
      }
    }
  });
}

/// Rotary position embedding over `n_heads` heads of width `d_head` packed in
/// the columns of x. Pairs (i, i + d_head/2) are rotated by pos * base^(-2i/d_head).
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::int64_t> positions, std::size_t n_heads,
               std::size_t d_head, double base) {
  detail::require_matrix(x, "rope");
  const std::size_t n = x.dim(0);
  if (x.dim(1) != n_heads * d_head || d_head % 2 != 0) {
    throw DimensionError("rope: width " + std::to_string(x.dim(1)) + " is not " + std::to_string(n_heads) +
                         " heads of even width " + std::to_string(d_head));
  }
  if (positions.size() != n) throw DimensionError("rope: one position per row required");
  const std::size_t half = d_head / 2;
  std::vector<T> cos_t(n * half), sin_t(n * half);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double theta =
          static_cast<double>(positions[r]) * std::pow(base, -2.0 * static_cast<double>(i) / d_head);
      cos_t[r * half + i] = static_cast<T>(std::cos(theta));
      sin_t[r * half + i] = static_cast<T>(std::sin(theta));
    }
  }
  const std::size_t w = x.dim(1);
  std::vector<T> out(x.size());
  const T* xv = x.data().data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t base_col = r * w + h * d_head;
      for (std::size_t i = 0; i < half; ++i) {
        const T c = cos_t[r * half + i], s = sin_t[r * half + i];
        const T x1 = xv[base_col + i], x2 = xv[base_col + i + half];
        out[base_col + i] = x1 * c - x2 * s;
        out[base_col + i + half] = x1 * s + x2 * c;
      }
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x},
      [n, w, n_heads, d_head, half, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](detail::Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const T* dy = self.grad.data();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t base_col = r * w + h * d_head;
            for (std::size_t i = 0; i < half; ++i) {
              const T c = cos_t[r * half + i], s = sin_t[r * half + i];
              const T d1 = dy[base_col + i], d2 = dy[base_col + i + half];
              g[base_col + i] += d1 * c + d2 * s;
              g[base_col + i + half] += -d1 * s + d2 * c;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Slicing and assembly

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_rows");
  if (begin > end || end > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of " + shape_str(x.shape()));
  }
  const std::size_t c = x.dim(1);
  std::vector<T> out(x.data().begin() + begin * c, x.data().begin() + end * c);
  return detail::make_result<T>({end - begin, c}, std::move(out), {x}, [begin, c](detail::Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * c + i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_cols");
  if (begin > end || end > x.dim(1)) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), w = end - begin;
  std::vector<T> out(n * w);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.data().begin() + i * c + begin, w, out.begin() + i * w);
  return detail::make_result<T>({n, w}, std::move(out), {x}, [n, c, w, begin](detail::Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.dim(1) != c) throw DimensionError("concat_rows: column count mismatch");
    n += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(n * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result_n<T>({n, c}, std::move(out), parts, [](detail::Node<T>& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t sz = in->value.size();
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < sz; ++i) g[i] += self.grad[off + i];
      }
      off += sz;
    }
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.dim(0) != n) throw DimensionError("concat_cols: row count mismatch");
    c += p.dim(1);
  }
  std::vector<T> out(n * c);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(p.data().begin() + i * w, w, out.begin() + i * c + col);
    col += w;
  }
  return detail::make_result_n<T>({n, c}, std::move(out), parts, [n, c](detail::Node<T>& self) {
    std::size_t col0 = 0;
    for (auto& in : self.inputs) {
      const std::size_t w = in->shape[1];
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * c + col0 + j];
      }
      col0 += w;
    }
  });
}

/// Rows of `table` selected by `ids` (embedding lookup).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + static_cast<std::size_t>(ids[i]) * d, d, out.begin() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return detail::make_result<T>({ids.size(), d}, std::move(out), {table}, [d, idv = std::move(idv)](detail::Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idv[i]) * d + j] += self.grad[i * d + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions

/// Column means over rows: [n×m] -> [1×m].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  detail::require_matrix(x, "mean_rows");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (n == 0) throw DimensionError("mean_rows: no rows");
  std::vector<T> out(m, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += x.data()[i * m + j];
  for (auto& v : out) v /= static_cast<T>(n);
  return detail::make_result<T>({1, m}, std::move(out), {x}, [n, m](detail::Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const T inv = T(1) / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[j] * inv;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_result<T>({1}, {acc}, {x}, [](detail::Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

/// Each row divided by its L1 norm.
template <typename T>
Tensor<T> l1_normalize_rows(const Tensor<T>& x) {
  detail::require_matrix(x, "l1_normalize_rows");
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<T> norms(n, T(0));
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) norms[i] += std::abs(x.data()[i * m + j]);
    if (!(norms[i] > T(0))) throw ContractError("l1_normalize_rows: zero row " + std::to_string(i));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x.data()[i * m + j] / norms[i];
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [n, m, norms = std::move(norms)](detail::Node<T>& self) {
    auto& X = *self.inputs[0];
    auto& g = X.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < m; ++j) dot += self.grad[i * m + j] * X.value[i * m + j];
      const T s = norms[i];
      for (std::size_t j = 0; j < m; ++j) {
        const T xv = X.value[i * m + j];
        const T sign = xv > T(0) ? T(1) : (xv < T(0) ? T(-1) : T(0));
        g[i * m + j] += self.grad[i * m + j] / s - sign * dot / (s * s);
      }
    }
  });
}

/// Smoothed KL divergence sum_j p_j * ln((p_j + eps) / (q_j + eps)) between two
/// tensors of equal shape; returns a scalar.
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& p, const Tensor<T>& q, T eps) {
  if (p.shape() != q.shape()) {
    throw DimensionError("kl_divergence: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
  }
  T acc = T(0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T pv = p.data()[i];
    acc += pv * (std::log(pv + eps) - std::log(q.data()[i] + eps));
  }
  return detail::make_result<T>({1}, {acc}, {p, q}, [eps](detail::Node<T>& self) {
    auto& P = *self.inputs[0];
    auto& Q = *self.inputs[1];
    const T dy = self.grad[0];
    if (Q.requires_grad) {
      auto& g = Q.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= dy * P.value[i] / (Q.value[i] + eps);
    }
    if (P.requires_grad) {
      auto& g = P.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T pv = P.value[i];
        g[i] += dy * (std::log(pv + eps) - std::log(Q.value[i] + eps) + pv / (pv + eps));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Tape

/// Reverse topological record of the graph reachable from a root. Each node
/// appears once; nodes that do not require grad are pruned.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const detail::Node<T>*> seen;
    // Iterative post-order DFS: inputs are emitted before their consumers.
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return order_.size(); }
  bool empty() const { return order_.empty(); }

  /// Seeds the root gradient with 1 and runs every backward rule once, from
  /// the root towards the leaves. Intermediate gradients are released after
  /// their rule has run; leaf gradients accumulate.
  std::size_t run_backward() {
    if (order_.empty()) return 0;
    detail::Node<T>* root = order_.back();
    auto& g = root->ensure_grad();
    std::fill(g.begin(), g.end(), T(0));
    g[0] = T(1);
    std::size_t visited = 0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node<T>* node = *it;
      ++visited;
      if (node->is_leaf()) continue;
      if (node->grad.empty()) continue;  // nothing flowed here
      node->backward(*node);
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
    return visited;
  }

 private:
  std::vector<detail::Node<T>*> order_;
};

/// Populates gradients of every requires_grad leaf reachable from `loss`.
/// Returns the number of tape nodes visited.
template <typename T>
std::size_t backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar tensor");
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss is not on the tape");
  auto tape = Tape<T>::record(loss);
  return tape.run_backward();
}

/// Central finite differences against tape gradients. `f` rebuilds the graph
/// from the current parameter values each call. Returns
/// max |(f(p+h) - f(p-h)) / 2h - grad| / (|grad| + h) over all parameter entries.
template <typename T>
double finite_diff_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params, T h) {
  if (!(h > T(0))) throw ContractError("finite_diff_check: h must be positive");
  for (auto& p : params) p.zero_grad();
  {
    Tensor<T> loss = f();
    if (loss.requires_grad()) backward(loss);
  }
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<T> analytic(p.size(), T(0));
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + h;
      const double up = static_cast<double>(f().item());
      values[i] = saved - h;
      const double down = static_cast<double>(f().item());
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[i]);
      worst = std::max(worst, std::abs(numeric - a) / (std::abs(a) + static_cast<double>(h)));
    }
  }
  return worst;
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace kvlab
