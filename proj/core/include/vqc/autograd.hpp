// Copyright 2026 The vqcspace Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vqc/tensor.hpp"

// Reverse-mode automatic differentiation on dense tensors. The graph is
// rebuilt every step (define-by-run); values are computed eagerly at node
// construction and backward closures replay the chain rule in reverse
// topological order. Scalar type is a template parameter: float for
// training, double for finite-difference verification.

namespace vqc::ag {

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated by backward() for reachable nodes
  bool requires_grad = false;
  std::vector<Var<T>> parents;
  std::function<void()> backprop;  // accumulates into parents' grads
};

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return leaf(std::move(value), false);
}

namespace detail {

template <typename T>
Var<T> make(Tensor<T> value, std::vector<Var<T>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

template <typename T>
bool wants(const Var<T>& p) {
  return p->requires_grad;
}

template <typename T>
using EigenMat =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "add");
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  auto n = detail::make(std::move(out), {a, b});
  Node<T>* self = n.get();
  n->backprop = [self, a, b] {
    if (detail::wants(a))
      for (int64_t i = 0; i < self->grad.size(); ++i) a->grad[i] += self->grad[i];
    if (detail::wants(b))
      for (int64_t i = 0; i < self->grad.size(); ++i) b->grad[i] += self->grad[i];
  };
  return n;
}

template <typename T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw value_error("add_n: empty list");
  Tensor<T> out = xs[0]->value;
  for (size_t k = 1; k < xs.size(); ++k) {
    check_same_shape(out, xs[k]->value, "add_n");
    for (int64_t i = 0; i < out.size(); ++i) out[i] += xs[k]->value[i];
  }
  auto n = detail::make(std::move(out), xs);
  Node<T>* self = n.get();
  n->backprop = [self, xs] {
    for (const auto& x : xs)
      if (detail::wants(x))
        for (int64_t i = 0; i < self->grad.size(); ++i)
          x->grad[i] += self->grad[i];
  };
  return n;
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "sub");
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  auto n = detail::make(std::move(out), {a, b});
  Node<T>* self = n.get();
  n->backprop = [self, a, b] {
    if (detail::wants(a))
      for (int64_t i = 0; i < self->grad.size(); ++i) a->grad[i] += self->grad[i];
    if (detail::wants(b))
      for (int64_t i = 0; i < self->grad.size(); ++i) b->grad[i] -= self->grad[i];
  };
  return n;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "mul");
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  auto n = detail::make(std::move(out), {a, b});
  Node<T>* self = n.get();
  n->backprop = [self, a, b] {
    if (detail::wants(a))
      for (int64_t i = 0; i < self->grad.size(); ++i)
        a->grad[i] += self->grad[i] * b->value[i];
    if (detail::wants(b))
      for (int64_t i = 0; i < self->grad.size(); ++i)
        b->grad[i] += self->grad[i] * a->value[i];
  };
  return n;
}

template <typename T>
Var<T> div_elem(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "div_elem");
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] /= b->value[i];
  auto n = detail::make(std::move(out), {a, b});
  Node<T>* self = n.get();
  n->backprop = [self, a, b] {
    if (detail::wants(a))
      for (int64_t i = 0; i < self->grad.size(); ++i)
        a->grad[i] += self->grad[i] / b->value[i];
    if (detail::wants(b))
      for (int64_t i = 0; i < self->grad.size(); ++i)
        b->grad[i] -= self->grad[i] * a->value[i] / (b->value[i] * b->value[i]);
  };
  return n;
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a, s] {
    if (detail::wants(a))
      for (int64_t i = 0; i < self->grad.size(); ++i)
        a->grad[i] += self->grad[i] * s;
  };
  return n;
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] += s;
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a] {
    if (detail::wants(a))
      for (int64_t i = 0; i < self->grad.size(); ++i) a->grad[i] += self->grad[i];
  };
  return n;
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= out[i];
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a] {
    if (detail::wants(a))
      for (int64_t i = 0; i < self->grad.size(); ++i)
        a->grad[i] += T(2) * a->value[i] * self->grad[i];
  };
  return n;
}

// |x| with subgradient 0 at x == 0.
template <typename T>
Var<T> abs_(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::abs(out[i]);
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a] {
    if (!detail::wants(a)) return;
    for (int64_t i = 0; i < self->grad.size(); ++i) {
      const T v = a->value[i];
      if (v > T(0))
        a->grad[i] += self->grad[i];
      else if (v < T(0))
        a->grad[i] -= self->grad[i];
    }
  };
  return n;
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], T(0));
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a] {
    if (!detail::wants(a)) return;
    for (int64_t i = 0; i < self->grad.size(); ++i)
      if (a->value[i] > T(0)) a->grad[i] += self->grad[i];
  };
  return n;
}

template <typename T>
Var<T> exp_(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a] {
    if (detail::wants(a))
      for (int64_t i = 0; i < self->grad.size(); ++i)
        a->grad[i] += self->grad[i] * self->value[i];
  };
  return n;
}

template <typename T>
Var<T> log_(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a] {
    if (detail::wants(a))
      for (int64_t i = 0; i < self->grad.size(); ++i)
        a->grad[i] += self->grad[i] / a->value[i];
  };
  return n;
}

// sqrt with subgradient 0 where the input is 0.
template <typename T>
Var<T> sqrt_(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(out[i]);
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a] {
    if (!detail::wants(a)) return;
    for (int64_t i = 0; i < self->grad.size(); ++i)
      if (self->value[i] > T(0))
        a->grad[i] += self->grad[i] / (T(2) * self->value[i]);
  };
  return n;
}

// ---------------------------------------------------------------------------
// Reductions and shaping
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T s = 0;
  for (int64_t i = 0; i < a->value.size(); ++i) s += a->value[i];
  auto n = detail::make(Tensor<T>::scalar(s), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a] {
    if (!detail::wants(a)) return;
    const T g = self->grad[0];
    for (int64_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
  };
  return n;
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a->value.size()));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (shape_numel(shape) != a->value.size())
    throw shape_error("reshape: element count mismatch");
  Tensor<T> out(std::move(shape));
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i];
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a] {
    if (detail::wants(a))
      for (int64_t i = 0; i < self->grad.size(); ++i) a->grad[i] += self->grad[i];
  };
  return n;
}

template <typename T>
Var<T> slice_vec(const Var<T>& a, int offset, int len) {
  if (a->value.rank() != 1 || offset < 0 || offset + len > a->value.dim(0))
    throw shape_error("slice_vec: bad range");
  Tensor<T> out({len});
  for (int i = 0; i < len; ++i) out[i] = a->value[offset + i];
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a, offset, len] {
    if (detail::wants(a))
      for (int i = 0; i < len; ++i) a->grad[offset + i] += self->grad[i];
  };
  return n;
}

// Sum of the per-row elements of a [R,C] matrix -> [R].
template <typename T>
Var<T> row_sum(const Var<T>& a) {
  if (a->value.rank() != 2) throw shape_error("row_sum: need matrix");
  const int rows = a->value.dim(0), cols = a->value.dim(1);
  Tensor<T> out({rows});
  for (int r = 0; r < rows; ++r) {
    T s = 0;
    for (int c = 0; c < cols; ++c) s += a->value.at(r, c);
    out[r] = s;
  }
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a, rows, cols] {
    if (!detail::wants(a)) return;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) a->grad.at(r, c) += self->grad[r];
  };
  return n;
}

// F[r,c] / d[r] rowwise.
template <typename T>
Var<T> div_rows(const Var<T>& f, const Var<T>& d) {
  if (f->value.rank() != 2 || d->value.rank() != 1 ||
      f->value.dim(0) != d->value.dim(0))
    throw shape_error("div_rows: shapes incompatible");
  const int rows = f->value.dim(0), cols = f->value.dim(1);
  Tensor<T> out = f->value;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.at(r, c) /= d->value[r];
  auto n = detail::make(std::move(out), {f, d});
  Node<T>* self = n.get();
  n->backprop = [self, f, d, rows, cols] {
    for (int r = 0; r < rows; ++r) {
      const T dr = d->value[r];
      T acc = 0;
      for (int c = 0; c < cols; ++c) {
        const T g = self->grad.at(r, c);
        if (detail::wants(f)) f->grad.at(r, c) += g / dr;
        acc += g * f->value.at(r, c);
      }
      if (detail::wants(d)) d->grad[r] -= acc / (dr * dr);
    }
  };
  return n;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 ||
      a->value.dim(1) != b->value.dim(0))
    throw shape_error("matmul: incompatible shapes");
  const int m = a->value.dim(0), k = a->value.dim(1), p = b->value.dim(1);
  Tensor<T> out({m, p});
  detail::ConstMatMap<T> A(a->value.data(), m, k), B(b->value.data(), k, p);
  detail::MatMap<T>(out.data(), m, p).noalias() = A * B;
  auto n = detail::make(std::move(out), {a, b});
  Node<T>* self = n.get();
  n->backprop = [self, a, b, m, k, p] {
    detail::ConstMatMap<T> A(a->value.data(), m, k), B(b->value.data(), k, p),
        G(self->grad.data(), m, p);
    if (detail::wants(a))
      detail::MatMap<T>(a->grad.data(), m, k).noalias() += G * B.transpose();
    if (detail::wants(b))
      detail::MatMap<T>(b->grad.data(), k, p).noalias() += A.transpose() * G;
  };
  return n;
}

template <typename T>
Var<T> transpose2(const Var<T>& a) {
  if (a->value.rank() != 2) throw shape_error("transpose2: need matrix");
  const int r = a->value.dim(0), c = a->value.dim(1);
  Tensor<T> out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = a->value.at(i, j);
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a, r, c] {
    if (!detail::wants(a)) return;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) a->grad.at(i, j) += self->grad.at(j, i);
  };
  return n;
}

// Main diagonal of a square matrix -> vector.
template <typename T>
Var<T> diag_of(const Var<T>& a) {
  if (a->value.rank() != 2 || a->value.dim(0) != a->value.dim(1))
    throw shape_error("diag_of: need square matrix");
  const int p = a->value.dim(0);
  Tensor<T> out({p});
  for (int i = 0; i < p; ++i) out[i] = a->value.at(i, i);
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a, p] {
    if (detail::wants(a))
      for (int i = 0; i < p; ++i) a->grad.at(i, i) += self->grad[i];
  };
  return n;
}

// log(sum_j exp(A[i,j])) per row, computed with max subtraction.
template <typename T>
Var<T> row_logsumexp(const Var<T>& a) {
  if (a->value.rank() != 2) throw shape_error("row_logsumexp: need matrix");
  const int rows = a->value.dim(0), cols = a->value.dim(1);
  Tensor<T> out({rows});
  for (int r = 0; r < rows; ++r) {
    T m = a->value.at(r, 0);
    for (int c = 1; c < cols; ++c) m = std::max(m, a->value.at(r, c));
    T s = 0;
    for (int c = 0; c < cols; ++c) s += std::exp(a->value.at(r, c) - m);
    out[r] = m + std::log(s);
  }
  auto n = detail::make(std::move(out), {a});
  Node<T>* self = n.get();
  n->backprop = [self, a, rows, cols] {
    if (!detail::wants(a)) return;
    for (int r = 0; r < rows; ++r) {
      const T g = self->grad[r];
      const T lse = self->value[r];
      for (int c = 0; c < cols; ++c)
        a->grad.at(r, c) += g * std::exp(a->value.at(r, c) - lse);
    }
  };
  return n;
}

// Vector dot product -> scalar.
template <typename T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "dot");
  T s = 0;
  for (int64_t i = 0; i < a->value.size(); ++i) s += a->value[i] * b->value[i];
  auto n = detail::make(Tensor<T>::scalar(s), {a, b});
  Node<T>* self = n.get();
  n->backprop = [self, a, b] {
    const T g = self->grad[0];
    if (detail::wants(a))
      for (int64_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g * b->value[i];
    if (detail::wants(b))
      for (int64_t i = 0; i < b->grad.size(); ++i) b->grad[i] += g * a->value[i];
  };
  return n;
}

// ---------------------------------------------------------------------------
// Table and spatial gathers
// ---------------------------------------------------------------------------

// rows of table [K,D] selected by idx -> [P,D]; grads scatter-add back.
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::vector<int> idx) {
  if (table->value.rank() != 2) throw shape_error("gather_rows: need matrix");
  const int d = table->value.dim(1);
  const int p = static_cast<int>(idx.size());
  Tensor<T> out({p, d});
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) = table->value.at(idx[i], j);
  auto n = detail::make(std::move(out), {table});
  Node<T>* self = n.get();
  n->backprop = [self, table, idx = std::move(idx), p, d] {
    if (!detail::wants(table)) return;
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < d; ++j)
        table->grad.at(idx[i], j) += self->grad.at(i, j);
  };
  return n;
}

// Feature vectors of a [D,h,w] grid at the given flat spatial positions
// -> [P,D] matrix.
template <typename T>
Var<T> gather_spatial(const Var<T>& z, std::vector<int> pos) {
  if (z->value.rank() != 3) throw shape_error("gather_spatial: need [D,h,w]");
  const int d = z->value.dim(0);
  const int hw = z->value.dim(1) * z->value.dim(2);
  const int p = static_cast<int>(pos.size());
  Tensor<T> out({p, d});
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < d; ++j)
      out.at(i, j) = z->value[static_cast<int64_t>(j) * hw + pos[i]];
  auto n = detail::make(std::move(out), {z});
  Node<T>* self = n.get();
  n->backprop = [self, z, pos = std::move(pos), p, d, hw] {
    if (!detail::wants(z)) return;
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < d; ++j)
        z->grad[static_cast<int64_t>(j) * hw + pos[i]] += self->grad.at(i, j);
  };
  return n;
}

// ---------------------------------------------------------------------------
// Gradient routing
// ---------------------------------------------------------------------------

// Forward equals the input; contributes no gradient to it.
template <typename T>
Var<T> detach(const Var<T>& a) {
  return leaf(a->value, false);
}

// Forward equals z_q bit-exactly; the incoming gradient passes to z_e
// unchanged and z_q receives none.
template <typename T>
Var<T> straight_through(const Var<T>& z_e, const Var<T>& z_q) {
  check_same_shape(z_e->value, z_q->value, "straight_through");
  auto n = detail::make(z_q->value, {z_e});
  Node<T>* self = n.get();
  n->backprop = [self, z_e] {
    if (detail::wants(z_e))
      for (int64_t i = 0; i < self->grad.size(); ++i)
        z_e->grad[i] += self->grad[i];
  };
  return n;
}

// ---------------------------------------------------------------------------
// Neural-net layers
// ---------------------------------------------------------------------------

namespace detail {

// x: [IC,H,W] -> cols [IC*kh*kw, OH*OW]
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad,
                 int oh, int ow) {
  const int ic = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> cols({ic * kh * kw, oh * ow});
  T* out = cols.data();
  for (int c = 0; c < ic; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          const bool row_ok = iy >= 0 && iy < h;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            *out++ = (row_ok && ix >= 0 && ix < w) ? x.at(c, iy, ix) : T(0);
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
void col2im_add(const Tensor<T>& cols, Tensor<T>& dx, int kh, int kw,
                int stride, int pad, int oh, int ow) {
  const int ic = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  const T* in = cols.data();
  for (int c = 0; c < ic; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          const bool row_ok = iy >= 0 && iy < h;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (row_ok && ix >= 0 && ix < w) dx.at(c, iy, ix) += *in;
            ++in;
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-d convolution; x [IC,H,W], w [OC,IC,kh,kw], optional bias [OC].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride,
              int pad) {
  if (x->value.rank() != 3 || w->value.rank() != 4)
    throw shape_error("conv2d: need x [IC,H,W] and w [OC,IC,kh,kw]");
  const int ic = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
  const int oc = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  if (w->value.dim(1) != ic)
    throw shape_error("conv2d: input channel mismatch");
  if (b && (b->value.rank() != 1 || b->value.dim(0) != oc))
    throw shape_error("conv2d: bias shape mismatch");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw shape_error("conv2d: kernel larger than input");

  auto cols = std::make_shared<Tensor<T>>(
      detail::im2col(x->value, kh, kw, stride, pad, oh, ow));
  const int kdim = ic * kh * kw, odim = oh * ow;

  Tensor<T> out({oc, oh, ow});
  {
    detail::ConstMatMap<T> W(w->value.data(), oc, kdim),
        C(cols->data(), kdim, odim);
    detail::MatMap<T> O(out.data(), oc, odim);
    O.noalias() = W * C;
    if (b)
      for (int c = 0; c < oc; ++c) O.row(c).array() += b->value[c];
  }

  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b}
                                  : std::vector<Var<T>>{x, w};
  auto n = detail::make(std::move(out), std::move(parents));
  Node<T>* self = n.get();
  n->backprop = [self, x, w, b, cols, stride, pad, ic, oc, kh, kw, kdim, odim,
                 oh, ow] {
    detail::ConstMatMap<T> G(self->grad.data(), oc, odim);
    if (detail::wants(w)) {
      detail::ConstMatMap<T> C(cols->data(), kdim, odim);
      detail::MatMap<T>(w->grad.data(), oc, kdim).noalias() +=
          G * C.transpose();
    }
    if (b && detail::wants(b))
      for (int c = 0; c < oc; ++c) b->grad[c] += G.row(c).sum();
    if (detail::wants(x)) {
      Tensor<T> dcols({kdim, odim});
      detail::ConstMatMap<T> W(w->value.data(), oc, kdim);
      detail::MatMap<T>(dcols.data(), kdim, odim).noalias() =
          W.transpose() * G;
      detail::col2im_add(dcols, x->grad, kh, kw, stride, pad, oh, ow);
    }
  };
  return n;
}

// Nearest-neighbor 2x upsampling of [C,h,w].
template <typename T>
Var<T> upsample2(const Var<T>& x) {
  if (x->value.rank() != 3) throw shape_error("upsample2: need [C,h,w]");
  const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  Tensor<T> out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out.at(ch, y, xx) = x->value.at(ch, y / 2, xx / 2);
  auto n = detail::make(std::move(out), {x});
  Node<T>* self = n.get();
  n->backprop = [self, x, c, h, w] {
    if (!detail::wants(x)) return;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          x->grad.at(ch, y / 2, xx / 2) += self->grad.at(ch, y, xx);
  };
  return n;
}

// 2x2 average pooling of [C,h,w]; h and w must be even.
template <typename T>
Var<T> avgpool2(const Var<T>& x) {
  if (x->value.rank() != 3) throw shape_error("avgpool2: need [C,h,w]");
  const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  if (h % 2 || w % 2) throw shape_error("avgpool2: odd spatial dims");
  Tensor<T> out({c, h / 2, w / 2});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h / 2; ++y)
      for (int xx = 0; xx < w / 2; ++xx)
        out.at(ch, y, xx) =
            (x->value.at(ch, 2 * y, 2 * xx) + x->value.at(ch, 2 * y, 2 * xx + 1) +
             x->value.at(ch, 2 * y + 1, 2 * xx) +
             x->value.at(ch, 2 * y + 1, 2 * xx + 1)) *
            T(0.25);
  auto n = detail::make(std::move(out), {x});
  Node<T>* self = n.get();
  n->backprop = [self, x, c, h, w] {
    if (!detail::wants(x)) return;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h / 2; ++y)
        for (int xx = 0; xx < w / 2; ++xx) {
          const T g = self->grad.at(ch, y, xx) * T(0.25);
          x->grad.at(ch, 2 * y, 2 * xx) += g;
          x->grad.at(ch, 2 * y, 2 * xx + 1) += g;
          x->grad.at(ch, 2 * y + 1, 2 * xx) += g;
          x->grad.at(ch, 2 * y + 1, 2 * xx + 1) += g;
        }
  };
  return n;
}

// Per-channel feature modulation: y[c,:,:] = x[c,:,:] * (1 + s[c]) + t[c].
template <typename T>
Var<T> film(const Var<T>& x, const Var<T>& s, const Var<T>& t) {
  if (x->value.rank() != 3 || s->value.rank() != 1 || t->value.rank() != 1 ||
      s->value.dim(0) != x->value.dim(0) || t->value.dim(0) != x->value.dim(0))
    throw shape_error("film: shapes incompatible");
  const int c = x->value.dim(0);
  const int hw = x->value.dim(1) * x->value.dim(2);
  Tensor<T> out = x->value;
  for (int ch = 0; ch < c; ++ch) {
    const T a = T(1) + s->value[ch], sh = t->value[ch];
    T* row = out.data() + static_cast<int64_t>(ch) * hw;
    for (int i = 0; i < hw; ++i) row[i] = row[i] * a + sh;
  }
  auto n = detail::make(std::move(out), {x, s, t});
  Node<T>* self = n.get();
  n->backprop = [self, x, s, t, c, hw] {
    for (int ch = 0; ch < c; ++ch) {
      const T a = T(1) + s->value[ch];
      const T* g = self->grad.data() + static_cast<int64_t>(ch) * hw;
      const T* xv = x->value.data() + static_cast<int64_t>(ch) * hw;
      if (detail::wants(x)) {
        T* gx = x->grad.data() + static_cast<int64_t>(ch) * hw;
        for (int i = 0; i < hw; ++i) gx[i] += g[i] * a;
      }
      if (detail::wants(s)) {
        T acc = 0;
        for (int i = 0; i < hw; ++i) acc += g[i] * xv[i];
        s->grad[ch] += acc;
      }
      if (detail::wants(t)) {
        T acc = 0;
        for (int i = 0; i < hw; ++i) acc += g[i];
        t->grad[ch] += acc;
      }
    }
  };
  return n;
}

// Fully connected: y = W x + b, W [m,n], x [n], b [m].
template <typename T>
Var<T> linear(const Var<T>& w, const Var<T>& x, const Var<T>& b) {
  if (w->value.rank() != 2 || x->value.rank() != 1 ||
      w->value.dim(1) != x->value.dim(0))
    throw shape_error("linear: shapes incompatible");
  const int m = w->value.dim(0), k = w->value.dim(1);
  if (b && (b->value.rank() != 1 || b->value.dim(0) != m))
    throw shape_error("linear: bias shape mismatch");
  Tensor<T> out({m});
  for (int i = 0; i < m; ++i) {
    T s = b ? b->value[i] : T(0);
    for (int j = 0; j < k; ++j) s += w->value.at(i, j) * x->value[j];
    out[i] = s;
  }
  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{w, x, b}
                                  : std::vector<Var<T>>{w, x};
  auto n = detail::make(std::move(out), std::move(parents));
  Node<T>* self = n.get();
  n->backprop = [self, w, x, b, m, k] {
    for (int i = 0; i < m; ++i) {
      const T g = self->grad[i];
      if (detail::wants(w))
        for (int j = 0; j < k; ++j) w->grad.at(i, j) += g * x->value[j];
      if (detail::wants(x))
        for (int j = 0; j < k; ++j) x->grad[j] += g * w->value.at(i, j);
      if (b && detail::wants(b)) b->grad[i] += g;
    }
  };
  return n;
}

// ---------------------------------------------------------------------------
// Backward driver
// ---------------------------------------------------------------------------

// Accumulates d(root)/d(node) into .grad of every node reachable from root
// that requires a gradient. Root must be scalar.
template <typename T>
void backward(const Var<T>& root) {
  if (root->value.size() != 1)
    throw value_error("backward: root must be a scalar");
  if (!root->requires_grad) return;

  std::vector<Node<T>*> order;  // parents before children
  std::unordered_set<Node<T>*> seen;
  struct Frame {
    Node<T>* n;
    size_t next;
  };
  std::vector<Frame> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node<T>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) n->grad = Tensor<T>::zeros(n->value.shape());
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop();
}

}  // namespace vqc::ag
