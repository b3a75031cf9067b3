// Copyright (c) 2026 The CatSeg Authors. All Rights Reserved.
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

#include <cmath>
#include <string>
#include <vector>

#include "catseg.hpp"

namespace catseg::test {

template <class T = double>
Tensor<T> random(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  return rng.uniform_tensor<T>(std::move(shape), lo, hi);
}

template <class T>
Tensor<T> naive_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T s{0};
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

/// Rows of `x` ([N, ...]) reordered so that row r of the result is row perm[r].
template <class T>
Tensor<T> take_rows(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t row = x.size() / x.dim(0);
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (std::size_t k = 0; k < row; ++k) out[r * row + k] = x[perm[r] * row + k];
  return out;
}

/// Entries of the given axis reordered: out[..., r, ...] = x[..., perm[r], ...].
template <class T>
Tensor<T> take_axis(const Tensor<T>& x, std::size_t axis, const std::vector<std::size_t>& perm) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= x.dim(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  const std::size_t n = x.dim(axis);
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < inner; ++i) {
        out[(o * n + r) * inner + i] = x[(o * n + perm[r]) * inner + i];
      }
  return out;
}

inline AttentionParams<double> random_attention(Rng& rng, std::size_t d_qk, std::size_t d_v,
                                                std::size_t dm, std::size_t heads) {
  return {random(rng, {d_qk, dm}), random(rng, {d_qk, dm}), random(rng, {d_v, dm}),
          random(rng, {dm, dm}), heads};
}

inline AttentionParams<double> identity_attention(std::size_t d) {
  Tensor<double> eye({d, d});
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  return {eye, eye, eye, eye, 1};
}

/// Scaled dot-product attention of one head over explicit rows, with an
/// optional predicate deciding which key each query may see.
template <class Allowed>
std::vector<std::vector<double>> naive_head(const std::vector<std::vector<double>>& q,
                                            const std::vector<std::vector<double>>& k,
                                            const std::vector<std::vector<double>>& v,
                                            Allowed&& allowed) {
  const std::size_t n = q.size(), hd = q[0].size(), dv = v[0].size();
  std::vector<std::vector<double>> out(n, std::vector<double>(dv, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(n, -INFINITY);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      if (!allowed(i, j)) continue;
      double dot = 0;
      for (std::size_t c = 0; c < hd; ++c) dot += q[i][c] * k[j][c];
      s[j] = dot / std::sqrt(static_cast<double>(hd));
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::isinf(s[j]) ? 0.0 : std::exp(s[j] - mx);
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isinf(s[j])) continue;
      const double a = std::exp(s[j] - mx) / z;
      for (std::size_t c = 0; c < dv; ++c) out[i][c] += a * v[j][c];
    }
  }
  return out;
}

/// Multi-head attention over N tokens computed head by head with plain loops.
/// `allowed(i, j)` restricts which keys a query sees.
template <class Allowed>
Tensor<double> naive_attention(const Tensor<double>& xq, const Tensor<double>& xv,
                               const AttentionParams<double>& p, Allowed&& allowed) {
  const std::size_t n = xq.dim(0), dm = p.wq.dim(1), hd = dm / p.heads;
  const auto q = naive_matmul(xq, p.wq), k = naive_matmul(xq, p.wk), v = naive_matmul(xv, p.wv);
  Tensor<double> merged({n, dm});
  for (std::size_t h = 0; h < p.heads; ++h) {
    std::vector<std::vector<double>> qh(n), kh(n), vh(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < hd; ++c) {
        qh[i].push_back(q[i * dm + h * hd + c]);
        kh[i].push_back(k[i * dm + h * hd + c]);
        vh[i].push_back(v[i * dm + h * hd + c]);
      }
    const auto o = naive_head(qh, kh, vh, allowed);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < hd; ++c) merged[i * dm + h * hd + c] = o[i][c];
  }
  return naive_matmul(merged, p.wo);
}

inline SegmentationMap make_map(std::size_t h, std::size_t w, std::vector<std::uint32_t> idx,
                                std::vector<std::string> legend = {}) {
  return {h, w, std::move(idx), std::move(legend)};
}

inline SegmentationMap random_map(Rng& rng, std::size_t h, std::size_t w, std::size_t n) {
  SegmentationMap m{h, w, std::vector<std::uint32_t>(h * w), {}};
  for (auto& v : m.indices) v = static_cast<std::uint32_t>(rng.below(n));
  return m;
}

/// Parameter store with every attention and FFN weight set to zero.
template <class T>
void zero_block_weights(ParameterStore<T>& store) {
  for (auto& p : store.all()) {
    if (p.role == Role::query || p.role == Role::key || p.role == Role::value ||
        p.role == Role::output || p.role == Role::ffn) {
      for (auto& v : p.value.data()) v = T{0};
    }
  }
}

}  // namespace catseg::test
