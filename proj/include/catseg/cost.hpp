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

// Cosine cost volume between image positions and class text embeddings, its
// per-class convolutional embedding, the concatenated-feature baseline, and
// top-k class pre-selection.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "catseg/encoder.hpp"

namespace catseg {

inline constexpr std::size_t kCostKernel = 7;

template <class T>
struct CostVolume {
  Tensor<T> cost;                     // [H,W,N]
  std::vector<std::size_t> selected;  // original class index of each column
};

template <class T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <class T>
struct LinearParams {
  Tensor<T> weight;
  Tensor<T> bias;
};

namespace detail {

template <class T>
std::vector<double> row_norms(const Tensor<T>& x, std::size_t rows, std::size_t d) {
  std::vector<double> n(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const double v = x[r * d + k];
      s += v * v;
    }
    n[r] = std::sqrt(s);
  }
  return n;
}

inline std::string grid_position(std::size_t r, const Shape& s) {
  if (s.size() != 3) return "row " + std::to_string(r);
  return "position (" + std::to_string(r / s[1]) + "," + std::to_string(r % s[1]) + ")";
}

}  // namespace detail

namespace ag {

/// C(i,n) = <dv_i, dl_n> / (|dv_i| |dl_n|). dv is [..., d], dl is [N, d];
/// output is [..., N]. Dot products and norms accumulate in double.
template <class T>
Var<T> cosine_cost(Var<T> dv, Var<T> dl) {
  const Shape vs = dv.shape(), ls = dl.shape();
  if (vs.size() < 2 || ls.size() != 2 || vs.back() != ls[1]) {
    throw DimensionError("cosine_cost: widths differ, image " + shape_str(vs) + ", text " +
                         shape_str(ls));
  }
  const std::size_t d = ls[1], n = ls[0], p = dv.value().size() / d;
  const auto nv = catseg::detail::row_norms(dv.value(), p, d);
  const auto nl = catseg::detail::row_norms(dl.value(), n, d);
  for (std::size_t i = 0; i < p; ++i) {
    if (nv[i] <= 1e-12) {
      throw NumericalError("zero-norm image embedding at " + catseg::detail::grid_position(i, vs));
    }
  }
  for (std::size_t c = 0; c < n; ++c) {
    if (nl[c] <= 1e-12) throw NumericalError("zero-norm text embedding at row " + std::to_string(c));
  }
  Shape os(vs.begin(), vs.end() - 1);
  os.push_back(n);
  Tensor<T> out(os);
  const auto& a = dv.value();
  const auto& b = dl.value();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t c = 0; c < n; ++c) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += double(a[i * d + k]) * double(b[c * d + k]);
      out[i * n + c] = static_cast<T>(s / (nv[i] * nl[c]));
    }
  auto& tape = detail::same_tape<T>({dv, dl});
  Tensor<T> cval = out;
  return tape.record(
      "cosine_cost", {dv.id, dl.id}, std::move(out),
      [a, b, nv, nl, cval, p, n, d](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        if (gi[0]) {
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t k = 0; k < d; ++k) {
              const double u = a[i * d + k] / nv[i];
              double s = 0;
              for (std::size_t c = 0; c < n; ++c) {
                const double w = b[c * d + k] / nl[c];
                s += double(g[i * n + c]) * (w - double(cval[i * n + c]) * u);
              }
              (*gi[0])[i * d + k] += static_cast<T>(s / nv[i]);
            }
        }
        if (gi[1]) {
          for (std::size_t c = 0; c < n; ++c)
            for (std::size_t k = 0; k < d; ++k) {
              const double w = b[c * d + k] / nl[c];
              double s = 0;
              for (std::size_t i = 0; i < p; ++i) {
                const double u = a[i * d + k] / nv[i];
                s += double(g[i * n + c]) * (u - double(cval[i * n + c]) * w);
              }
              (*gi[1])[c * d + k] += static_cast<T>(s / nl[c]);
            }
        }
      });
}

}  // namespace ag

/// Indices of the k classes with the highest max-over-positions score, in
/// increasing index order. Ties go to the lower index.
template <class T>
std::vector<std::size_t> topk_indices(const Tensor<T>& cost, std::size_t k) {
  if (k == 0) throw ConfigError("top-k: k must be at least 1");
  if (cost.rank() < 1) throw DimensionError("top-k: empty cost volume");
  const std::size_t n = cost.shape().back(), p = cost.size() / n;
  std::vector<T> best(n, -std::numeric_limits<T>::infinity());
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t c = 0; c < n; ++c) best[c] = std::max(best[c], cost[i * n + c]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return best[x] > best[y]; });
  order.resize(std::min(k, n));
  std::sort(order.begin(), order.end());
  return order;
}

/// Index that keeps the listed entries of the last axis.
inline std::vector<std::size_t> column_index(const Shape& s, const std::vector<std::size_t>& keep,
                                             Shape* out_shape) {
  const std::size_t n = s.back(), p = numel(s) / n;
  std::vector<std::size_t> idx;
  idx.reserve(p * keep.size());
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t c : keep) idx.push_back(i * n + c);
  *out_shape = s;
  out_shape->back() = keep.size();
  return idx;
}

/// Index that keeps the listed rows of a [N, d] tensor.
inline std::vector<std::size_t> row_index(const Shape& s, const std::vector<std::size_t>& keep,
                                          Shape* out_shape) {
  const std::size_t d = s[1];
  std::vector<std::size_t> idx;
  idx.reserve(keep.size() * d);
  for (std::size_t r : keep)
    for (std::size_t k = 0; k < d; ++k) idx.push_back(r * d + k);
  *out_shape = {keep.size(), d};
  return idx;
}

template <class T>
ag::Var<T> select_columns(ag::Var<T> x, const std::vector<std::size_t>& keep) {
  Shape os;
  auto idx = column_index(x.shape(), keep, &os);
  return ag::gather(x, std::move(idx), os);
}

template <class T>
ag::Var<T> select_rows(ag::Var<T> x, const std::vector<std::size_t>& keep) {
  Shape os;
  auto idx = row_index(x.shape(), keep, &os);
  return ag::gather(x, std::move(idx), os);
}

/// Shared 7x7 convolution over each class slice: C [H,W,N] -> [H,W,N,d_F].
template <class T>
ag::Var<T> embed_cost(ag::Var<T> cost, ag::Var<T> weight, ag::Var<T> bias) {
  const Shape s = cost.shape();
  if (s.size() != 3) throw DimensionError("embed_cost: expected [H,W,N], got " + shape_str(s));
  const std::size_t h = s[0], w = s[1], n = s[2];
  auto x = ag::reshape(ag::permute(cost, {2, 0, 1}), {n, 1, h, w});
  auto y = ag::conv2d(x, weight, bias, 1, weight.shape()[2] / 2);
  return ag::permute(y, {2, 3, 0, 1});
}

/// Concatenated-feature baseline: linear(concat(D_V(i), D_L(n))) for every
/// (position, class) pair, [H,W,N,d_F]. No normalization.
template <class T>
ag::Var<T> feature_volume(ag::Var<T> dv, ag::Var<T> dl, ag::Var<T> weight, ag::Var<T> bias) {
  const Shape vs = dv.shape(), ls = dl.shape();
  if (vs.size() != 3 || ls.size() != 2 || vs[2] != ls[1]) {
    throw DimensionError("feature volume: widths differ, image " + shape_str(vs) + ", text " +
                         shape_str(ls));
  }
  const std::size_t h = vs[0], w = vs[1], d = vs[2], n = ls[0];
  std::vector<std::size_t> vi, li;
  vi.reserve(h * w * n * d);
  li.reserve(h * w * n * d);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t k = 0; k < d; ++k) {
        vi.push_back(p * d + k);
        li.push_back(c * d + k);
      }
  const Shape rs{h, w, n, d};
  auto pair = ag::concat_last<T>({ag::gather(dv, std::move(vi), rs), ag::gather(dl, std::move(li), rs)});
  return ag::add_bias(ag::matmul(pair, weight), bias);
}

// Tensor-valued entry points.

template <class T>
CostVolume<T> build_cost_volume(const EmbeddingSet<T>& emb) {
  emb.validate();
  ag::Tape<T> tape;
  CostVolume<T> cv{ag::cosine_cost(tape.constant(emb.image), tape.constant(emb.text)).value(), {}};
  cv.selected.resize(emb.num_classes());
  std::iota(cv.selected.begin(), cv.selected.end(), 0);
  return cv;
}

template <class T>
CostVolume<T> select_topk_classes(const CostVolume<T>& cv, std::size_t k) {
  const auto keep = topk_indices(cv.cost, k);
  Shape os;
  const auto idx = column_index(cv.cost.shape(), keep, &os);
  CostVolume<T> out{ops::gather(cv.cost, idx, os), {}};
  for (std::size_t c : keep) out.selected.push_back(cv.selected.at(c));
  return out;
}

template <class T>
Tensor<T> embed_cost(const CostVolume<T>& cv, const ConvParams<T>& p) {
  ag::Tape<T> tape;
  return embed_cost(tape.constant(cv.cost), tape.constant(p.weight), tape.constant(p.bias)).value();
}

template <class T>
Tensor<T> build_feature_volume(const EmbeddingSet<T>& emb, const LinearParams<T>& p) {
  ag::Tape<T> tape;
  return feature_volume(tape.constant(emb.image), tape.constant(emb.text),
                        tape.constant(p.weight), tape.constant(p.bias))
      .value();
}

}  // namespace catseg
