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

// Softmax multi-head attention, (shifted) window attention over a token grid,
// and kernelized linear attention with the elu+1 feature map.
//
// Head layout: projected tokens of width d_model are split into `heads`
// contiguous slices of width d_model/heads. Window attention stacks the
// per-window problems as batch index ((b * heads) + h) * n_windows + w so a
// single [n_windows, N, N] mask tiles the whole score tensor.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "catseg/autograd.hpp"

namespace catseg {

enum class LinearAttentionMode { naive, streaming };

inline constexpr double kMaskedLogit = -1e9;

/// Projection weights of one attention layer. W_q and W_k read the
/// guidance-augmented width; W_v reads the plain token width.
template <class T>
struct AttentionParams {
  Tensor<T> wq, wk, wv, wo;
  std::size_t heads = 1;
};

namespace attn {

template <class T>
struct Weights {
  ag::Var<T> wq, wk, wv, wo;
  std::size_t heads = 1;
};

template <class T>
Weights<T> bind(ag::Tape<T>& tape, const AttentionParams<T>& p) {
  return {tape.constant(p.wq), tape.constant(p.wk), tape.constant(p.wv), tape.constant(p.wo),
          p.heads};
}

template <class T>
void validate(const Weights<T>& w, std::size_t d_qk, std::size_t d_v) {
  const auto& q = w.wq.shape();
  const auto& k = w.wk.shape();
  const auto& v = w.wv.shape();
  const auto& o = w.wo.shape();
  if (q.size() != 2 || k.size() != 2 || v.size() != 2 || o.size() != 2) {
    throw DimensionError("attention: projections must be matrices");
  }
  const std::size_t dm = q[1];
  if (q[0] != d_qk || k[0] != d_qk || v[0] != d_v || k[1] != dm || v[1] != dm ||
      o[0] != dm || o[1] != dm) {
    throw DimensionError("attention: inputs of width qk=" + std::to_string(d_qk) +
                         ", v=" + std::to_string(d_v) + " do not match W_q " + shape_str(q) +
                         ", W_k " + shape_str(k) + ", W_v " + shape_str(v) + ", W_o " +
                         shape_str(o));
  }
  if (w.heads == 0 || dm % w.heads != 0) {
    throw ConfigError("attention: d_model " + std::to_string(dm) + " not divisible by " +
                      std::to_string(w.heads) + " heads");
  }
}

/// [B, N, heads*hd] -> [B*heads, N, hd].
inline std::vector<std::size_t> split_heads_index(std::size_t batch, std::size_t n,
                                                  std::size_t heads, std::size_t hd) {
  std::vector<std::size_t> idx;
  idx.reserve(batch * n * heads * hd);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t c = 0; c < hd; ++c) idx.push_back((b * n + t) * heads * hd + h * hd + c);
  return idx;
}

/// Inverse of split_heads_index: [B*heads, N, hd] -> [B, N, heads*hd].
inline std::vector<std::size_t> merge_heads_index(std::size_t batch, std::size_t n,
                                                  std::size_t heads, std::size_t hd) {
  std::vector<std::size_t> idx;
  idx.reserve(batch * n * heads * hd);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t c = 0; c < hd; ++c) idx.push_back(((b * heads + h) * n + t) * hd + c);
  return idx;
}

/// Gathers a [B,H,W,heads*hd] grid, cyclically shifted by (-shift,-shift),
/// into [B*heads*nW, M*M, hd] windows.
inline std::vector<std::size_t> window_index(std::size_t batch, std::size_t height,
                                             std::size_t width, std::size_t heads,
                                             std::size_t hd, std::size_t m, std::size_t shift) {
  const std::size_t nwy = height / m, nwx = width / m, dm = heads * hd;
  std::vector<std::size_t> idx;
  idx.reserve(batch * height * width * dm);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t wy = 0; wy < nwy; ++wy)
        for (std::size_t wx = 0; wx < nwx; ++wx)
          for (std::size_t ty = 0; ty < m; ++ty)
            for (std::size_t tx = 0; tx < m; ++tx) {
              const std::size_t y = (wy * m + ty + shift) % height;
              const std::size_t x = (wx * m + tx + shift) % width;
              for (std::size_t c = 0; c < hd; ++c) {
                idx.push_back(((b * height + y) * width + x) * dm + h * hd + c);
              }
            }
  return idx;
}

inline std::vector<std::size_t> invert(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

template <class T>
ag::Var<T> core(ag::Var<T> q, ag::Var<T> k, ag::Var<T> v, T scale, const Tensor<T>* mask) {
  auto scores = ag::scale(ag::bmm(q, k, false, true), scale);
  if (mask) scores = ag::add_periodic(scores, *mask);
  return ag::bmm(ag::softmax(scores), v);
}

}  // namespace attn

/// Additive mask for shifted windows, [nW, M*M, M*M]: 0 where two tokens of
/// the same shifted window came from the same side of every wrap seam, the
/// masked logit otherwise.
template <class T>
Tensor<T> shifted_window_mask(std::size_t height, std::size_t width, std::size_t m,
                              std::size_t shift) {
  const std::size_t nwy = height / m, nwx = width / m, n = m * m;
  auto region = [&](std::size_t pos, std::size_t len) -> std::size_t {
    if (pos < len - m) return 0;
    if (pos < len - shift) return 1;
    return 2;
  };
  Tensor<T> mask({nwy * nwx, n, n});
  for (std::size_t wy = 0; wy < nwy; ++wy)
    for (std::size_t wx = 0; wx < nwx; ++wx) {
      const std::size_t w = wy * nwx + wx;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t yi = wy * m + i / m, xi = wx * m + i % m;
          const std::size_t yj = wy * m + j / m, xj = wx * m + j % m;
          const bool same = region(yi, height) == region(yj, height) &&
                            region(xi, width) == region(xj, width);
          mask[(w * n + i) * n + j] = same ? T{0} : static_cast<T>(kMaskedLogit);
        }
    }
  return mask;
}

/// Scaled dot-product attention with `heads` heads. Inputs are [N, d] or
/// batched [B, N, d]; output has width d_model.
template <class T>
ag::Var<T> multi_head_attention(ag::Var<T> q_in, ag::Var<T> k_in, ag::Var<T> v_in,
                                const attn::Weights<T>& w) {
  const Shape qs = q_in.shape();
  if (qs.size() < 2 || qs.size() > 3 || k_in.shape() != qs ||
      v_in.shape().size() != qs.size() ||
      v_in.shape()[qs.size() - 2] != qs[qs.size() - 2]) {
    throw DimensionError("multi_head_attention: incompatible inputs q " + shape_str(qs) +
                         ", k " + shape_str(k_in.shape()) + ", v " + shape_str(v_in.shape()));
  }
  attn::validate(w, qs.back(), v_in.shape().back());
  const std::size_t batch = qs.size() == 3 ? qs[0] : 1, n = qs[qs.size() - 2];
  const std::size_t dm = w.wq.shape()[1], hd = dm / w.heads;
  auto split = std::make_shared<const std::vector<std::size_t>>(
      attn::split_heads_index(batch, n, w.heads, hd));
  const Shape hs{batch * w.heads, n, hd};
  auto q = ag::gather(ag::matmul(q_in, w.wq), split, hs);
  auto k = ag::gather(ag::matmul(k_in, w.wk), split, hs);
  auto v = ag::gather(ag::matmul(v_in, w.wv), split, hs);
  auto o = attn::core(q, k, v, static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))),
                      static_cast<const Tensor<T>*>(nullptr));
  Shape os = qs;
  os.back() = dm;
  auto merged = ag::gather(o, attn::merge_heads_index(batch, n, w.heads, hd), os);
  return ag::matmul(merged, w.wo);
}

/// Window attention over a [H,W,d] (or batched [B,H,W,d]) token grid. With
/// shift = M/2 the grid is rolled by (-M/2,-M/2) before partitioning, pairs
/// that straddle a wrap seam are masked, and the result is rolled back.
template <class T>
ag::Var<T> window_attention(ag::Var<T> x_qk, ag::Var<T> x_v, std::size_t m, std::size_t shift,
                            const attn::Weights<T>& w) {
  const Shape s = x_qk.shape();
  if (s.size() < 3 || s.size() > 4 || x_v.shape().size() != s.size()) {
    throw DimensionError("window_attention: expected [H,W,d] or [B,H,W,d], got " +
                         shape_str(s));
  }
  const std::size_t batch = s.size() == 4 ? s[0] : 1;
  const std::size_t height = s[s.size() - 3], width = s[s.size() - 2];
  for (std::size_t a = 0; a + 1 < s.size(); ++a) {
    if (x_v.shape()[a] != s[a]) {
      throw DimensionError("window_attention: grids differ " + shape_str(s) + " vs " +
                           shape_str(x_v.shape()));
    }
  }
  if (m == 0 || height % m != 0 || width % m != 0) {
    throw ConfigError("window_attention: window " + std::to_string(m) +
                      " does not divide grid " + std::to_string(height) + "x" +
                      std::to_string(width));
  }
  if (shift != 0 && (m % 2 != 0 || shift != m / 2)) {
    throw ConfigError("window_attention: shift must be 0 or M/2, got " + std::to_string(shift));
  }
  attn::validate(w, s.back(), x_v.shape().back());
  const std::size_t dm = w.wq.shape()[1], hd = dm / w.heads;
  const std::size_t nw = (height / m) * (width / m), n = m * m;
  auto part = std::make_shared<const std::vector<std::size_t>>(
      attn::window_index(batch, height, width, w.heads, hd, m, shift));
  const Shape ws{batch * w.heads * nw, n, hd};
  auto q = ag::gather(ag::matmul(x_qk, w.wq), part, ws);
  auto k = ag::gather(ag::matmul(x_qk, w.wk), part, ws);
  auto v = ag::gather(ag::matmul(x_v, w.wv), part, ws);
  std::optional<Tensor<T>> mask;
  if (shift != 0) mask = shifted_window_mask<T>(height, width, m, shift);
  auto o = attn::core(q, k, v, static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))),
                      mask ? &*mask : nullptr);
  Shape os = s;
  os.back() = dm;
  auto back = ag::gather(o, attn::invert(*part), os);
  return ag::matmul(back, w.wo);
}

/// out_i = phi(q_i)^T S / (phi(q_i)^T z), S = sum_j phi(k_j) v_j^T,
/// z = sum_j phi(k_j), one batch item per leading index; single pass over keys.
/// Inputs are already feature-mapped: phi_q, phi_k [B,N,h], v [B,N,dv].
template <class T>
Tensor<T> linear_attention_streaming(const Tensor<T>& phi_q, const Tensor<T>& phi_k,
                                     const Tensor<T>& v) {
  const std::size_t batch = phi_q.dim(0), n = phi_q.dim(1), h = phi_q.dim(2), dv = v.dim(2);
  Tensor<T> out({batch, n, dv});
  std::vector<T> s(h * dv), z(h);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill(s.begin(), s.end(), T{0});
    std::fill(z.begin(), z.end(), T{0});
    for (std::size_t j = 0; j < n; ++j) {
      const T* kj = &phi_k[(b * n + j) * h];
      const T* vj = &v[(b * n + j) * dv];
      for (std::size_t a = 0; a < h; ++a) {
        z[a] += kj[a];
        for (std::size_t c = 0; c < dv; ++c) s[a * dv + c] += kj[a] * vj[c];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const T* qi = &phi_q[(b * n + i) * h];
      T den{0};
      for (std::size_t a = 0; a < h; ++a) den += qi[a] * z[a];
      if (!(den >= T(1e-12))) throw NumericalError("linear attention: vanishing denominator");
      T* oi = &out[(b * n + i) * dv];
      for (std::size_t a = 0; a < h; ++a)
        for (std::size_t c = 0; c < dv; ++c) oi[c] += qi[a] * s[a * dv + c];
      for (std::size_t c = 0; c < dv; ++c) oi[c] /= den;
    }
  }
  return out;
}

/// Same quantity through the explicit N x N kernel matrix.
template <class T>
Tensor<T> linear_attention_naive(const Tensor<T>& phi_q, const Tensor<T>& phi_k,
                                 const Tensor<T>& v) {
  const std::size_t batch = phi_q.dim(0), n = phi_q.dim(1), dv = v.dim(2);
  auto kernel = ops::bmm(phi_q, phi_k, false, true);
  Tensor<T> out({batch, n, dv});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      T den{0};
      for (std::size_t j = 0; j < n; ++j) den += kernel[(b * n + i) * n + j];
      if (!(den >= T(1e-12))) throw NumericalError("linear attention: vanishing denominator");
      for (std::size_t j = 0; j < n; ++j) {
        const T a = kernel[(b * n + i) * n + j];
        for (std::size_t c = 0; c < dv; ++c) out[(b * n + i) * dv + c] += a * v[(b * n + j) * dv + c];
      }
      for (std::size_t c = 0; c < dv; ++c) out[(b * n + i) * dv + c] /= den;
    }
  return out;
}

namespace ag {

/// Differentiable streaming linear-attention core (see
/// linear_attention_streaming).
template <class T>
Var<T> linear_attention_core(Var<T> phi_q, Var<T> phi_k, Var<T> v) {
  auto& tp = detail::same_tape<T>({phi_q, phi_k, v});
  Tensor<T> q = phi_q.value(), k = phi_k.value(), vv = v.value();
  if (q.rank() != 3 || k.shape() != q.shape() || vv.rank() != 3 || vv.dim(0) != q.dim(0) ||
      vv.dim(1) != q.dim(1)) {
    throw DimensionError("linear_attention: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(vv.shape()));
  }
  auto out = linear_attention_streaming(q, k, vv);
  Tensor<T> ov = out;
  return tp.record(
      "linear_attention", {phi_q.id, phi_k.id, v.id}, std::move(out),
      [q, k, vv, ov](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        const std::size_t batch = q.dim(0), n = q.dim(1), h = q.dim(2), dv = vv.dim(2);
        std::vector<T> s(h * dv), z(h), gs(h * dv), gz(h), gnum(dv);
        for (std::size_t b = 0; b < batch; ++b) {
          std::fill(s.begin(), s.end(), T{0});
          std::fill(z.begin(), z.end(), T{0});
          std::fill(gs.begin(), gs.end(), T{0});
          std::fill(gz.begin(), gz.end(), T{0});
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t a = 0; a < h; ++a) {
              const T kv = k[(b * n + j) * h + a];
              z[a] += kv;
              for (std::size_t c = 0; c < dv; ++c) s[a * dv + c] += kv * vv[(b * n + j) * dv + c];
            }
          for (std::size_t i = 0; i < n; ++i) {
            const T* qi = &q[(b * n + i) * h];
            T den{0};
            for (std::size_t a = 0; a < h; ++a) den += qi[a] * z[a];
            const T* gi_out = &g[(b * n + i) * dv];
            const T* oi = &ov[(b * n + i) * dv];
            T gden{0};
            for (std::size_t c = 0; c < dv; ++c) {
              gnum[c] = gi_out[c] / den;
              gden -= gi_out[c] * oi[c];
            }
            gden /= den;
            for (std::size_t a = 0; a < h; ++a) {
              T acc = z[a] * gden;
              for (std::size_t c = 0; c < dv; ++c) {
                acc += s[a * dv + c] * gnum[c];
                gs[a * dv + c] += qi[a] * gnum[c];
              }
              gz[a] += qi[a] * gden;
              if (gi[0]) (*gi[0])[(b * n + i) * h + a] += acc;
            }
          }
          for (std::size_t j = 0; j < n; ++j) {
            const T* kj = &k[(b * n + j) * h];
            const T* vj = &vv[(b * n + j) * dv];
            for (std::size_t a = 0; a < h; ++a) {
              if (gi[1]) {
                T acc = gz[a];
                for (std::size_t c = 0; c < dv; ++c) acc += gs[a * dv + c] * vj[c];
                (*gi[1])[(b * n + j) * h + a] += acc;
              }
            }
            if (gi[2]) {
              for (std::size_t c = 0; c < dv; ++c) {
                T acc{0};
                for (std::size_t a = 0; a < h; ++a) acc += gs[a * dv + c] * kj[a];
                (*gi[2])[(b * n + j) * dv + c] += acc;
              }
            }
          }
        }
      });
}

}  // namespace ag

/// Multi-head linear attention over [N, d] or [B, N, d] token sets. No
/// positional information enters, so the map is equivariant to token order.
template <class T>
ag::Var<T> linear_attention(ag::Var<T> q_in, ag::Var<T> k_in, ag::Var<T> v_in,
                            const attn::Weights<T>& w) {
  const Shape qs = q_in.shape();
  if (qs.size() < 2 || qs.size() > 3 || k_in.shape() != qs ||
      v_in.shape().size() != qs.size() ||
      v_in.shape()[qs.size() - 2] != qs[qs.size() - 2]) {
    throw DimensionError("linear_attention: incompatible inputs q " + shape_str(qs) + ", k " +
                         shape_str(k_in.shape()) + ", v " + shape_str(v_in.shape()));
  }
  attn::validate(w, qs.back(), v_in.shape().back());
  const std::size_t batch = qs.size() == 3 ? qs[0] : 1, n = qs[qs.size() - 2];
  const std::size_t dm = w.wq.shape()[1], hd = dm / w.heads;
  auto split = std::make_shared<const std::vector<std::size_t>>(
      attn::split_heads_index(batch, n, w.heads, hd));
  const Shape hs{batch * w.heads, n, hd};
  auto q = ag::elu1(ag::gather(ag::matmul(q_in, w.wq), split, hs));
  auto k = ag::elu1(ag::gather(ag::matmul(k_in, w.wk), split, hs));
  auto v = ag::gather(ag::matmul(v_in, w.wv), split, hs);
  auto o = ag::linear_attention_core(q, k, v);
  Shape os = qs;
  os.back() = dm;
  auto merged = ag::gather(o, attn::merge_heads_index(batch, n, w.heads, hd), os);
  return ag::matmul(merged, w.wo);
}

// Tensor-valued entry points.

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& k_in,
                               const Tensor<T>& v_in, const AttentionParams<T>& p) {
  ag::Tape<T> tape;
  auto w = attn::bind(tape, p);
  return multi_head_attention(tape.constant(q_in), tape.constant(k_in), tape.constant(v_in), w)
      .value();
}

template <class T>
Tensor<T> window_attention(const Tensor<T>& x_qk, const Tensor<T>& x_v, std::size_t m,
                           std::size_t shift, const AttentionParams<T>& p) {
  ag::Tape<T> tape;
  auto w = attn::bind(tape, p);
  return window_attention(tape.constant(x_qk), tape.constant(x_v), m, shift, w).value();
}

template <class T>
Tensor<T> linear_attention(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                           const AttentionParams<T>& p,
                           LinearAttentionMode mode = LinearAttentionMode::streaming) {
  if (mode == LinearAttentionMode::streaming) {
    ag::Tape<T> tape;
    auto w = attn::bind(tape, p);
    return linear_attention(tape.constant(q_in), tape.constant(k_in), tape.constant(v_in), w)
        .value();
  }
  if (q_in.rank() != 2 || k_in.shape() != q_in.shape() || v_in.rank() != 2 ||
      v_in.dim(0) != q_in.dim(0)) {
    throw DimensionError("linear_attention: naive mode expects [N,d] inputs");
  }
  ag::Tape<T> tape;
  attn::validate(attn::bind(tape, p), q_in.dim(1), v_in.dim(1));
  const std::size_t n = q_in.dim(0), dm = p.wq.dim(1), hd = dm / p.heads;
  const auto split = attn::split_heads_index(1, n, p.heads, hd);
  const Shape hs{p.heads, n, hd};
  auto q = ops::feature_map_elu1(ops::gather(ops::matmul(q_in, p.wq), split, hs));
  auto k = ops::feature_map_elu1(ops::gather(ops::matmul(k_in, p.wk), split, hs));
  auto v = ops::gather(ops::matmul(v_in, p.wv), split, hs);
  auto o = linear_attention_naive(q, k, v);
  auto merged = ops::gather(o, attn::merge_heads_index(1, n, p.heads, hd), Shape{n, dm});
  return ops::matmul(merged, p.wo);
}

}  // namespace catseg
