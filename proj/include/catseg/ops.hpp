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

// Numeric primitives over Tensor<T>. Every reduction accumulates in a fixed
// ascending order so results are bitwise reproducible. Backward kernels for
// the autograd tape live next to their forward ops.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "catseg/tensor.hpp"

namespace catseg::ops {

namespace detail {

// Splits a rank>=3 image-like tensor into (batch, channels, height, width).
// Rank 3 is a single image.
struct Nchw {
  std::size_t n, c, h, w;
};

inline Nchw nchw(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw DimensionError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " +
                       shape_str(s));
}

inline Shape with_nchw(const Shape& like, std::size_t c, std::size_t h, std::size_t w) {
  if (like.size() == 3) return {c, h, w};
  return {like[0], c, h, w};
}

/// Output positions o in [lo, hi) whose tap o*stride + k - pad lands inside
/// an input of length `in_len`.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_len, std::size_t in_len,
                                                       std::size_t stride, std::size_t k,
                                                       std::size_t pad) {
  const std::size_t lo = pad > k ? (pad - k + stride - 1) / stride : 0;
  const std::size_t end = in_len + pad > k ? (in_len + pad - k + stride - 1) / stride : 0;
  const std::size_t hi = std::min(out_len, end);
  return {lo, std::max(lo, hi)};
}

}  // namespace detail

// ---------------------------------------------------------------- matmul

/// out[i,j] = sum_p a[i,p] * b[p,j]. Leading axes of `a` are treated as rows,
/// so a [..., k] times b [k, n] gives [..., n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  auto A = a.data();
  auto B = b.data();
  auto C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = C.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      const T* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return out;
}

/// Batched product of [B,m,k] and [B,k,n] with optional transposes of either
/// operand (a transposed operand is stored as [B,k,m] / [B,n,k]).
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
              bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw DimensionError("bmm: incompatible batches " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0);
  const std::size_t m = trans_a ? a.dim(2) : a.dim(1);
  const std::size_t k = trans_a ? a.dim(1) : a.dim(2);
  const std::size_t kb = trans_b ? b.dim(2) : b.dim(1);
  const std::size_t n = trans_b ? b.dim(1) : b.dim(2);
  if (k != kb) {
    throw DimensionError("bmm: inner dimensions differ for " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  Tensor<T> out({batch, m, n});
  auto A = a.data();
  auto B = b.data();
  auto C = out.data();
  for (std::size_t s = 0; s < batch; ++s) {
    const T* as = A.data() + s * m * k;
    const T* bs = B.data() + s * k * n;
    T* cs = C.data() + s * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = cs + i * n;
      if (trans_b && !trans_a) {
        const T* arow = as + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const T* bj = bs + j * k;
          T acc{0};
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * bj[p];
          crow[j] = acc;
        }
        continue;
      }
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? as[p * m + i] : as[i * k + p];
        if (trans_b) {
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * bs[j * k + p];
        } else {
          const T* brow = bs + p * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

/// x[..., n] + bias[n].
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " with bias " +
                         shape_str(bias.shape()));
  }
  Tensor<T> out = x;
  const std::size_t n = bias.dim(0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % n];
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

/// Exact (erf) GELU.
template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = gelu(v);
  return out;
}

/// Linear-attention kernel feature map elu(x) + 1; strictly positive.
template <class T>
Tensor<T> feature_map_elu1(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = v >= T{0} ? v + T{1} : std::exp(v);
  return out;
}

template <class T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

// ---------------------------------------------------------------- softmax

/// Numerically shifted softmax along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  const std::size_t len = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  const std::size_t outer = x.size() / (len * inner);
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = x[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, x[base + i * inner]);
      T sum{0};
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(x[base + i * inner] - mx);
        out[base + i * inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= sum;
    }
  }
  return out;
}

/// Given y = softmax(x, last axis) and dL/dy, returns dL/dx.
template <class T>
Tensor<T> softmax_last_backward(const Tensor<T>& y, const Tensor<T>& g) {
  const std::size_t len = y.shape().back();
  Tensor<T> gx(y.shape());
  for (std::size_t base = 0; base < y.size(); base += len) {
    T dot{0};
    for (std::size_t i = 0; i < len; ++i) dot += g[base + i] * y[base + i];
    for (std::size_t i = 0; i < len; ++i) gx[base + i] = y[base + i] * (g[base + i] - dot);
  }
  return gx;
}

// ---------------------------------------------------------------- normalization

/// Standardizes over the last axis (population variance), then applies
/// gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps) {
  const std::size_t n = x.shape().back();
  if (gamma.size() != n || beta.size() != n) {
    throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) +
                         " do not match last axis of " + shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  for (std::size_t base = 0; base < x.size(); base += n) {
    T mean{0};
    for (std::size_t i = 0; i < n; ++i) mean += x[base + i];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t i = 0; i < n; ++i) {
      const T d = x[base + i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T r = T{1} / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      out[base + i] = gamma[i] * ((x[base + i] - mean) * r) + beta[i];
    }
  }
  return out;
}

template <class T>
struct NormGrads {
  Tensor<T> x, gamma, beta;
};

template <class T>
NormGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, T eps,
                                 const Tensor<T>& g) {
  const std::size_t n = x.shape().back();
  NormGrads<T> r{Tensor<T>(x.shape()), Tensor<T>(gamma.shape()), Tensor<T>(gamma.shape())};
  std::vector<T> xhat(n), dxhat(n);
  for (std::size_t base = 0; base < x.size(); base += n) {
    T mean{0};
    for (std::size_t i = 0; i < n; ++i) mean += x[base + i];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t i = 0; i < n; ++i) {
      const T d = x[base + i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T rs = T{1} / std::sqrt(var + eps);
    T sum_d{0}, sum_dx{0};
    for (std::size_t i = 0; i < n; ++i) {
      xhat[i] = (x[base + i] - mean) * rs;
      dxhat[i] = g[base + i] * gamma[i];
      r.gamma[i] += g[base + i] * xhat[i];
      r.beta[i] += g[base + i];
      sum_d += dxhat[i];
      sum_dx += dxhat[i] * xhat[i];
    }
    const T inv_n = T{1} / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      r.x[base + i] = rs * (dxhat[i] - inv_n * sum_d - xhat[i] * inv_n * sum_dx);
    }
  }
  return r;
}

/// Group normalization of [C,H,W] or [N,C,H,W]. Each group of C/groups
/// channels is standardized jointly over its channels and pixels.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  const auto d = detail::nchw(x.shape(), "group_norm");
  if (groups == 0 || d.c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(d.c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (gamma.size() != d.c || beta.size() != d.c) {
    throw DimensionError("group_norm: affine params must have " + std::to_string(d.c) +
                         " entries");
  }
  const std::size_t cpg = d.c / groups, hw = d.h * d.w, len = cpg * hw;
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < d.n; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = (b * d.c + g * cpg) * hw;
      T mean{0};
      for (std::size_t i = 0; i < len; ++i) mean += x[base + i];
      mean /= static_cast<T>(len);
      T var{0};
      for (std::size_t i = 0; i < len; ++i) {
        const T dv = x[base + i] - mean;
        var += dv * dv;
      }
      var /= static_cast<T>(len);
      const T r = T{1} / std::sqrt(var + eps);
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t c = g * cpg + i / hw;
        out[base + i] = gamma[c] * ((x[base + i] - mean) * r) + beta[c];
      }
    }
  }
  return out;
}

template <class T>
NormGrads<T> group_norm_backward(const Tensor<T>& x, std::size_t groups,
                                 const Tensor<T>& gamma, T eps, const Tensor<T>& g) {
  const auto d = detail::nchw(x.shape(), "group_norm");
  const std::size_t cpg = d.c / groups, hw = d.h * d.w, len = cpg * hw;
  NormGrads<T> r{Tensor<T>(x.shape()), Tensor<T>(gamma.shape()), Tensor<T>(gamma.shape())};
  std::vector<T> xhat(len), dxhat(len);
  for (std::size_t b = 0; b < d.n; ++b) {
    for (std::size_t grp = 0; grp < groups; ++grp) {
      const std::size_t base = (b * d.c + grp * cpg) * hw;
      T mean{0};
      for (std::size_t i = 0; i < len; ++i) mean += x[base + i];
      mean /= static_cast<T>(len);
      T var{0};
      for (std::size_t i = 0; i < len; ++i) {
        const T dv = x[base + i] - mean;
        var += dv * dv;
      }
      var /= static_cast<T>(len);
      const T rs = T{1} / std::sqrt(var + eps);
      T sum_d{0}, sum_dx{0};
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t c = grp * cpg + i / hw;
        xhat[i] = (x[base + i] - mean) * rs;
        dxhat[i] = g[base + i] * gamma[c];
        r.gamma[c] += g[base + i] * xhat[i];
        r.beta[c] += g[base + i];
        sum_d += dxhat[i];
        sum_dx += dxhat[i] * xhat[i];
      }
      const T inv_n = T{1} / static_cast<T>(len);
      for (std::size_t i = 0; i < len; ++i) {
        r.x[base + i] = rs * (dxhat[i] - inv_n * sum_d - xhat[i] * inv_n * sum_dx);
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------- convolution

/// Zero-padded cross-correlation (no kernel flip).
/// x [C_in,H,W] or [N,C_in,H,W], w [C_out,C_in,kh,kw], b [C_out].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride, std::size_t pad) {
  const auto d = detail::nchw(x.shape(), "conv2d");
  if (w.rank() != 4 || w.dim(1) != d.c || b.size() != w.dim(0) || stride == 0) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(w.shape()) + ", bias " + shape_str(b.shape()));
  }
  const std::size_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (kh > d.h + 2 * pad || kw > d.w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t ho = (d.h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (d.w + 2 * pad - kw) / stride + 1;
  Tensor<T> out(detail::with_nchw(x.shape(), co, ho, wo));
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t oc = 0; oc < co; ++oc) {
      T* o = out.data().data() + (n * co + oc) * ho * wo;
      for (std::size_t i = 0; i < ho * wo; ++i) o[i] = b[oc];
      for (std::size_t ic = 0; ic < d.c; ++ic) {
        const T* xin = x.data().data() + (n * d.c + ic) * d.h * d.w;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T wv = w[((oc * d.c + ic) * kh + ky) * kw + kx];
            const auto [ylo, yhi] = detail::valid_range(ho, d.h, stride, ky, pad);
            const auto [xlo, xhi] = detail::valid_range(wo, d.w, stride, kx, pad);
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const T* xs = xin + (oy * stride + ky - pad) * d.w + (xlo * stride + kx - pad);
              T* orow = o + oy * wo;
              for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += wv * xs[(ox - xlo) * stride];
            }
          }
        }
      }
    }
  }
  return out;
}

template <class T>
struct ConvGrads {
  Tensor<T> x, w, b;
};

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                             std::size_t pad, const Tensor<T>& g) {
  const auto d = detail::nchw(x.shape(), "conv2d");
  const std::size_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const auto od = detail::nchw(g.shape(), "conv2d");
  const std::size_t ho = od.h, wo = od.w;
  ConvGrads<T> r{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({co})};
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t oc = 0; oc < co; ++oc) {
      const T* go = g.data().data() + (n * co + oc) * ho * wo;
      for (std::size_t i = 0; i < ho * wo; ++i) r.b[oc] += go[i];
      for (std::size_t ic = 0; ic < d.c; ++ic) {
        const T* xin = x.data().data() + (n * d.c + ic) * d.h * d.w;
        T* gx = r.x.data().data() + (n * d.c + ic) * d.h * d.w;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::size_t widx = ((oc * d.c + ic) * kh + ky) * kw + kx;
            const T wv = w[widx];
            T gw{0};
            const auto [ylo, yhi] = detail::valid_range(ho, d.h, stride, ky, pad);
            const auto [xlo, xhi] = detail::valid_range(wo, d.w, stride, kx, pad);
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const std::size_t base = (oy * stride + ky - pad) * d.w + (xlo * stride + kx - pad);
              const T* xs = xin + base;
              T* gs = gx + base;
              const T* grow = go + oy * wo;
              for (std::size_t ox = xlo; ox < xhi; ++ox) {
                const T gv = grow[ox];
                gw += gv * xs[(ox - xlo) * stride];
                gs[(ox - xlo) * stride] += gv * wv;
              }
            }
            r.w[widx] += gw;
          }
        }
      }
    }
  }
  return r;
}

/// Scatter-accumulate adjoint of an unpadded conv2d.
/// x [C_in,H,W] or [N,C_in,H,W], w [C_in,C_out,kh,kw], b [C_out];
/// output side (H-1)*stride + kh.
template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                            std::size_t stride) {
  const auto d = detail::nchw(x.shape(), "transposed_conv2d");
  if (stride == 0) throw ConfigError("transposed_conv2d: stride must be >= 1");
  if (w.rank() != 4 || w.dim(0) != d.c || b.size() != w.dim(1)) {
    throw DimensionError("transposed_conv2d: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(w.shape()) + ", bias " + shape_str(b.shape()));
  }
  const std::size_t co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::size_t ho = (d.h - 1) * stride + kh, wo = (d.w - 1) * stride + kw;
  Tensor<T> out(detail::with_nchw(x.shape(), co, ho, wo));
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t oc = 0; oc < co; ++oc) {
      T* o = out.data().data() + (n * co + oc) * ho * wo;
      for (std::size_t i = 0; i < ho * wo; ++i) o[i] = b[oc];
      for (std::size_t ic = 0; ic < d.c; ++ic) {
        const T* xin = x.data().data() + (n * d.c + ic) * d.h * d.w;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T wv = w[((ic * co + oc) * kh + ky) * kw + kx];
            for (std::size_t iy = 0; iy < d.h; ++iy) {
              T* orow = o + (iy * stride + ky) * wo + kx;
              const T* xrow = xin + iy * d.w;
              for (std::size_t ix = 0; ix < d.w; ++ix) orow[ix * stride] += wv * xrow[ix];
            }
          }
        }
      }
    }
  }
  return out;
}

template <class T>
ConvGrads<T> transposed_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                                        std::size_t stride, const Tensor<T>& g) {
  const auto d = detail::nchw(x.shape(), "transposed_conv2d");
  const std::size_t co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::size_t ho = (d.h - 1) * stride + kh, wo = (d.w - 1) * stride + kw;
  ConvGrads<T> r{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({co})};
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t oc = 0; oc < co; ++oc) {
      const T* go = g.data().data() + (n * co + oc) * ho * wo;
      for (std::size_t i = 0; i < ho * wo; ++i) r.b[oc] += go[i];
      for (std::size_t ic = 0; ic < d.c; ++ic) {
        const T* xin = x.data().data() + (n * d.c + ic) * d.h * d.w;
        T* gx = r.x.data().data() + (n * d.c + ic) * d.h * d.w;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::size_t widx = ((ic * co + oc) * kh + ky) * kw + kx;
            const T wv = w[widx];
            T gw{0};
            for (std::size_t iy = 0; iy < d.h; ++iy) {
              const T* grow = go + (iy * stride + ky) * wo + kx;
              for (std::size_t ix = 0; ix < d.w; ++ix) {
                const T gv = grow[ix * stride];
                gw += gv * xin[iy * d.w + ix];
                gx[iy * d.w + ix] += gv * wv;
              }
            }
            r.w[widx] += gw;
          }
        }
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------- resize

namespace detail {

struct Tap {
  std::size_t i0, i1;
  double frac;
};

// Half-pixel-center source coordinate, clamped to [0, in-1].
inline std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    taps[o] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resampling of the trailing two axes. Leading axes are channels.
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t h_out, std::size_t w_out) {
  if (x.rank() < 2) throw DimensionError("bilinear_resize: rank < 2 " + shape_str(x.shape()));
  if (h_out == 0 || w_out == 0) throw DimensionError("bilinear_resize: empty output size");
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t planes = x.size() / (h * w);
  const auto ty = detail::bilinear_taps(h, h_out);
  const auto tx = detail::bilinear_taps(w, w_out);
  Shape os = x.shape();
  os[os.size() - 2] = h_out;
  os[os.size() - 1] = w_out;
  Tensor<T> out(os);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data().data() + p * h * w;
    T* dst = out.data().data() + p * h_out * w_out;
    for (std::size_t oy = 0; oy < h_out; ++oy) {
      const auto& a = ty[oy];
      const T fy = static_cast<T>(a.frac);
      for (std::size_t ox = 0; ox < w_out; ++ox) {
        const auto& c = tx[ox];
        const T fx = static_cast<T>(c.frac);
        const T v00 = src[a.i0 * w + c.i0], v01 = src[a.i0 * w + c.i1];
        const T v10 = src[a.i1 * w + c.i0], v11 = src[a.i1 * w + c.i1];
        // lerp form keeps constant fields exactly constant
        const T top = v00 + fx * (v01 - v00);
        const T bot = v10 + fx * (v11 - v10);
        dst[oy * w_out + ox] = top + fy * (bot - top);
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> bilinear_resize_backward(const Shape& in_shape, const Tensor<T>& g) {
  const std::size_t h = in_shape[in_shape.size() - 2], w = in_shape.back();
  const std::size_t h_out = g.dim(g.rank() - 2), w_out = g.dim(g.rank() - 1);
  const std::size_t planes = numel(in_shape) / (h * w);
  const auto ty = detail::bilinear_taps(h, h_out);
  const auto tx = detail::bilinear_taps(w, w_out);
  Tensor<T> gx(in_shape);
  for (std::size_t p = 0; p < planes; ++p) {
    T* dst = gx.data().data() + p * h * w;
    const T* src = g.data().data() + p * h_out * w_out;
    for (std::size_t oy = 0; oy < h_out; ++oy) {
      const auto& a = ty[oy];
      const T fy = static_cast<T>(a.frac);
      for (std::size_t ox = 0; ox < w_out; ++ox) {
        const auto& c = tx[ox];
        const T fx = static_cast<T>(c.frac);
        const T gv = src[oy * w_out + ox];
        dst[a.i0 * w + c.i0] += gv * (T{1} - fy) * (T{1} - fx);
        dst[a.i0 * w + c.i1] += gv * (T{1} - fy) * fx;
        dst[a.i1 * w + c.i0] += gv * fy * (T{1} - fx);
        dst[a.i1 * w + c.i1] += gv * fy * fx;
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------- layout

/// Concatenation along `axis`; all other axes must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = xs.front().shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
  Shape os = s0;
  os[axis] = 0;
  for (const auto& x : xs) {
    Shape a = x.shape(), b = s0;
    if (a.size() != b.size()) {
      throw DimensionError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    a[axis] = b[axis] = 0;
    if (a != b) {
      throw DimensionError("concat: incompatible shapes " + shape_str(x.shape()) + " and " +
                           shape_str(s0));
    }
    os[axis] += x.dim(axis);
  }
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s0[a];
  const std::size_t inner = numel(s0) / (outer * s0[axis]);
  Tensor<T> out(os);
  std::size_t pos = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (const auto& x : xs) {
      const std::size_t chunk = x.dim(axis) * inner;
      std::copy_n(x.data().data() + o * chunk, chunk, out.data().data() + pos);
      pos += chunk;
    }
  }
  return out;
}

template <class T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_last: no inputs");
  return concat(xs, xs.front().rank() - 1);
}

/// out.flat[i] = x.flat[index[i]].
template <class T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::size_t>& index, Shape out_shape) {
  if (numel(out_shape) != index.size()) {
    throw DimensionError("gather: index count " + std::to_string(index.size()) +
                         " does not fill " + shape_str(out_shape));
  }
  Tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.size()) throw DimensionError("gather: index out of range");
    out[i] = x[index[i]];
  }
  return out;
}

/// Adjoint of gather: accumulates g into a tensor of `in_shape`.
template <class T>
Tensor<T> scatter_add(const Shape& in_shape, const std::vector<std::size_t>& index,
                      const Tensor<T>& g) {
  Tensor<T> gx(in_shape);
  for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += g[i];
  return gx;
}

/// Source offsets that realize an axis permutation: out axis a is input axis
/// perm[a].
inline std::vector<std::size_t> permute_index(const Shape& shape,
                                              const std::vector<std::size_t>& perm,
                                              Shape* out_shape = nullptr) {
  const std::size_t r = shape.size();
  if (perm.size() != r) throw DimensionError("permute: rank mismatch for " + shape_str(shape));
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t a = r; a-- > 1;) in_stride[a - 1] = in_stride[a] * shape[a];
  Shape os(r);
  std::vector<std::size_t> st(r);
  for (std::size_t a = 0; a < r; ++a) {
    os[a] = shape.at(perm[a]);
    st[a] = in_stride[perm[a]];
  }
  std::vector<std::size_t> idx(numel(shape));
  std::vector<std::size_t> ctr(r, 0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::size_t off = 0;
    for (std::size_t a = 0; a < r; ++a) off += ctr[a] * st[a];
    idx[i] = off;
    for (std::size_t a = r; a-- > 0;) {
      if (++ctr[a] < os[a]) break;
      ctr[a] = 0;
    }
  }
  if (out_shape) *out_shape = os;
  return idx;
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  Shape os;
  auto idx = permute_index(x.shape(), perm, &os);
  return gather(x, idx, os);
}

}  // namespace catseg::ops
