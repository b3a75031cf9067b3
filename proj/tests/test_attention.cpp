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


#include <gtest/gtest.h>

#include "support.hpp"

namespace catseg {
namespace {

using test::identity_attention;
using test::naive_attention;
using test::random;
using test::random_attention;

double rel_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double scale = 0;
  for (double v : b.values()) scale = std::max(scale, std::abs(v));
  return max_abs_diff(a, b) / std::max(scale, 1e-300);
}

TEST(MultiHeadAttention, SingleTokenReturnsValue) {
  Rng rng(1);
  const auto q = random(rng, {1, 4}), v = random(rng, {1, 4});
  const auto out = multi_head_attention(q, q, v, identity_attention(4));
  EXPECT_LT(max_abs_diff(out, v), 1e-15);
}

TEST(MultiHeadAttention, IdenticalKeysAverageValues) {
  Rng rng(2);
  auto q = random(rng, {1, 4});
  Tensor<double> x({2, 4});
  for (std::size_t k = 0; k < 4; ++k) x[k] = x[4 + k] = q[k];
  const auto v = random(rng, {2, 4});
  const auto out = multi_head_attention(x, x, v, identity_attention(4));
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(out[k], 0.5 * (v[k] + v[4 + k]), 1e-15);
    EXPECT_NEAR(out[4 + k], 0.5 * (v[k] + v[4 + k]), 1e-15);
  }
}

TEST(MultiHeadAttention, MatchesPerHeadLoop) {
  Rng rng(3);
  for (std::size_t heads : {1u, 2u, 4u}) {
    const auto x = random(rng, {5, 8}), xv = random(rng, {5, 6});
    const auto p = random_attention(rng, 8, 6, 8, heads);
    const auto out = multi_head_attention(x, x, xv, p);
    const auto ref = naive_attention(x, xv, p, [](std::size_t, std::size_t) { return true; });
    EXPECT_LT(max_abs_diff(out, ref), 1e-6);
  }
}

TEST(MultiHeadAttention, WidthMismatchRejected) {
  Rng rng(4);
  const auto p = random_attention(rng, 8, 8, 8, 2);
  EXPECT_THROW(multi_head_attention(random(rng, {3, 7}), random(rng, {3, 7}), random(rng, {3, 8}), p),
               DimensionError);
}

TEST(LinearAttention, SingleTokenReturnsValue) {
  Rng rng(5);
  const auto q = random(rng, {1, 4}), v = random(rng, {1, 4});
  for (auto mode : {LinearAttentionMode::naive, LinearAttentionMode::streaming}) {
    EXPECT_LT(max_abs_diff(linear_attention(q, q, v, identity_attention(4), mode), v), 1e-15);
  }
}

TEST(LinearAttention, IdenticalKeysAverageValues) {
  Rng rng(6);
  const auto q = random(rng, {2, 4}), v = random(rng, {2, 4});
  Tensor<double> k({2, 4});
  for (std::size_t c = 0; c < 4; ++c) k[c] = k[4 + c] = q[c];
  auto p = identity_attention(4);
  for (auto mode : {LinearAttentionMode::naive, LinearAttentionMode::streaming}) {
    const auto out = linear_attention(q, k, v, p, mode);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out[i * 4 + c], 0.5 * (v[c] + v[4 + c]), 1e-14);
  }
}

TEST(LinearAttention, StreamingMatchesKernelMatrix) {
  Rng rng(7);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 1 + rng.below(64), d = 1 + rng.below(16), heads = 1 + rng.below(2);
    const std::size_t dm = heads * (1 + rng.below(8));
    const auto q = random(rng, {n, d}), k = random(rng, {n, d}), v = random(rng, {n, d});
    const auto p = random_attention(rng, d, d, dm, heads);
    EXPECT_LT(rel_diff(linear_attention(q, k, v, p, LinearAttentionMode::streaming),
                       linear_attention(q, k, v, p, LinearAttentionMode::naive)),
              1e-5);
  }
}

TEST(LinearAttention, StreamingMatchesExplicitFormula) {
  Rng rng(8);
  const std::size_t n = 6, h = 3, dv = 2;
  const auto pq = random(rng, {1, n, h}, 0.1, 2), pk = random(rng, {1, n, h}, 0.1, 2);
  const auto v = random(rng, {1, n, dv});
  const auto out = linear_attention_streaming(pq, pk, v);
  for (std::size_t i = 0; i < n; ++i) {
    double den = 0;
    std::vector<double> num(dv, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      double a = 0;
      for (std::size_t c = 0; c < h; ++c) a += pq[i * h + c] * pk[j * h + c];
      den += a;
      for (std::size_t c = 0; c < dv; ++c) num[c] += a * v[j * dv + c];
    }
    for (std::size_t c = 0; c < dv; ++c) EXPECT_NEAR(out[i * dv + c], num[c] / den, 1e-12);
  }
}

TEST(LinearAttention, PermutationEquivariant) {
  Rng rng(9);
  const std::size_t n = 7, d = 6;
  const auto p32 = random_attention(rng, d, d, 8, 2);
  const AttentionParams<float> p{p32.wq.cast<float>(), p32.wk.cast<float>(), p32.wv.cast<float>(),
                                 p32.wo.cast<float>(), 2};
  const auto q = random<float>(rng, {n, d}), v = random<float>(rng, {n, d});
  const auto out = linear_attention(q, q, v, p);
  for (int t = 0; t < 10; ++t) {
    const auto perm = rng.permutation(n);
    const auto qp = test::take_rows(q, perm);
    const auto outp = linear_attention(qp, qp, test::take_rows(v, perm), p);
    EXPECT_LE(max_abs_diff(outp, test::take_rows(out, perm)), 1e-6);
  }
}

TEST(WindowAttention, SingleWindowIsGlobalAttention) {
  Rng rng(10);
  const auto x = random(rng, {4, 4, 6}), xv = random(rng, {4, 4, 5});
  const auto p = random_attention(rng, 6, 5, 8, 2);
  const auto w = window_attention(x, xv, 4, 0, p);
  const auto g = multi_head_attention(x.reshaped({16, 6}), x.reshaped({16, 6}), xv.reshaped({16, 5}), p);
  EXPECT_LT(max_abs_diff(w.reshaped({16, 8}), g), 1e-12);
}

TEST(WindowAttention, UnshiftedMatchesBlockOracle) {
  Rng rng(11);
  const std::size_t h = 4, w = 6, m = 2;
  const auto x = random(rng, {h, w, 4}), xv = random(rng, {h, w, 4});
  const auto p = random_attention(rng, 4, 4, 4, 2);
  const auto out = window_attention(x, xv, m, 0, p);
  const auto ref = naive_attention(x.reshaped({h * w, 4}), xv.reshaped({h * w, 4}), p,
                                   [&](std::size_t i, std::size_t j) {
                                     return (i / w) / m == (j / w) / m && (i % w) / m == (j % w) / m;
                                   });
  EXPECT_LT(max_abs_diff(out.reshaped({h * w, 4}), ref), 1e-12);
}

TEST(WindowAttention, ShiftedMatchesNeighbourhoodOracle) {
  Rng rng(12);
  const std::size_t h = 4, w = 4, m = 2, s = 1;
  const auto x = random(rng, {h, w, 4}), xv = random(rng, {h, w, 3});
  const auto p = random_attention(rng, 4, 3, 4, 2);
  const auto out = window_attention(x, xv, m, s, p);
  auto shifted = [&](std::size_t c, std::size_t len) { return (c + len - s) % len; };
  const auto ref = naive_attention(
      x.reshaped({h * w, 4}), xv.reshaped({h * w, 3}), p, [&](std::size_t i, std::size_t j) {
        const long yi = static_cast<long>(i / w), xi = static_cast<long>(i % w);
        const long yj = static_cast<long>(j / w), xj = static_cast<long>(j % w);
        const long syi = static_cast<long>(shifted(i / w, h)), sxi = static_cast<long>(shifted(i % w, w));
        const long syj = static_cast<long>(shifted(j / w, h)), sxj = static_cast<long>(shifted(j % w, w));
        const bool same_window = syi / static_cast<long>(m) == syj / static_cast<long>(m) &&
                                 sxi / static_cast<long>(m) == sxj / static_cast<long>(m);
        return same_window && syi - syj == yi - yj && sxi - sxj == xi - xj;
      });
  EXPECT_LT(max_abs_diff(out.reshaped({h * w, 4}), ref), 1e-12);
}

TEST(WindowAttention, UnshiftedIsLocal) {
  Rng rng(13);
  const std::size_t h = 8, w = 8, m = 4;
  const auto x = random<float>(rng, {h, w, 4});
  const auto p32 = random_attention(rng, 4, 4, 4, 2);
  const AttentionParams<float> p{p32.wq.cast<float>(), p32.wk.cast<float>(), p32.wv.cast<float>(),
                                 p32.wo.cast<float>(), 2};
  const auto base = window_attention(x, x, m, 0, p);
  Tensor<float> y = x;
  for (std::size_t k = 0; k < 4; ++k) y[(7 * w + 7) * 4 + k] += 3.0f;
  const auto out = window_attention(y, y, m, 0, p);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      if (r >= 4 && c >= 4) continue;
      for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_EQ(out[(r * w + c) * 4 + k], base[(r * w + c) * 4 + k]);
      }
    }
}

TEST(WindowAttention, MaskUsesLargeNegativeLogit) {
  const auto mask = shifted_window_mask<double>(4, 4, 2, 1);
  EXPECT_EQ(mask.shape(), (Shape{4, 4, 4}));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(mask[i], 0.0);
  EXPECT_EQ(mask[3 * 16 + 1], kMaskedLogit);
}

TEST(WindowAttention, InvalidGeometryRejected) {
  Rng rng(14);
  const auto p = random_attention(rng, 4, 4, 4, 1);
  const auto x = random(rng, {6, 6, 4});
  EXPECT_THROW(window_attention(x, x, 4, 0, p), ConfigError);
  EXPECT_THROW(window_attention(x, x, 2, 2, p), ConfigError);
}

TEST(Attention, EveryKernelReducesToValueForOneToken) {
  Rng rng(15);
  const auto p = random_attention(rng, 4, 4, 4, 2);
  const auto x = random(rng, {1, 4}), v = random(rng, {1, 4});
  const auto mha = multi_head_attention(x, x, v, p);
  EXPECT_LT(max_abs_diff(linear_attention(x, x, v, p), mha), 1e-14);
  EXPECT_LT(max_abs_diff(window_attention(x.reshaped({1, 1, 4}), v.reshaped({1, 1, 4}), 1, 0, p)
                             .reshaped({1, 4}),
                         mha),
            1e-14);
}

}  // namespace
}  // namespace catseg
