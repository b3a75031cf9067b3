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

using test::random;

EmbeddingSet<double> embeddings(Tensor<double> image, Tensor<double> text) {
  std::vector<std::string> names;
  for (std::size_t n = 0; n < text.dim(0); ++n) names.push_back("c" + std::to_string(n));
  return {std::move(image), std::move(text), names, {}};
}

TEST(CostVolume, HandCosines) {
  const auto cv = build_cost_volume(embeddings(Tensor<double>({1, 3, 2}, {1, 0, 1, 0, 3, 4}),
                                               Tensor<double>({3, 2}, {1, 0, 0, 1, 4, 3})));
  EXPECT_EQ(cv.cost.shape(), (Shape{1, 3, 3}));
  EXPECT_DOUBLE_EQ(cv.cost.at({0, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(cv.cost.at({0, 1, 1}), 0.0);
  EXPECT_NEAR(cv.cost.at({0, 2, 2}), 0.96, 1e-15);
  EXPECT_EQ(cv.selected, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(CostVolume, ZeroNormNamesRow) {
  try {
    build_cost_volume(embeddings(Tensor<double>({2, 2, 2}, {1, 0, 1, 1, 0, 0, 2, 2}),
                                 Tensor<double>({1, 2}, {1, 0})));
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("(1,0)"), std::string::npos) << e.what();
  }
}

TEST(CostVolume, BoundedAndScaleInvariant) {
  Rng rng(1);
  auto dv = random<float>(rng, {4, 4, 8}), dl = random<float>(rng, {5, 8});
  const auto c = build_cost_volume(embeddings(dv.cast<double>(), dl.cast<double>())).cost;
  for (double v : c.values()) EXPECT_LE(std::abs(v), 1 + 1e-5);
  for (std::size_t i = 0; i < 16; ++i) {
    const float s = static_cast<float>(rng.uniform(0.01, 100));
    for (std::size_t k = 0; k < 8; ++k) dv[i * 8 + k] *= s;
  }
  for (auto& v : dl.data()) v *= 37.0f;
  EmbeddingSet<float> scaled{dv, dl, {"a", "b", "c", "d", "e"}, {}};
  EXPECT_LT(max_abs_diff(build_cost_volume(scaled).cost.cast<double>(), c), 1e-6);
}

TEST(CostVolume, ClassPermutationIsExact) {
  Rng rng(2);
  const auto dv = random(rng, {3, 3, 6}), dl = random(rng, {4, 6});
  const auto perm = rng.permutation(4);
  const auto c = build_cost_volume(embeddings(dv, dl)).cost;
  const auto cp = build_cost_volume(embeddings(dv, test::take_rows(dl, perm))).cost;
  EXPECT_EQ(cp, test::take_axis(c, 2, perm));
}

CostVolume<double> with_maxima(std::vector<double> maxima) {
  const std::size_t n = maxima.size();
  Tensor<double> c({2, 1, n}, -0.5);
  for (std::size_t k = 0; k < n; ++k) c[n + k] = maxima[k];
  CostVolume<double> cv{c, {}};
  for (std::size_t k = 0; k < n; ++k) cv.selected.push_back(k);
  return cv;
}

TEST(TopK, KeepsHighestMaxima) {
  const auto cv = select_topk_classes(with_maxima({0.9, 0.1, 0.5}), 2);
  EXPECT_EQ(cv.selected, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(cv.cost.shape(), (Shape{2, 1, 2}));
  EXPECT_EQ(cv.cost[2], 0.9);
  EXPECT_EQ(cv.cost[3], 0.5);
}

TEST(TopK, TiesGoToLowerIndex) {
  EXPECT_EQ(select_topk_classes(with_maxima({0.3, 0.7, 0.3, 0.3}), 2).selected,
            (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(topk_indices(with_maxima({0.2, 0.2, 0.2}).cost, 1), (std::vector<std::size_t>{0}));
}

TEST(TopK, LargeKIsIdentityAndIdempotent) {
  const auto cv = with_maxima({0.1, 0.4, 0.3, 0.8, -0.2});
  const auto all = select_topk_classes(cv, 256);
  EXPECT_EQ(all.cost, cv.cost);
  EXPECT_EQ(all.selected, cv.selected);
  const auto once = select_topk_classes(cv, 3);
  const auto twice = select_topk_classes(once, 3);
  EXPECT_EQ(twice.cost, once.cost);
  EXPECT_EQ(twice.selected, once.selected);
  EXPECT_EQ(once.selected, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(EmbedCost, ZeroVolumeGivesBias) {
  Rng rng(3);
  const ConvParams<double> p{random(rng, {4, 1, 7, 7}), random(rng, {4})};
  const auto f = embed_cost(CostVolume<double>{Tensor<double>({3, 3, 2}), {0, 1}}, p);
  ASSERT_EQ(f.shape(), (Shape{3, 3, 2, 4}));
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(f[i], p.bias[i % 4]);
}

TEST(EmbedCost, SinglePixelUsesKernelCentre) {
  Rng rng(4);
  const ConvParams<double> p{random(rng, {3, 1, 7, 7}), random(rng, {3})};
  const auto f = embed_cost(CostVolume<double>{Tensor<double>({1, 1, 1}, {0.7}), {0}}, p);
  for (std::size_t o = 0; o < 3; ++o) EXPECT_DOUBLE_EQ(f[o], p.weight.at({o, 0, 3, 3}) * 0.7 + p.bias[o]);
}

TEST(EmbedCost, MatchesSlidingWindow) {
  Rng rng(5);
  const std::size_t h = 5, w = 6, n = 2, df = 3;
  const ConvParams<double> p{random(rng, {df, 1, 7, 7}), random(rng, {df})};
  const auto c = random(rng, {h, w, n});
  const auto f = embed_cost(CostVolume<double>{c, {0, 1}}, p);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t o = 0; o < df; ++o) {
          double s = p.bias[o];
          for (std::size_t u = 0; u < 7; ++u)
            for (std::size_t v = 0; v < 7; ++v) {
              const long yy = static_cast<long>(y + u) - 3, xx = static_cast<long>(x + v) - 3;
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
              s += p.weight.at({o, 0, u, v}) * c.at({static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), k});
            }
          EXPECT_NEAR(f.at({y, x, k, o}), s, 1e-12);
        }
}

TEST(EmbedCost, ClassPermutationIsExact) {
  Rng rng(6);
  const ConvParams<double> p{random(rng, {4, 1, 7, 7}), random(rng, {4})};
  const auto c = random(rng, {4, 4, 3});
  const auto perm = rng.permutation(3);
  const auto f = embed_cost(CostVolume<double>{c, {0, 1, 2}}, p);
  const auto fp = embed_cost(CostVolume<double>{test::take_axis(c, 2, perm), {0, 1, 2}}, p);
  EXPECT_EQ(fp, test::take_axis(f, 2, perm));
}

TEST(FeatureVolume, HandConcat) {
  Tensor<double> eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1;
  const LinearParams<double> p{eye, Tensor<double>({4}, {0.5, 0, 0, -1})};
  const auto f = build_feature_volume(
      embeddings(Tensor<double>({1, 1, 2}, {1, 2}), Tensor<double>({2, 2}, {3, 4, 5, 6})), p);
  EXPECT_EQ(f, Tensor<double>({1, 1, 2, 4}, {1.5, 2, 3, 3, 1.5, 2, 5, 5}));
}

TEST(FeatureVolume, ZeroWeightsGiveBias) {
  Rng rng(7);
  const LinearParams<double> p{Tensor<double>({8, 5}), random(rng, {5})};
  const auto f = build_feature_volume(embeddings(random(rng, {2, 2, 4}), random(rng, {3, 4})), p);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(f[i], p.bias[i % 5]);
}

TEST(FeatureVolume, NotScaleInvariant) {
  Rng rng(8);
  const LinearParams<double> p{random(rng, {8, 5}), Tensor<double>({5})};
  const auto dv = random(rng, {2, 2, 4}), dl = random(rng, {3, 4});
  Tensor<double> dv2 = dv;
  for (auto& v : dv2.data()) v *= 2;
  const LinearParams<double> img_only{[&] {
                                        Tensor<double> w = p.weight;
                                        for (std::size_t i = 20; i < 40; ++i) w[i] = 0;
                                        return w;
                                      }(),
                                      Tensor<double>({5})};
  const auto f1 = build_feature_volume(embeddings(dv, dl), p);
  const auto f2 = build_feature_volume(embeddings(dv2, dl), p);
  const auto vi = build_feature_volume(embeddings(dv, dl), img_only);
  EXPECT_GT(max_abs_diff(f1, f2), 1e-3);
  for (std::size_t i = 0; i < f1.size(); ++i) EXPECT_NEAR(f2[i], f1[i] + vi[i], 1e-12);
}

}  // namespace
}  // namespace catseg
