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

AggregatorConfig config(std::size_t n_b = 2, std::size_t window = 4) {
  return {8, 16, 8, 2, window, n_b, 4, 1};
}

template <class T>
EmbeddingSet<T> embeddings(Rng& rng, std::size_t h, std::size_t w, std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < n; ++k) names.push_back("c" + std::to_string(k));
  return {random<T>(rng, {h, w, 8}), random<T>(rng, {n, 8}), names, {}};
}

TEST(Aggregation, ZeroWeightsAreIdentity) {
  Rng rng(1);
  auto p = AggregatorParams<double>::create(config(), 3);
  test::zero_block_weights(p.store);
  const auto emb = embeddings<double>(rng, 8, 8, 3);
  const auto f = random(rng, {8, 8, 3, 16});
  EXPECT_EQ(spatial_aggregate(f, emb.image, p), f);
  EXPECT_EQ(class_aggregate(f, emb.text, p), f);
  EXPECT_EQ(aggregate_stack(f, emb, p), f);
}

TEST(Aggregation, SpatialNeverMixesClasses) {
  Rng rng(2);
  const auto p = AggregatorParams<float>::create(config(), 4);
  const auto dv = random<float>(rng, {8, 8, 8});
  const auto f = random<float>(rng, {8, 8, 3, 16});
  const auto base = spatial_aggregate(f, dv, p);
  Tensor<float> g = f;
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t k = 0; k < 16; ++k) g[(i * 3 + 1) * 16 + k] += 0.5f;
  const auto out = spatial_aggregate(g, dv, p);
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t n : {0u, 2u})
      for (std::size_t k = 0; k < 16; ++k) {
        EXPECT_EQ(out[(i * 3 + n) * 16 + k], base[(i * 3 + n) * 16 + k]);
      }
}

TEST(Aggregation, ClassNeverMixesPositions) {
  Rng rng(3);
  const auto p = AggregatorParams<float>::create(config(), 5);
  const auto dl = random<float>(rng, {3, 8});
  const auto f = random<float>(rng, {4, 4, 3, 16});
  const auto base = class_aggregate(f, dl, p);
  Tensor<float> g = f;
  for (std::size_t k = 0; k < 3 * 16; ++k) g[5 * 48 + k] -= 1.0f;
  const auto out = class_aggregate(g, dl, p);
  for (std::size_t i = 0; i < 16; ++i) {
    if (i == 5) continue;
    for (std::size_t k = 0; k < 48; ++k) EXPECT_EQ(out[i * 48 + k], base[i * 48 + k]);
  }
}

TEST(Aggregation, WholeGridWindowIsGlobalAttention) {
  Rng rng(4);
  const auto c = config(1, 4);
  const auto p = AggregatorParams<double>::create(c, 6);
  const auto dv = random(rng, {4, 4, 8});
  const auto f = random(rng, {4, 4, 2, 16});
  const auto out = spatial_aggregate(f, dv, p);

  ag::Tape<double> tape;
  Binder<double> bind(tape, p.store, [](const std::string&) { return false; });
  const auto g = ops::add_bias(ops::matmul(dv, p.store.get("agg.guide.image.weight")),
                               p.store.get("agg.guide.image.bias"))
                     .reshaped({16, 8});
  for (std::size_t n = 0; n < 2; ++n) {
    Tensor<double> tokens({16, 16});
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t k = 0; k < 16; ++k) tokens[i * 16 + k] = f[(i * 2 + n) * 16 + k];
    auto x = tape.constant(tokens);
    const auto gv = tape.constant(g);
    x = block_forward(bind, "agg.block0.spatial0", x, gv, MixerSpec{}, 2);
    x = block_forward(bind, "agg.block0.spatial1", x, gv, MixerSpec{}, 2);
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t k = 0; k < 16; ++k) {
        EXPECT_NEAR(out[(i * 2 + n) * 16 + k], x.value()[i * 16 + k], 1e-6);
      }
  }
}

TEST(Aggregation, SingleClassAttentionPassesValue) {
  Rng rng(5);
  const auto p = AggregatorParams<double>::create(config(1), 7);
  const auto dl = random(rng, {1, 8});
  const auto f = random(rng, {2, 2, 1, 16});
  const auto out = class_aggregate(f, dl, p);
  const std::string pre = "agg.block0.class0";
  const auto& s = p.store;
  const auto x = f.reshaped({4, 16});
  const auto h = ops::layer_norm(x, s.get(pre + ".ln1.gamma"), s.get(pre + ".ln1.beta"), 1e-5);
  const auto x1 = ops::add(x, ops::matmul(ops::matmul(h, s.get(pre + ".attn.v")), s.get(pre + ".attn.o")));
  auto y = ops::layer_norm(x1, s.get(pre + ".ln2.gamma"), s.get(pre + ".ln2.beta"), 1e-5);
  y = ops::gelu(ops::add_bias(ops::matmul(y, s.get(pre + ".ffn.fc1.weight")), s.get(pre + ".ffn.fc1.bias")));
  y = ops::add_bias(ops::matmul(y, s.get(pre + ".ffn.fc2.weight")), s.get(pre + ".ffn.fc2.bias"));
  EXPECT_LT(max_abs_diff(out.reshaped({4, 16}), ops::add(x1, y)), 1e-12);
}

TEST(Aggregation, ClassAggregationIsPermutationEquivariant) {
  Rng rng(6);
  const auto p = AggregatorParams<double>::create(config(), 8);
  const auto dl = random(rng, {5, 8});
  const auto f = random(rng, {2, 2, 5, 16});
  const auto out = class_aggregate(f, dl, p);
  for (int t = 0; t < 10; ++t) {
    const auto perm = rng.permutation(5);
    const auto outp = class_aggregate(test::take_axis(f, 2, perm), test::take_rows(dl, perm), p);
    EXPECT_LE(max_abs_diff(outp, test::take_axis(out, 2, perm)), 1e-6);
  }
}

TEST(Aggregation, StackIsPermutationEquivariant) {
  Rng rng(7);
  const auto p = AggregatorParams<float>::create(config(), 9);
  auto emb = embeddings<float>(rng, 8, 8, 5);
  const auto f = random<float>(rng, {8, 8, 5, 16});
  const auto out = aggregate_stack(f, emb, p);
  for (int t = 0; t < 10; ++t) {
    const auto perm = rng.permutation(5);
    EmbeddingSet<float> pe = emb;
    pe.text = test::take_rows(emb.text, perm);
    const auto outp = aggregate_stack(test::take_axis(f, 2, perm), pe, p);
    EXPECT_LE(max_abs_diff(outp, test::take_axis(out, 2, perm)), 1e-5);
  }
}

TEST(Aggregation, NoBlocksIsIdentity) {
  Rng rng(8);
  const auto p = AggregatorParams<float>::create(config(0), 10);
  const auto f = random<float>(rng, {4, 4, 2, 16});
  EXPECT_EQ(aggregate_stack(f, embeddings<float>(rng, 4, 4, 2), p), f);
}

TEST(Aggregation, OneBlockIsSpatialThenClass) {
  Rng rng(9);
  const auto p = AggregatorParams<double>::create(config(1), 11);
  const auto emb = embeddings<double>(rng, 8, 8, 3);
  const auto f = random(rng, {8, 8, 3, 16});
  EXPECT_EQ(aggregate_stack(f, emb, p),
            class_aggregate(spatial_aggregate(f, emb.image, p), emb.text, p));
}

TEST(Aggregation, TwoBlockRegression) {
  Rng rng(10);
  const auto p = AggregatorParams<double>::create(config(2), 42);
  const auto emb = embeddings<double>(rng, 8, 8, 3);
  const auto f = random(rng, {8, 8, 3, 16});
  const auto out = aggregate_stack(f, emb, p);
  EXPECT_TRUE(out.all_finite());
  EXPECT_EQ(tensor_hash(out), 0x4bb3e23df2550cdeULL);
}

TEST(Aggregation, GuidanceOnlyEntersQueriesAndKeys) {
  const auto p = AggregatorParams<float>::create(config(), 1);
  EXPECT_EQ(p.store.get("agg.block0.spatial0.attn.q").shape(), (Shape{24, 16}));
  EXPECT_EQ(p.store.get("agg.block0.spatial0.attn.k").shape(), (Shape{24, 16}));
  EXPECT_EQ(p.store.get("agg.block0.spatial0.attn.v").shape(), (Shape{16, 16}));
  EXPECT_EQ(p.store.get("agg.block1.class0.attn.q").shape(), (Shape{24, 16}));
  EXPECT_EQ(p.store.get("agg.block1.class0.attn.v").shape(), (Shape{16, 16}));
}

TEST(Aggregation, WindowMustDivideGrid) {
  Rng rng(11);
  const auto p = AggregatorParams<float>::create(config(1, 4), 1);
  EXPECT_THROW(spatial_aggregate(random<float>(rng, {6, 6, 2, 16}), random<float>(rng, {6, 6, 8}), p),
               ConfigError);
}

TEST(Aggregation, ShiftDisabledForSingleWindow) {
  EXPECT_EQ(spatial_shift(8, 24, 24), 4u);
  EXPECT_EQ(spatial_shift(4, 4, 4), 0u);
}

}  // namespace
}  // namespace catseg
