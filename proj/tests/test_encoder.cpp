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

ToyEncoderParams<float> params(std::size_t dim = 8) {
  return ToyEncoderParams<float>::create({dim, 4, 2, 4096, 4}, 42);
}

TEST(ToyImageEncoder, GridShape) {
  Rng rng(1);
  const auto [dense, guidance] = toy_encode_image(random<float>(rng, {3, 32, 32}, 0, 1), params());
  EXPECT_EQ(dense.shape(), (Shape{8, 8, 8}));
  ASSERT_EQ(guidance.size(), 2u);
  for (const auto& g : guidance) EXPECT_EQ(g.shape(), (Shape{8, 8, 8}));
  EXPECT_NE(guidance[0], guidance[1]);
}

TEST(ToyImageEncoder, Deterministic) {
  Rng rng(2);
  const auto img = random<float>(rng, {3, 16, 24}, 0, 1);
  const auto a = toy_encode_image(img, params()), b = toy_encode_image(img, params());
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(ToyImageEncoder, ZeroImageRegression) {
  const auto [dense, guidance] = toy_encode_image(Tensor<float>({3, 32, 32}), params());
  EXPECT_EQ(dense.at({0, 0, 0}), 0.0f);
  EXPECT_EQ(dense, Tensor<float>({8, 8, 8}));
}

TEST(ToyImageEncoder, GuidanceIsDeeperBlockFirst) {
  Rng rng(3);
  const auto p = params();
  const auto img = random<float>(rng, {3, 16, 16}, 0, 1);
  ag::Tape<float> tape;
  Binder<float> bind(tape, p.store, [](const std::string&) { return false; });
  auto x = ag::conv2d(tape.constant(img), bind("encoder.image.patch_embed.weight"),
                      bind("encoder.image.patch_embed.bias"), 4, 0);
  x = ag::reshape(ag::permute(x, {1, 2, 0}), {16, 8});
  const auto b0 = block_forward(bind, "encoder.image.block0", x, std::nullopt, MixerSpec{}, 2);
  const auto b1 = block_forward(bind, "encoder.image.block1", b0, std::nullopt, MixerSpec{}, 2);
  const auto enc = toy_encode_image(img, p);
  EXPECT_EQ(enc.second[0], b1.value().reshaped({4, 4, 8}));
  EXPECT_EQ(enc.second[1], b0.value().reshaped({4, 4, 8}));
}

TEST(ToyImageEncoder, IndivisibleImageRejected) {
  EXPECT_THROW(toy_encode_image(Tensor<float>({3, 30, 32}), params()), ConfigError);
}

TEST(ToyTextEncoder, PromptAndHashing) {
  EXPECT_EQ(prompt_tokens("traffic light"),
            (std::vector<std::string>{"A", "photo", "of", "a", "traffic", "light"}));
  EXPECT_EQ(token_id("cat", 4096), fnv1a64("cat") % 4096);
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(ToyTextEncoder, DuplicatesAreIdentical) {
  const auto t = toy_encode_text({"cat", "dog", "cat"}, params());
  ASSERT_EQ(t.shape(), (Shape{3, 8}));
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(t[k], t[16 + k]);
}

TEST(ToyTextEncoder, PermutedListPermutesRows) {
  const std::vector<std::string> names{"sky", "road", "tree", "car"};
  const auto t = toy_encode_text(names, params());
  Rng rng(4);
  const auto perm = rng.permutation(names.size());
  std::vector<std::string> shuffled;
  for (auto i : perm) shuffled.push_back(names[i]);
  EXPECT_EQ(toy_encode_text(shuffled, params()), test::take_rows(t, perm));
}

TEST(ToyTextEncoder, RowDependsOnlyOnItsName) {
  const auto a = toy_encode_text({"cat", "dog"}, params());
  const auto b = toy_encode_text({"cat", "bicycle", "zebra"}, params());
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(a[k], b[k]);
}

TEST(ToyTextEncoder, DifferentNamesDiffer) {
  const auto t = toy_encode_text({"cat", "dog"}, params());
  bool differ = false;
  for (std::size_t k = 0; k < 8; ++k) differ = differ || t[k] != t[8 + k];
  EXPECT_TRUE(differ);
}

TEST(ToyTextEncoder, EmptyListRejected) {
  EXPECT_THROW(toy_encode_text({}, params()), ContractError);
}

TEST(ToyEncoders, EveryAttentionExposesProjections) {
  const auto p = params();
  for (const char* block : {"encoder.image.block0", "encoder.image.block1", "encoder.text.block0"}) {
    for (const char* proj : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) {
      EXPECT_TRUE(p.store.contains(std::string(block) + proj)) << block << proj;
    }
  }
}

TEST(EmbeddingSet, Validation) {
  EmbeddingSet<float> e{Tensor<float>({2, 2, 4}), Tensor<float>({2, 4}), {"a"}, {}};
  EXPECT_THROW(e.validate(), DimensionError);
  e.class_names = {"a", "b"};
  EXPECT_NO_THROW(e.validate());
  e.text = Tensor<float>({2, 3});
  EXPECT_THROW(e.validate(), DimensionError);
}

}  // namespace
}  // namespace catseg
