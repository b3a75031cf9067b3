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

#include <cstdlib>
#include <filesystem>

#include "support.hpp"

namespace catseg {
namespace {

namespace fs = std::filesystem;
using test::random;

class Io : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("catseg_io_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  fs::path dir_;
};

template <class T>
EmbeddingSet<T> sample_set(Rng& rng, std::size_t n_guidance = 2) {
  EmbeddingSet<T> e{random<T>(rng, {4, 4, 6}), random<T>(rng, {3, 6}), {"cat", "dog", "traffic light"}, {}};
  for (std::size_t j = 0; j < n_guidance; ++j) e.guidance.push_back(random<T>(rng, {4, 4, 5}));
  return e;
}

TEST_F(Io, CsegRoundTripIsBitwise) {
  Rng rng(1);
  const auto f = sample_set<float>(rng);
  write_cseg(f, path("f.cseg"));
  const auto rf = read_cseg<float>(path("f.cseg")).whole;
  EXPECT_EQ(rf.image, f.image);
  EXPECT_EQ(rf.text, f.text);
  EXPECT_EQ(rf.guidance, f.guidance);
  EXPECT_EQ(rf.class_names, f.class_names);
  EXPECT_TRUE(fs::exists(path("f.classes.json")));

  const auto d = sample_set<double>(rng, 1);
  write_cseg(d, path("d.cseg"));
  const auto rd = read_cseg<double>(path("d.cseg")).whole;
  EXPECT_EQ(rd.image, d.image);
  EXPECT_EQ(rd.text, d.text);
  EXPECT_EQ(rd.guidance, d.guidance);
}

TEST_F(Io, PatchSetsRoundTrip) {
  Rng rng(2);
  const auto whole = sample_set<float>(rng);
  const std::vector<EmbeddingSet<float>> patches{sample_set<float>(rng), sample_set<float>(rng, 0)};
  write_cseg(whole, patches, path("p.cseg"));
  const auto c = read_cseg<float>(path("p.cseg"));
  ASSERT_EQ(c.patches.size(), 2u);
  EXPECT_EQ(c.patches[0].image, patches[0].image);
  EXPECT_EQ(c.patches[1].text, patches[1].text);
  EXPECT_TRUE(c.patches[1].guidance.empty());
}

TEST_F(Io, ByteLayout) {
  const auto bytes = encode_cseg({{"ab", Tensor<float>({2}, {1.0f, -2.0f})}});
  const std::vector<std::uint8_t> expect{'C', 'S', 'E', 'G', 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 'a', 'b',
                                         0, 1, 2, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  EXPECT_EQ(bytes, expect);
}

TEST_F(Io, CanonicalBytes) {
  Rng rng(3);
  const auto e = sample_set<float>(rng, 0);
  write_cseg(e, path("a.cseg"));
  write_cseg(e, path("b.cseg"));
  EXPECT_EQ(read_file(path("a.cseg")), read_file(path("b.cseg")));
  EXPECT_EQ(read_tensors(path("a.cseg")).size(), 2u);
}

TEST_F(Io, TruncatedPayloadNamesTensor) {
  Rng rng(4);
  write_cseg(sample_set<float>(rng, 0), path("t.cseg"));
  auto bytes = read_file(path("t.cseg"));
  bytes.resize(bytes.size() - 3);
  write_file(path("t.cseg"), bytes);
  try {
    read_cseg<float>(path("t.cseg"));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("text_embeddings"), std::string::npos) << e.what();
    EXPECT_GT(e.offset(), 0u);
  }
}

TEST_F(Io, BadHeaderRejected) {
  EXPECT_THROW(decode_cseg({'N', 'O', 'P', 'E', 1, 0, 0, 0, 0, 0, 0, 0}), ParseError);
  EXPECT_THROW(decode_cseg({'C', 'S', 'E', 'G', 2, 0, 0, 0, 0, 0, 0, 0}), ParseError);
  auto bytes = encode_cseg({{"x", Tensor<float>({1})}});
  bytes.push_back(0);
  EXPECT_THROW(decode_cseg(bytes), ParseError);
}

TEST_F(Io, MissingImageEmbeddings) {
  write_tensors(path("m.cseg"), {{"text_embeddings", Tensor<float>({2, 4}, 1.0f)}});
  write_class_names(sidecar_path(path("m.cseg")), {"a", "b"});
  try {
    read_cseg<float>(path("m.cseg"));
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("image_embeddings"), std::string::npos) << e.what();
  }
}

TEST_F(Io, MissingSidecar) {
  Rng rng(5);
  write_cseg(sample_set<float>(rng), path("s.cseg"));
  fs::remove(path("s.classes.json"));
  EXPECT_THROW(read_cseg<float>(path("s.cseg")), IoError);
}

TEST_F(Io, InconsistentWidthsRejected) {
  write_tensors(path("w.cseg"), {{"image_embeddings", Tensor<float>({2, 2, 4}, 1.0f)},
                                 {"text_embeddings", Tensor<float>({1, 3}, 1.0f)}});
  write_class_names(sidecar_path(path("w.cseg")), {"a"});
  EXPECT_THROW(read_cseg<float>(path("w.cseg")), ContractError);
}

TEST_F(Io, SegmapBytes) {
  const auto m = test::make_map(2, 2, {0, 1, 1, 1}, {"sky", "road"});
  const auto bytes = encode_pgm(m);
  const std::string header = "P5\n2 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())), header);
  EXPECT_EQ(std::vector<std::uint8_t>(bytes.end() - 4, bytes.end()), (std::vector<std::uint8_t>{0, 1, 1, 1}));
  write_segmap(m, path("m.pgm"));
  const auto r = read_segmap(path("m.pgm"));
  EXPECT_EQ(r.indices, m.indices);
  EXPECT_EQ(r.legend, m.legend);
}

TEST_F(Io, ZeroSegmap) {
  const auto bytes = encode_pgm(test::make_map(3, 2, std::vector<std::uint32_t>(6, 0)));
  for (std::size_t i = bytes.size() - 6; i < bytes.size(); ++i) EXPECT_EQ(bytes[i], 0);
}

TEST_F(Io, TooManyClassesForPgm) {
  std::vector<std::string> legend(257, "c");
  EXPECT_THROW(write_segmap(test::make_map(1, 1, {0}, legend), path("x.pgm")), UnsupportedError);
}

TEST_F(Io, WeightsRoundTrip) {
  auto model = Model<float>::toy(RunConfig::tiny());
  save_weights(model.store(), path("w.cseg"));
  RunConfig other = RunConfig::tiny();
  other.seed = 7;
  auto fresh = Model<float>::toy(other);
  load_weights(fresh.store(), path("w.cseg"));
  for (std::size_t i = 0; i < model.store().size(); ++i) {
    EXPECT_EQ(fresh.store().all()[i].value, model.store().all()[i].value);
  }
  auto module_only = Model<float>(RunConfig::tiny(), {8, 8, false});
  EXPECT_THROW(load_weights(module_only.store(), path("w.cseg")), ContractError);
  EXPECT_NO_THROW(load_weights(module_only.store(), path("w.cseg"), true));
}

TEST_F(Io, ImageFromPpm) {
  const std::string header = "P6\n2 1\n255\n";
  std::vector<std::uint8_t> b(header.begin(), header.end());
  for (std::uint8_t v : {255, 0, 51, 0, 255, 102}) b.push_back(v);
  write_file(path("i.ppm"), b);
  const auto img = read_image<double>(path("i.ppm"));
  EXPECT_EQ(img.shape(), (Shape{3, 1, 2}));
  EXPECT_EQ(img.at({0, 0, 0}), 1.0);
  EXPECT_EQ(img.at({2, 0, 1}), 0.4);
}

TEST(Config, DefaultsMatchPublishedSettings) {
  const RunConfig c;
  EXPECT_EQ(c.d_f, 128u);
  EXPECT_EQ(c.n_b, 2u);
  EXPECT_EQ(c.n_u, 2u);
  EXPECT_EQ(c.topk, 256u);
  EXPECT_EQ(c.cost_hw, 24u);
  EXPECT_EQ(c.train_res, 384u);
  EXPECT_EQ(c.patch.n_p, 2u);
  EXPECT_EQ(c.patch.size, 384u);
  EXPECT_EQ(c.patch.overlap, 128u);
  EXPECT_TRUE(c.patch.include_global);
  EXPECT_EQ(c.lr_module, 2e-4);
  EXPECT_EQ(c.lr_encoder, 2e-6);
  EXPECT_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.heads, 4u);
  EXPECT_EQ(c.window, 8u);
  EXPECT_EQ(c.d_g, 64u);
  EXPECT_EQ(c.gn_groups, 8u);
  EXPECT_EQ(c.patch_stride(), 16u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonOverlayAndRoundTrip) {
  const auto c = from_json(json::parse(R"({"d_f": 64, "mode": "feature", "betas": [0.8, 0.99],
                                           "patch": {"overlap": 64}})"));
  EXPECT_EQ(c.d_f, 64u);
  EXPECT_EQ(c.mode, Mode::feature);
  EXPECT_EQ(c.beta1, 0.8);
  EXPECT_EQ(c.patch.overlap, 64u);
  EXPECT_EQ(c.n_b, 2u);
  const auto back = from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(from_json(json::parse(R"({"d_ff": 3})")), ConfigError);
  EXPECT_THROW(from_json(json::parse(R"({"patch": {"stride": 3}})")), ConfigError);
  EXPECT_THROW(from_json(json::parse(R"({"mode": "pixels"})")), ConfigError);
  EXPECT_THROW(from_json(json::parse(R"({"d_f": "wide"})")), ConfigError);
}

TEST(Config, InvalidGeometryRejected) {
  RunConfig c;
  c.window = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.train_res = 390;
  c.patch.size = 390;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, SeedFromEnvironment) {
  RunConfig c;
  ::setenv("CATSEG_SEED", "1234", 1);
  apply_env_seed(c);
  EXPECT_EQ(c.seed, 1234u);
  ::setenv("CATSEG_SEED", "12x", 1);
  EXPECT_THROW(apply_env_seed(c), ConfigError);
  ::unsetenv("CATSEG_SEED");
}

}  // namespace
}  // namespace catseg
