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

// Desk-scale stand-ins for the CLIP image and text towers. The image tower
// emits a dense token grid (no pooled summary token) plus two intermediate
// grids used as decoder guidance; the text tower wraps each class name in a
// fixed prompt, hashes whitespace tokens into an embedding table and
// mean-pools one transformer block.

#include <sstream>
#include <string>
#include <vector>

#include "catseg/blocks.hpp"

namespace catseg {

inline constexpr std::string_view kPromptPrefix = "A photo of a ";

struct EncoderConfig {
  std::size_t dim = 32;          // embedding width d
  std::size_t patch = 4;         // patch size P
  std::size_t heads = 4;
  std::size_t table_size = 4096;
  std::size_t ffn_ratio = 4;
};

/// Dense image embeddings, text embeddings and optional guidance grids for
/// one image and one class vocabulary.
template <class T>
struct EmbeddingSet {
  Tensor<T> image;                 // D_V [H,W,d]
  Tensor<T> text;                  // D_L [N_C,d]
  std::vector<std::string> class_names;
  std::vector<Tensor<T>> guidance; // [H_j,W_j,c_j]

  std::size_t num_classes() const { return text.dim(0); }
  std::size_t height() const { return image.dim(0); }
  std::size_t width() const { return image.dim(1); }

  void validate() const {
    if (image.rank() != 3) throw DimensionError("image embeddings must be [H,W,d], got " +
                                                shape_str(image.shape()));
    if (text.rank() != 2) throw DimensionError("text embeddings must be [N_C,d], got " +
                                               shape_str(text.shape()));
    if (image.dim(2) != text.dim(1)) {
      throw DimensionError("embedding widths differ: image " + shape_str(image.shape()) +
                           ", text " + shape_str(text.shape()));
    }
    if (class_names.size() != text.dim(0)) {
      throw DimensionError(std::to_string(class_names.size()) + " class names for " +
                           std::to_string(text.dim(0)) + " text embeddings");
    }
    for (const auto& g : guidance) {
      if (g.rank() != 3) throw DimensionError("guidance must be [H,W,c], got " + shape_str(g.shape()));
    }
    if (!image.all_finite() || !text.all_finite()) throw NumericalError("non-finite embeddings");
  }
};

/// Prompted, whitespace-split tokens for one class name.
inline std::vector<std::string> prompt_tokens(const std::string& class_name) {
  std::istringstream in(std::string(kPromptPrefix) + class_name);
  std::vector<std::string> toks;
  for (std::string t; in >> t;) toks.push_back(t);
  return toks;
}

inline std::size_t token_id(const std::string& token, std::size_t table_size) {
  return static_cast<std::size_t>(fnv1a64(token) % table_size);
}

template <class T>
void register_toy_encoders(ParameterStore<T>& store, Initializer& init, const EncoderConfig& c) {
  const std::size_t d = c.dim, p = c.patch;
  const BlockShape bs{d, 0, c.ffn_ratio, c.heads};
  store.add("encoder.image.patch_embed.weight", init.uniform<T>({d, 3, p, p}, 3 * p * p),
            Tower::image, Role::embedding);
  store.add("encoder.image.patch_embed.bias", Tensor<T>({d}), Tower::image, Role::embedding);
  register_block(store, init, "encoder.image.block0", bs, Tower::image);
  register_block(store, init, "encoder.image.block1", bs, Tower::image);
  store.add("encoder.image.proj.weight", init.uniform<T>({d, d}, d), Tower::image,
            Role::projection);
  store.add("encoder.image.proj.bias", Tensor<T>({d}), Tower::image, Role::projection);

  store.add("encoder.text.token_embed", init.uniform<T>({c.table_size, d}, d), Tower::text,
            Role::embedding);
  register_block(store, init, "encoder.text.block0", bs, Tower::text);
  store.add("encoder.text.proj.weight", init.uniform<T>({d, d}, d), Tower::text,
            Role::projection);
  store.add("encoder.text.proj.bias", Tensor<T>({d}), Tower::text, Role::projection);
}

template <class T>
struct ImageEncoding {
  ag::Var<T> dense;                  // [h,w,d]
  std::vector<ag::Var<T>> guidance;  // deeper grid first
};

/// image [3,H,W] -> dense grid [H/P, W/P, d]. Guidance is returned deepest
/// first: entry 0 (the output of the second block) feeds the first, coarser
/// decoder level and entry 1 (first block) the finer one.
template <class T>
ImageEncoding<T> encode_image(const Binder<T>& bind, const EncoderConfig& c, ag::Var<T> image) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != 3) {
    throw DimensionError("toy image encoder expects [3,H,W], got " + shape_str(s));
  }
  if (s[1] % c.patch != 0 || s[2] % c.patch != 0) {
    throw ConfigError("image " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                      " not divisible by patch size " + std::to_string(c.patch));
  }
  const std::size_t h = s[1] / c.patch, w = s[2] / c.patch, d = c.dim;
  auto x = ag::conv2d(image, bind("encoder.image.patch_embed.weight"),
                      bind("encoder.image.patch_embed.bias"), c.patch, 0);
  x = ag::reshape(ag::permute(x, {1, 2, 0}), {h * w, d});
  const MixerSpec global{};
  auto g1 = block_forward(bind, "encoder.image.block0", x, std::nullopt, global, c.heads);
  auto g2 = block_forward(bind, "encoder.image.block1", g1, std::nullopt, global, c.heads);
  auto dense = ag::add_bias(ag::matmul(g2, bind("encoder.image.proj.weight")),
                            bind("encoder.image.proj.bias"));
  return {ag::reshape(dense, {h, w, d}),
          {ag::reshape(g2, {h, w, d}), ag::reshape(g1, {h, w, d})}};
}

/// Class names -> [N_C, d]; each row depends only on its own name.
template <class T>
ag::Var<T> encode_text(const Binder<T>& bind, const EncoderConfig& c,
                       const std::vector<std::string>& class_names) {
  if (class_names.empty()) throw ContractError("text encoder: empty class list");
  auto table = bind("encoder.text.token_embed");
  const std::size_t d = c.dim;
  std::vector<ag::Var<T>> rows;
  rows.reserve(class_names.size());
  auto& tape = bind.tape();
  for (const auto& name : class_names) {
    const auto toks = prompt_tokens(name);
    std::vector<std::size_t> idx;
    idx.reserve(toks.size() * d);
    for (const auto& t : toks) {
      const std::size_t row = token_id(t, c.table_size);
      for (std::size_t k = 0; k < d; ++k) idx.push_back(row * d + k);
    }
    auto x = ag::gather(table, std::move(idx), {toks.size(), d});
    x = block_forward(bind, "encoder.text.block0", x, std::nullopt, MixerSpec{}, c.heads);
    auto pool = tape.constant(Tensor<T>::full({1, toks.size()}, T{1} / static_cast<T>(toks.size())));
    auto pooled = ag::matmul(pool, x);
    rows.push_back(ag::add_bias(ag::matmul(pooled, bind("encoder.text.proj.weight")),
                                bind("encoder.text.proj.bias")));
  }
  return ag::concat(rows, 0);
}

/// Toy encoder weights plus geometry.
template <class T>
struct ToyEncoderParams {
  EncoderConfig config;
  ParameterStore<T> store;

  static ToyEncoderParams create(const EncoderConfig& c, std::uint64_t seed = 42) {
    ToyEncoderParams p{c, {}};
    Initializer init(seed);
    register_toy_encoders(p.store, init, c);
    return p;
  }
};

template <class T>
std::pair<Tensor<T>, std::vector<Tensor<T>>> toy_encode_image(const Tensor<T>& image,
                                                              const ToyEncoderParams<T>& p) {
  ag::Tape<T> tape;
  Binder<T> bind(tape, p.store, [](const std::string&) { return false; });
  auto enc = encode_image(bind, p.config, tape.constant(image));
  std::vector<Tensor<T>> g;
  for (auto& v : enc.guidance) g.push_back(v.value());
  return {enc.dense.value(), std::move(g)};
}

template <class T>
Tensor<T> toy_encode_text(const std::vector<std::string>& class_names,
                          const ToyEncoderParams<T>& p) {
  ag::Tape<T> tape;
  Binder<T> bind(tape, p.store, [](const std::string&) { return false; });
  return encode_text(bind, p.config, class_names).value();
}

/// Convenience: run both towers and package an EmbeddingSet.
template <class T>
EmbeddingSet<T> toy_embed(const Tensor<T>& image, const std::vector<std::string>& class_names,
                          const ToyEncoderParams<T>& p) {
  auto [dense, guidance] = toy_encode_image(image, p);
  return {std::move(dense), toy_encode_text(class_names, p), class_names, std::move(guidance)};
}

}  // namespace catseg
