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

// Upsampling decoder. Level j (1-based) doubles the cost features with
// bilinear interpolation, concatenates guidance lifted by a stride-2^j
// transposed convolution, and applies conv3x3 -> GroupNorm -> ReLU, halving
// the channel count each level. A class-shared 3x3 head then emits one logit
// map per class, resized to the requested output size.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "catseg/blocks.hpp"

namespace catseg {

inline constexpr double kSentinelLogit = -1e9;

struct DecoderConfig {
  std::size_t d_f = 128;
  std::size_t n_u = 2;
  std::size_t gn_groups = 8;
  std::size_t guidance_dim = 32;  // channels of each raw guidance grid

  std::size_t in_channels(std::size_t j) const { return d_f >> (j - 1); }
  std::size_t out_channels(std::size_t j) const { return d_f >> j; }
  std::size_t lift_channels(std::size_t j) const { return d_f >> j; }
  std::size_t groups(std::size_t j) const { return std::gcd(gn_groups, out_channels(j)); }

  void validate() const {
    if (d_f == 0 || (d_f >> n_u) == 0 || (d_f % (std::size_t{1} << n_u)) != 0) {
      throw ConfigError("decoder: d_f=" + std::to_string(d_f) + " cannot be halved " +
                        std::to_string(n_u) + " times");
    }
  }
};

inline std::string level_prefix(std::size_t j) { return "dec.level" + std::to_string(j); }

template <class T>
void register_decoder(ParameterStore<T>& store, Initializer& init, const DecoderConfig& c) {
  c.validate();
  for (std::size_t j = 1; j <= c.n_u; ++j) {
    const std::string pre = level_prefix(j);
    const std::size_t k = std::size_t{1} << j, cl = c.lift_channels(j);
    const std::size_t ci = c.in_channels(j) + cl, co = c.out_channels(j);
    store.add(pre + ".lift.weight", init.uniform<T>({c.guidance_dim, cl, k, k}, c.guidance_dim),
              Tower::module, Role::other);
    store.add(pre + ".lift.bias", Tensor<T>({cl}), Tower::module, Role::other);
    store.add(pre + ".conv.weight", init.uniform<T>({co, ci, 3, 3}, ci * 9), Tower::module,
              Role::other);
    store.add(pre + ".conv.bias", Tensor<T>({co}), Tower::module, Role::other);
    store.add(pre + ".gn.gamma", Tensor<T>::full({co}, T{1}), Tower::module, Role::norm);
    store.add(pre + ".gn.beta", Tensor<T>({co}), Tower::module, Role::norm);
  }
  const std::size_t cf = c.out_channels(c.n_u);
  store.add("dec.head.weight", init.uniform<T>({1, cf, 3, 3}, cf * 9), Tower::module, Role::other);
  store.add("dec.head.bias", Tensor<T>({1}), Tower::module, Role::other);
}

/// Guidance grid [h,w,c] -> lifted map [c'_j, h*2^j, w*2^j] (channel-first).
template <class T>
ag::Var<T> lift_guidance(const Binder<T>& bind, std::size_t j, ag::Var<T> g) {
  const Shape s = g.shape();
  if (s.size() != 3) throw DimensionError("guidance must be [H,W,c], got " + shape_str(s));
  auto x = ag::permute(g, {2, 0, 1});
  return ag::transposed_conv2d(x, bind(level_prefix(j) + ".lift.weight"),
                               bind(level_prefix(j) + ".lift.bias"), std::size_t{1} << j);
}

/// F [N,C,s,s'] and lifted guidance [c',2s,2s'] -> [N,C/2,2s,2s'].
template <class T>
ag::Var<T> decoder_layer(const Binder<T>& bind, const DecoderConfig& c, std::size_t j,
                         ag::Var<T> f, ag::Var<T> lifted) {
  const Shape fs = f.shape(), ls = lifted.shape();
  const std::size_t n = fs[0], h2 = fs[2] * 2, w2 = fs[3] * 2;
  if (ls.size() != 3 || ls[1] != h2 || ls[2] != w2) {
    throw ConfigError("decoder level " + std::to_string(j) + ": lifted guidance " +
                      shape_str(ls) + " does not match target " + std::to_string(h2) + "x" +
                      std::to_string(w2));
  }
  auto up = ag::bilinear_resize(f, h2, w2);
  auto g = ag::gather(lifted, repeat_index(lifted.value().size(), n), {n, ls[0], h2, w2});
  auto x = ag::concat<T>({up, g}, 1);
  const std::string pre = level_prefix(j);
  x = ag::conv2d(x, bind(pre + ".conv.weight"), bind(pre + ".conv.bias"), 1, 1);
  x = ag::group_norm(x, c.groups(j), bind(pre + ".gn.gamma"), bind(pre + ".gn.beta"));
  return ag::relu(x);
}

/// F [N,C,H',W'] -> logits [N, out_h, out_w].
template <class T>
ag::Var<T> predict_logits(const Binder<T>& bind, ag::Var<T> f, std::size_t out_h,
                          std::size_t out_w) {
  const Shape s = f.shape();
  auto y = ag::conv2d(f, bind("dec.head.weight"), bind("dec.head.bias"), 1, 1);
  y = ag::reshape(y, {s[0], s[2], s[3]});
  if (s[2] == out_h && s[3] == out_w) return y;
  return ag::bilinear_resize(y, out_h, out_w);
}

/// Aggregated features [H,W,N,d_F] plus raw guidance grids -> logits
/// [N,out_h,out_w]. Missing guidance grids are treated as zero maps.
template <class T>
ag::Var<T> decode(const Binder<T>& bind, const DecoderConfig& c, ag::Var<T> f,
                  const std::vector<ag::Var<T>>& guidance, std::size_t out_h, std::size_t out_w) {
  const Shape s = f.shape();
  if (s.size() != 4 || s[3] != c.d_f) {
    throw DimensionError("decoder expects [H,W,N," + std::to_string(c.d_f) + "], got " +
                         shape_str(s));
  }
  auto x = ag::permute(f, {2, 3, 0, 1});
  for (std::size_t j = 1; j <= c.n_u; ++j) {
    ag::Var<T> g;
    if (j <= guidance.size()) {
      g = guidance[j - 1];
      if (g.shape()[0] != s[0] || g.shape()[1] != s[1] || g.shape()[2] != c.guidance_dim) {
        throw DimensionError("guidance " + std::to_string(j) + " must be [" +
                             std::to_string(s[0]) + "," + std::to_string(s[1]) + "," +
                             std::to_string(c.guidance_dim) + "], got " + shape_str(g.shape()));
      }
    } else {
      g = bind.tape().constant(Tensor<T>({s[0], s[1], c.guidance_dim}));
    }
    x = decoder_layer(bind, c, j, x, lift_guidance(bind, j, g));
  }
  return predict_logits(bind, x, out_h, out_w);
}

/// Reinserts classes dropped by top-k as rows of the sentinel logit.
template <class T>
Tensor<T> assemble_logits(const Tensor<T>& kept, const std::vector<std::size_t>& selected,
                          std::size_t n_classes) {
  if (kept.rank() != 3 || kept.dim(0) != selected.size()) {
    throw DimensionError("assemble_logits: " + shape_str(kept.shape()) + " for " +
                         std::to_string(selected.size()) + " selected classes");
  }
  const std::size_t plane = kept.dim(1) * kept.dim(2);
  Tensor<T> out = Tensor<T>::full({n_classes, kept.dim(1), kept.dim(2)},
                                  static_cast<T>(kSentinelLogit));
  for (std::size_t r = 0; r < selected.size(); ++r) {
    if (selected[r] >= n_classes) throw InternalError("selected class out of range");
    std::copy_n(kept.data().begin() + r * plane, plane, out.data().begin() + selected[r] * plane);
  }
  return out;
}

/// Decoder weights plus geometry.
template <class T>
struct DecoderParams {
  DecoderConfig config;
  ParameterStore<T> store;

  static DecoderParams create(const DecoderConfig& c, std::uint64_t seed = 42) {
    DecoderParams p{c, {}};
    Initializer init(seed);
    register_decoder(p.store, init, c);
    return p;
  }
};

// Tensor-valued entry points use the channel-last layouts of the cost
// features: F [H,W,N,C], guidance [H,W,c].

template <class T>
Tensor<T> lift_guidance(const Tensor<T>& g, const DecoderParams<T>& p, std::size_t j) {
  ag::Tape<T> tape;
  Binder<T> bind(tape, p.store, [](const std::string&) { return false; });
  return ag::permute(lift_guidance(bind, j, tape.constant(g)), {1, 2, 0}).value();
}

template <class T>
Tensor<T> decoder_layer(const Tensor<T>& f, const Tensor<T>& lifted, const DecoderParams<T>& p,
                        std::size_t j) {
  ag::Tape<T> tape;
  Binder<T> bind(tape, p.store, [](const std::string&) { return false; });
  auto x = ag::permute(tape.constant(f), {2, 3, 0, 1});
  auto g = ag::permute(tape.constant(lifted), {2, 0, 1});
  return ag::permute(decoder_layer(bind, p.config, j, x, g), {2, 3, 0, 1}).value();
}

template <class T>
Tensor<T> predict_logits(const Tensor<T>& f, const DecoderParams<T>& p, std::size_t out_h,
                         std::size_t out_w) {
  ag::Tape<T> tape;
  Binder<T> bind(tape, p.store, [](const std::string&) { return false; });
  auto x = ag::permute(tape.constant(f), {2, 3, 0, 1});
  return predict_logits(bind, x, out_h, out_w).value();
}

}  // namespace catseg
