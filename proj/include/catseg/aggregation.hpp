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

// Cost aggregation: N_B rounds of spatial aggregation (a window / shifted
// window block pair per class slice) followed by class aggregation (linear
// attention across the class axis per position). Projected image and text
// embeddings are concatenated to the query/key inputs of every block.

#include <optional>
#include <string>

#include "catseg/blocks.hpp"
#include "catseg/encoder.hpp"

namespace catseg {

struct AggregatorConfig {
  std::size_t embed_dim = 32;  // d, width of D_V and D_L
  std::size_t d_f = 128;
  std::size_t d_g = 64;        // 0 disables guidance
  std::size_t heads = 4;
  std::size_t window = 8;
  std::size_t n_b = 2;
  std::size_t ffn_ratio = 4;
  std::size_t class_layers = 1;
};

inline std::string block_prefix(std::size_t b) { return "agg.block" + std::to_string(b); }

template <class T>
void register_aggregator(ParameterStore<T>& store, Initializer& init, const AggregatorConfig& c) {
  if (c.d_g > 0) {
    store.add("agg.guide.image.weight", init.uniform<T>({c.embed_dim, c.d_g}, c.embed_dim),
              Tower::module, Role::projection);
    store.add("agg.guide.image.bias", Tensor<T>({c.d_g}), Tower::module, Role::projection);
    store.add("agg.guide.text.weight", init.uniform<T>({c.embed_dim, c.d_g}, c.embed_dim),
              Tower::module, Role::projection);
    store.add("agg.guide.text.bias", Tensor<T>({c.d_g}), Tower::module, Role::projection);
  }
  const BlockShape bs{c.d_f, c.d_g, c.ffn_ratio, c.heads};
  for (std::size_t b = 0; b < c.n_b; ++b) {
    register_block(store, init, block_prefix(b) + ".spatial0", bs, Tower::module);
    register_block(store, init, block_prefix(b) + ".spatial1", bs, Tower::module);
    for (std::size_t l = 0; l < c.class_layers; ++l) {
      register_block(store, init, block_prefix(b) + ".class" + std::to_string(l), bs,
                     Tower::module);
    }
  }
}

template <class T>
struct Guidance {
  std::optional<ag::Var<T>> image;  // P_V(D_V) [H,W,d_G]
  std::optional<ag::Var<T>> text;   // P_L(D_L) [N,d_G]
};

template <class T>
Guidance<T> project_guidance(const Binder<T>& bind, const AggregatorConfig& c, ag::Var<T> dv,
                             ag::Var<T> dl) {
  if (c.d_g == 0) return {};
  return {ag::add_bias(ag::matmul(dv, bind("agg.guide.image.weight")),
                       bind("agg.guide.image.bias")),
          ag::add_bias(ag::matmul(dl, bind("agg.guide.text.weight")),
                       bind("agg.guide.text.bias"))};
}

/// Shift used by the second spatial block. A window covering the whole grid
/// has nothing to shift across, so the pair degenerates to two global layers.
inline std::size_t spatial_shift(std::size_t window, std::size_t h, std::size_t w) {
  return (window >= h && window >= w) ? 0 : window / 2;
}

/// F [H,W,N,d_F] -> same shape; each class slice is processed independently.
template <class T>
ag::Var<T> spatial_aggregate(const Binder<T>& bind, const AggregatorConfig& c, std::size_t b,
                             ag::Var<T> f, std::optional<std::type_identity_t<ag::Var<T>>> g) {
  const Shape s = f.shape();
  if (s.size() != 4) throw DimensionError("spatial aggregation expects [H,W,N,C], got " + shape_str(s));
  const std::size_t h = s[0], w = s[1], n = s[2];
  if (c.window == 0 || h % c.window != 0 || w % c.window != 0) {
    throw ConfigError("window " + std::to_string(c.window) + " does not divide cost grid " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  auto x = ag::permute(f, {2, 0, 1, 3});
  std::optional<ag::Var<T>> gr;
  if (g) {
    const std::size_t dg = g->shape().back();
    gr = ag::gather(*g, repeat_index(h * w * dg, n), {n, h, w, dg});
  }
  const std::string pre = block_prefix(b);
  x = block_forward(bind, pre + ".spatial0", x, gr, {Mixer::window, c.window, 0}, c.heads);
  x = block_forward(bind, pre + ".spatial1", x, gr,
                    {Mixer::window, c.window, spatial_shift(c.window, h, w)}, c.heads);
  return ag::permute(x, {1, 2, 0, 3});
}

/// F [H,W,N,d_F] -> same shape; each position attends over its classes.
template <class T>
ag::Var<T> class_aggregate(const Binder<T>& bind, const AggregatorConfig& c, std::size_t b,
                           ag::Var<T> f, std::optional<std::type_identity_t<ag::Var<T>>> g) {
  const Shape s = f.shape();
  if (s.size() != 4) throw DimensionError("class aggregation expects [H,W,N,C], got " + shape_str(s));
  const std::size_t p = s[0] * s[1], n = s[2];
  auto x = ag::reshape(f, {p, n, s[3]});
  std::optional<ag::Var<T>> gr;
  if (g) {
    const std::size_t dg = g->shape().back();
    gr = ag::gather(*g, repeat_index(n * dg, p), {p, n, dg});
  }
  for (std::size_t l = 0; l < c.class_layers; ++l) {
    x = block_forward(bind, block_prefix(b) + ".class" + std::to_string(l), x, gr,
                      {Mixer::linear, 0, 0}, c.heads);
  }
  return ag::reshape(x, s);
}

template <class T>
ag::Var<T> aggregate_stack(const Binder<T>& bind, const AggregatorConfig& c, ag::Var<T> f,
                           ag::Var<T> dv, ag::Var<T> dl) {
  const auto g = project_guidance(bind, c, dv, dl);
  for (std::size_t b = 0; b < c.n_b; ++b) {
    f = spatial_aggregate(bind, c, b, f, g.image);
    f = class_aggregate(bind, c, b, f, g.text);
  }
  return f;
}

/// Aggregator weights plus geometry.
template <class T>
struct AggregatorParams {
  AggregatorConfig config;
  ParameterStore<T> store;

  static AggregatorParams create(const AggregatorConfig& c, std::uint64_t seed = 42) {
    AggregatorParams p{c, {}};
    Initializer init(seed);
    register_aggregator(p.store, init, c);
    return p;
  }
};

namespace detail {

template <class T>
Binder<T> frozen(ag::Tape<T>& tape, const ParameterStore<T>& store) {
  return Binder<T>(tape, store, [](const std::string&) { return false; });
}

}  // namespace detail

// Tensor-valued entry points; `b` selects the block.

template <class T>
Tensor<T> spatial_aggregate(const Tensor<T>& f, const Tensor<T>& dv, const AggregatorParams<T>& p,
                            std::size_t b = 0) {
  ag::Tape<T> tape;
  auto bind = detail::frozen(tape, p.store);
  auto g = project_guidance(bind, p.config, tape.constant(dv), tape.constant(Tensor<T>({1, dv.dim(2)})));
  return spatial_aggregate(bind, p.config, b, tape.constant(f), g.image).value();
}

template <class T>
Tensor<T> class_aggregate(const Tensor<T>& f, const Tensor<T>& dl, const AggregatorParams<T>& p,
                          std::size_t b = 0) {
  ag::Tape<T> tape;
  auto bind = detail::frozen(tape, p.store);
  auto g = project_guidance(bind, p.config, tape.constant(Tensor<T>({1, 1, dl.dim(1)})),
                            tape.constant(dl));
  return class_aggregate(bind, p.config, b, tape.constant(f), g.text).value();
}

template <class T>
Tensor<T> aggregate_stack(const Tensor<T>& f, const EmbeddingSet<T>& emb,
                          const AggregatorParams<T>& p) {
  ag::Tape<T> tape;
  auto bind = detail::frozen(tape, p.store);
  return aggregate_stack(bind, p.config, tape.constant(f), tape.constant(emb.image),
                         tape.constant(emb.text))
      .value();
}

}  // namespace catseg
