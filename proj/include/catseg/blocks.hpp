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

// Pre-norm transformer block shared by the toy encoders and the cost
// aggregator:
//   x <- x + W_o Attn([LN1(x); g], LN1(x))
//   x <- x + FFN(LN2(x))
// where g is optional guidance concatenated to the query/key input only.

#include <optional>
#include <string>
#include <type_traits>

#include "catseg/attention.hpp"
#include "catseg/params.hpp"

namespace catseg {

enum class Mixer { global, window, linear };

struct BlockShape {
  std::size_t width = 0;      // token width d
  std::size_t guidance = 0;   // extra query/key width d_G
  std::size_t ffn_ratio = 4;
  std::size_t heads = 1;
};

template <class T>
void register_block(ParameterStore<T>& store, Initializer& init, const std::string& prefix,
                    const BlockShape& s, Tower tower) {
  const std::size_t d = s.width, dqk = d + s.guidance, hidden = d * s.ffn_ratio;
  store.add(prefix + ".ln1.gamma", Tensor<T>::full({d}, T{1}), tower, Role::norm);
  store.add(prefix + ".ln1.beta", Tensor<T>({d}), tower, Role::norm);
  store.add(prefix + ".attn.q", init.uniform<T>({dqk, d}, dqk), tower, Role::query);
  store.add(prefix + ".attn.k", init.uniform<T>({dqk, d}, dqk), tower, Role::key);
  store.add(prefix + ".attn.v", init.uniform<T>({d, d}, d), tower, Role::value);
  store.add(prefix + ".attn.o", init.uniform<T>({d, d}, d), tower, Role::output);
  store.add(prefix + ".ln2.gamma", Tensor<T>::full({d}, T{1}), tower, Role::norm);
  store.add(prefix + ".ln2.beta", Tensor<T>({d}), tower, Role::norm);
  store.add(prefix + ".ffn.fc1.weight", init.uniform<T>({d, hidden}, d), tower, Role::ffn);
  store.add(prefix + ".ffn.fc1.bias", Tensor<T>({hidden}), tower, Role::ffn);
  store.add(prefix + ".ffn.fc2.weight", init.uniform<T>({hidden, d}, hidden), tower, Role::ffn);
  store.add(prefix + ".ffn.fc2.bias", Tensor<T>({d}), tower, Role::ffn);
}

template <class T>
attn::Weights<T> block_attention(const Binder<T>& bind, const std::string& prefix,
                                 std::size_t heads) {
  return {bind(prefix + ".attn.q"), bind(prefix + ".attn.k"), bind(prefix + ".attn.v"),
          bind(prefix + ".attn.o"), heads};
}

struct MixerSpec {
  Mixer kind = Mixer::global;
  std::size_t window = 0;
  std::size_t shift = 0;
};

/// One pre-norm block over x [..., d]. For the window mixer x is a token grid
/// [B,H,W,d]; otherwise token sets [N,d] or [B,N,d].
template <class T>
ag::Var<T> block_forward(const Binder<T>& bind, const std::string& prefix, ag::Var<T> x,
                         std::optional<std::type_identity_t<ag::Var<T>>> guidance,
                         const MixerSpec& mixer,
                         std::size_t heads) {
  auto h = ag::layer_norm(x, bind(prefix + ".ln1.gamma"), bind(prefix + ".ln1.beta"));
  auto qk = guidance ? ag::concat_last<T>({h, *guidance}) : h;
  auto w = block_attention(bind, prefix, heads);
  ag::Var<T> a;
  switch (mixer.kind) {
    case Mixer::global: a = multi_head_attention(qk, qk, h, w); break;
    case Mixer::window: a = window_attention(qk, h, mixer.window, mixer.shift, w); break;
    case Mixer::linear: a = linear_attention(qk, qk, h, w); break;
  }
  x = ag::add(x, a);
  auto f = ag::layer_norm(x, bind(prefix + ".ln2.gamma"), bind(prefix + ".ln2.beta"));
  f = ag::gelu(ag::add_bias(ag::matmul(f, bind(prefix + ".ffn.fc1.weight")),
                            bind(prefix + ".ffn.fc1.bias")));
  f = ag::add_bias(ag::matmul(f, bind(prefix + ".ffn.fc2.weight")),
                   bind(prefix + ".ffn.fc2.bias"));
  return ag::add(x, f);
}

/// Index that tiles a tensor of `src_size` elements `reps` times.
inline std::vector<std::size_t> repeat_index(std::size_t src_size, std::size_t reps) {
  std::vector<std::size_t> idx(src_size * reps);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i % src_size;
  return idx;
}

}  // namespace catseg
