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

// The full network: optional toy encoders, cost (or concatenated-feature)
// embedding, aggregation and decoder, with every weight held in one named
// parameter store.

#include <string>
#include <vector>

#include "catseg/config.hpp"
#include "catseg/cost.hpp"

namespace catseg {

struct ModelDims {
  std::size_t embed_dim = 32;     // d of D_V / D_L
  std::size_t guidance_dim = 32;  // channels of the guidance grids
  bool with_encoder = true;       // register the toy encoders
};

template <class T>
struct ForwardResult {
  ag::Var<T> logits;                  // [K, out_h, out_w] for the kept classes
  std::vector<std::size_t> selected;  // original index of each kept class
  std::size_t n_classes = 0;
};

template <class T>
class Model {
 public:
  Model(const RunConfig& cfg, const ModelDims& dims) : cfg_(cfg), dims_(dims) {
    cfg_.validate();
    if (dims.with_encoder && (dims.embed_dim != cfg.encoder.dim ||
                              dims.guidance_dim != cfg.encoder.dim)) {
      throw ConfigError("toy encoder width " + std::to_string(cfg.encoder.dim) +
                        " differs from the model embedding width");
    }
    Initializer init(cfg_.seed);
    if (dims.with_encoder) register_toy_encoders(store_, init, encoder_config());
    const std::size_t df = cfg_.d_f;
    if (cfg_.mode == Mode::cost) {
      const std::size_t k = kCostKernel;
      store_.add("cost.embed.weight", init.uniform<T>({df, 1, k, k}, k * k), Tower::module,
                 Role::embedding);
      store_.add("cost.embed.bias", Tensor<T>({df}), Tower::module, Role::embedding);
    } else {
      const std::size_t d2 = 2 * dims.embed_dim;
      store_.add("feature.proj.weight", init.uniform<T>({d2, df}, d2), Tower::module,
                 Role::projection);
      store_.add("feature.proj.bias", Tensor<T>({df}), Tower::module, Role::projection);
    }
    register_aggregator(store_, init, aggregator_config());
    register_decoder(store_, init, decoder_config());
  }

  /// Model with toy encoders sized from the configuration.
  static Model toy(const RunConfig& cfg) {
    return Model(cfg, {cfg.encoder.dim, cfg.encoder.dim, true});
  }

  const RunConfig& config() const { return cfg_; }
  const ModelDims& dims() const { return dims_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }

  EncoderConfig encoder_config() const { return cfg_.encoder_config(); }
  AggregatorConfig aggregator_config() const { return cfg_.aggregator_config(dims_.embed_dim); }
  DecoderConfig decoder_config() const { return cfg_.decoder_config(dims_.guidance_dim); }

  /// Full pipeline on tape values. Classes outside the top-k are dropped
  /// before embedding; `selected` records the survivors.
  ForwardResult<T> forward(const Binder<T>& bind, ag::Var<T> dv, ag::Var<T> dl,
                           const std::vector<ag::Var<T>>& guidance, std::size_t out_h,
                           std::size_t out_w) const {
    const Shape vs = dv.shape();
    if (vs.size() != 3 || vs[2] != dims_.embed_dim) {
      throw DimensionError("image embeddings must be [H,W," + std::to_string(dims_.embed_dim) +
                           "], got " + shape_str(vs));
    }
    if (vs[0] % cfg_.window != 0 || vs[1] % cfg_.window != 0) {
      throw ConfigError("window " + std::to_string(cfg_.window) + " does not divide grid " +
                        std::to_string(vs[0]) + "x" + std::to_string(vs[1]));
    }
    const std::size_t n = dl.shape()[0];
    auto cost = ag::cosine_cost(dv, dl);
    ForwardResult<T> r;
    r.n_classes = n;
    r.selected = topk_indices(cost.value(), cfg_.topk);
    if (r.selected.size() < n) {
      cost = select_columns(cost, r.selected);
      dl = select_rows(dl, r.selected);
    }
    ag::Var<T> f = cfg_.mode == Mode::cost
                       ? embed_cost(cost, bind("cost.embed.weight"), bind("cost.embed.bias"))
                       : feature_volume(dv, dl, bind("feature.proj.weight"),
                                        bind("feature.proj.bias"));
    f = aggregate_stack(bind, aggregator_config(), f, dv, dl);
    r.logits = decode(bind, decoder_config(), f, guidance, out_h, out_w);
    return r;
  }

  /// Default output size: the cost grid scaled by the pixel stride.
  std::pair<std::size_t, std::size_t> output_size(const EmbeddingSet<T>& emb) const {
    return {emb.height() * cfg_.patch_stride(), emb.width() * cfg_.patch_stride()};
  }

  /// Logits [N_C, out_h, out_w] for all classes; dropped classes carry the
  /// sentinel logit.
  Tensor<T> predict(const EmbeddingSet<T>& emb, std::size_t out_h, std::size_t out_w) const {
    emb.validate();
    ag::Tape<T> tape;
    Binder<T> bind(tape, store_, [](const std::string&) { return false; });
    std::vector<ag::Var<T>> g;
    for (const auto& t : emb.guidance) g.push_back(tape.constant(t));
    auto r = forward(bind, tape.constant(emb.image), tape.constant(emb.text), g, out_h, out_w);
    return assemble_logits(r.logits.value(), r.selected, r.n_classes);
  }

  Tensor<T> predict(const EmbeddingSet<T>& emb) const {
    auto [h, w] = output_size(emb);
    return predict(emb, h, w);
  }

  /// Embeds an image [3,H,W] and a vocabulary with the toy encoders.
  EmbeddingSet<T> embed(const Tensor<T>& image, const std::vector<std::string>& names) const {
    if (!dims_.with_encoder) throw ContractError("model has no toy encoders");
    ag::Tape<T> tape;
    Binder<T> bind(tape, store_, [](const std::string&) { return false; });
    auto enc = encode_image(bind, encoder_config(), tape.constant(image));
    EmbeddingSet<T> e{enc.dense.value(), encode_text(bind, encoder_config(), names).value(), names,
                      {}};
    for (auto& g : enc.guidance) e.guidance.push_back(g.value());
    return e;
  }

 private:
  RunConfig cfg_;
  ModelDims dims_;
  ParameterStore<T> store_;
};

}  // namespace catseg
