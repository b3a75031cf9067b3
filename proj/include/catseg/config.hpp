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

// Run configuration: model geometry, optimization and patch-inference
// settings, loaded from JSON. Unknown keys are rejected.

#include <cstdlib>
#include <fstream>
#include <string>

#include <json.hpp>

#include "catseg/aggregation.hpp"
#include "catseg/decoder.hpp"
#include "catseg/encoder.hpp"

namespace catseg {

enum class Mode { cost, feature };

inline const char* to_string(Mode m) { return m == Mode::cost ? "cost" : "feature"; }

inline Mode parse_mode(const std::string& s) {
  if (s == "cost") return Mode::cost;
  if (s == "feature") return Mode::feature;
  throw ConfigError("unknown mode '" + s + "' (expected cost or feature)");
}

enum class FinetunePreset { freeze, full, attn, qk, kv, qv_image, qv_text, qv_both };

inline constexpr FinetunePreset kAllPresets[] = {
    FinetunePreset::freeze, FinetunePreset::full,     FinetunePreset::attn,
    FinetunePreset::qk,     FinetunePreset::kv,       FinetunePreset::qv_image,
    FinetunePreset::qv_text, FinetunePreset::qv_both};

inline const char* to_string(FinetunePreset p) {
  switch (p) {
    case FinetunePreset::freeze: return "freeze";
    case FinetunePreset::full: return "full";
    case FinetunePreset::attn: return "attn";
    case FinetunePreset::qk: return "qk";
    case FinetunePreset::kv: return "kv";
    case FinetunePreset::qv_image: return "qv_image";
    case FinetunePreset::qv_text: return "qv_text";
    case FinetunePreset::qv_both: return "qv_both";
  }
  return "?";
}

inline FinetunePreset parse_preset(const std::string& s) {
  for (auto p : kAllPresets) {
    if (s == to_string(p)) return p;
  }
  throw ConfigError("unknown fine-tuning preset '" + s + "'");
}

struct PatchConfig {
  std::size_t n_p = 2;
  std::size_t size = 384;
  std::size_t overlap = 128;
  bool include_global = true;
};

struct ToyEncoderConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t table_size = 4096;
};

struct RunConfig {
  std::size_t d_f = 128;
  std::size_t n_b = 2;
  std::size_t n_u = 2;
  std::size_t heads = 4;
  std::size_t window = 8;
  std::size_t cost_hw = 24;
  std::size_t train_res = 384;
  std::size_t topk = 256;
  std::size_t d_g = 64;
  std::size_t ffn_ratio = 4;
  std::size_t class_layers = 1;
  std::size_t gn_groups = 8;
  Mode mode = Mode::cost;
  FinetunePreset finetune = FinetunePreset::qv_both;
  std::uint64_t seed = 42;
  double lr_module = 2e-4;
  double lr_encoder = 2e-6;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 1;
  PatchConfig patch;
  ToyEncoderConfig encoder;

  /// Image pixels per cost-grid cell.
  std::size_t patch_stride() const { return train_res / cost_hw; }

  /// Desk-scale geometry: 8x8 cost grid from 32x32 images.
  static RunConfig tiny() {
    RunConfig c;
    c.d_f = 16;
    c.d_g = 8;
    c.window = 4;
    c.cost_hw = 8;
    c.train_res = 32;
    c.patch = {2, 32, 16, true};
    c.encoder = {8, 2, 4096};
    return c;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(d_f, "d_f");
    positive(heads, "heads");
    positive(window, "window");
    positive(cost_hw, "cost_hw");
    positive(train_res, "train_res");
    positive(topk, "topk");
    positive(ffn_ratio, "ffn_ratio");
    positive(batch_size, "batch_size");
    positive(encoder.dim, "encoder.dim");
    positive(encoder.heads, "encoder.heads");
    positive(encoder.table_size, "encoder.table_size");
    positive(patch.n_p, "patch.n_p");
    if (cost_hw % window != 0) {
      throw ConfigError("window " + std::to_string(window) + " does not divide cost_hw " +
                        std::to_string(cost_hw));
    }
    if (train_res % cost_hw != 0) {
      throw ConfigError("train_res " + std::to_string(train_res) +
                        " is not a multiple of cost_hw " + std::to_string(cost_hw));
    }
    if (patch.size != train_res) {
      throw ConfigError("patch.size " + std::to_string(patch.size) +
                        " must equal train_res " + std::to_string(train_res));
    }
    if (d_f % heads != 0) {
      throw ConfigError("d_f " + std::to_string(d_f) + " not divisible by heads " +
                        std::to_string(heads));
    }
    if (encoder.dim % encoder.heads != 0) {
      throw ConfigError("encoder.dim not divisible by encoder.heads");
    }
    if (lr_module < 0 || lr_encoder < 0 || weight_decay < 0) {
      throw ConfigError("learning rates and weight decay must be non-negative");
    }
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
      throw ConfigError("betas must lie in [0,1)");
    }
    DecoderConfig{d_f, n_u, gn_groups, encoder.dim}.validate();
  }

  EncoderConfig encoder_config() const {
    return {encoder.dim, patch_stride(), encoder.heads, encoder.table_size, ffn_ratio};
  }

  AggregatorConfig aggregator_config(std::size_t embed_dim) const {
    return {embed_dim, d_f, d_g, heads, window, n_b, ffn_ratio, class_layers};
  }

  DecoderConfig decoder_config(std::size_t guidance_dim) const {
    return {d_f, n_u, gn_groups, guidance_dim};
  }
};

using json = nlohmann::json;

inline json to_json(const RunConfig& c) {
  return json{{"d_f", c.d_f},
              {"n_b", c.n_b},
              {"n_u", c.n_u},
              {"heads", c.heads},
              {"window", c.window},
              {"cost_hw", c.cost_hw},
              {"train_res", c.train_res},
              {"topk", c.topk},
              {"d_g", c.d_g},
              {"ffn_ratio", c.ffn_ratio},
              {"class_layers", c.class_layers},
              {"gn_groups", c.gn_groups},
              {"mode", to_string(c.mode)},
              {"finetune", to_string(c.finetune)},
              {"seed", c.seed},
              {"lr_module", c.lr_module},
              {"lr_encoder", c.lr_encoder},
              {"weight_decay", c.weight_decay},
              {"betas", {c.beta1, c.beta2}},
              {"adam_eps", c.adam_eps},
              {"batch_size", c.batch_size},
              {"patch",
               {{"n_p", c.patch.n_p},
                {"size", c.patch.size},
                {"overlap", c.patch.overlap},
                {"include_global", c.patch.include_global}}},
              {"encoder",
               {{"dim", c.encoder.dim},
                {"heads", c.encoder.heads},
                {"table_size", c.encoder.table_size}}}};
}

namespace detail {

template <class V>
void read_key(const json& j, const char* key, V& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->template get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
  }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known,
                           const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw ConfigError("unknown config key '" + where + k + "'");
  }
}

}  // namespace detail

/// Overlays the keys present in `j` on `base`.
inline RunConfig from_json(const json& j, RunConfig c = {}) {
  using detail::read_key;
  detail::reject_unknown(j,
                         {"d_f", "n_b", "n_u", "heads", "window", "cost_hw", "train_res", "topk",
                          "d_g", "ffn_ratio", "class_layers", "gn_groups", "mode", "finetune",
                          "seed", "lr_module", "lr_encoder", "weight_decay", "betas", "adam_eps",
                          "batch_size", "patch", "encoder"},
                         "");
  read_key(j, "d_f", c.d_f);
  read_key(j, "n_b", c.n_b);
  read_key(j, "n_u", c.n_u);
  read_key(j, "heads", c.heads);
  read_key(j, "window", c.window);
  read_key(j, "cost_hw", c.cost_hw);
  read_key(j, "train_res", c.train_res);
  read_key(j, "topk", c.topk);
  read_key(j, "d_g", c.d_g);
  read_key(j, "ffn_ratio", c.ffn_ratio);
  read_key(j, "class_layers", c.class_layers);
  read_key(j, "gn_groups", c.gn_groups);
  std::string s;
  if (j.contains("mode")) {
    read_key(j, "mode", s);
    c.mode = parse_mode(s);
  }
  if (j.contains("finetune")) {
    read_key(j, "finetune", s);
    c.finetune = parse_preset(s);
  }
  read_key(j, "seed", c.seed);
  read_key(j, "lr_module", c.lr_module);
  read_key(j, "lr_encoder", c.lr_encoder);
  read_key(j, "weight_decay", c.weight_decay);
  if (j.contains("betas")) {
    std::vector<double> b;
    read_key(j, "betas", b);
    if (b.size() != 2) throw ConfigError("betas must have two entries");
    c.beta1 = b[0];
    c.beta2 = b[1];
  }
  read_key(j, "adam_eps", c.adam_eps);
  read_key(j, "batch_size", c.batch_size);
  if (auto it = j.find("patch"); it != j.end()) {
    detail::reject_unknown(*it, {"n_p", "size", "overlap", "include_global"}, "patch.");
    read_key(*it, "n_p", c.patch.n_p);
    read_key(*it, "size", c.patch.size);
    read_key(*it, "overlap", c.patch.overlap);
    read_key(*it, "include_global", c.patch.include_global);
  }
  if (auto it = j.find("encoder"); it != j.end()) {
    detail::reject_unknown(*it, {"dim", "heads", "table_size"}, "encoder.");
    read_key(*it, "dim", c.encoder.dim);
    read_key(*it, "heads", c.encoder.heads);
    read_key(*it, "table_size", c.encoder.table_size);
  }
  return c;
}

/// Applies CATSEG_SEED, if set, over the configured seed.
inline void apply_env_seed(RunConfig& c) {
  if (const char* s = std::getenv("CATSEG_SEED"); s && *s) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (*end != '\0') throw ConfigError(std::string("CATSEG_SEED is not an integer: ") + s);
    c.seed = v;
  }
}

/// Loads, overlays on the defaults, applies the environment seed and validates.
inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  RunConfig c = from_json(j);
  apply_env_seed(c);
  c.validate();
  return c;
}

}  // namespace catseg
