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

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "catseg/autograd.hpp"
#include "catseg/rng.hpp"

namespace catseg {

/// Which sub-network owns a parameter. `module` is the aggregator, decoder
/// and cost embedding; the towers are the (toy) vision-language encoders.
enum class Tower { image, text, module };

/// Structural role inside its tower; fine-tuning presets select on these.
enum class Role { query, key, value, output, ffn, norm, embedding, projection, other };

inline const char* to_string(Tower t) {
  switch (t) {
    case Tower::image: return "image";
    case Tower::text: return "text";
    case Tower::module: return "module";
  }
  return "?";
}

inline const char* to_string(Role r) {
  switch (r) {
    case Role::query: return "query";
    case Role::key: return "key";
    case Role::value: return "value";
    case Role::output: return "output";
    case Role::ffn: return "ffn";
    case Role::norm: return "norm";
    case Role::embedding: return "embedding";
    case Role::projection: return "projection";
    case Role::other: return "other";
  }
  return "?";
}

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tower tower;
  Role role;
};

/// Ordered, named collection of every learnable tensor of a model.
template <class T>
class ParameterStore {
 public:
  void add(std::string name, Tensor<T> value, Tower tower, Role role) {
    if (index_.count(name)) throw InternalError("duplicate parameter name " + name);
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(value), tower, role});
  }

  const Tensor<T>& get(const std::string& name) const { return find(name).value; }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Parameter<T>&>(std::as_const(*this).find(name)).value;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<Parameter<T>>& all() const noexcept { return params_; }
  std::vector<Parameter<T>>& all() noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  const Parameter<T>& find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InternalError("unknown parameter " + name);
    return params_[it->second];
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Initialization draws: weights uniform in +-1/sqrt(fan_in), biases zero,
/// norm gains one. Values are drawn in double so f32 and f64 models built
/// from the same seed agree up to rounding.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <class T>
  Tensor<T> uniform(Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return rng_.uniform_tensor<T>(std::move(shape), -bound, bound);
  }

  Rng& rng() { return rng_; }

 private:
  Rng rng_;
};

/// Resolves parameter names to tape leaves for one forward pass.
template <class T>
class Binder {
 public:
  /// Every parameter of `store` becomes a leaf; `trainable(name)` decides
  /// whether it receives a gradient.
  template <class Pred>
  Binder(ag::Tape<T>& tape, const ParameterStore<T>& store, Pred&& trainable) : tape_(&tape) {
    for (const auto& p : store.all()) {
      vars_.emplace(p.name, tape.parameter(p.name, p.value, trainable(p.name)));
    }
  }

  /// Binds explicitly supplied vars (used by gradient checks).
  Binder(ag::Tape<T>& tape, const std::vector<std::string>& names,
         std::span<const ag::Var<T>> vars)
      : tape_(&tape) {
    for (std::size_t i = 0; i < names.size(); ++i) vars_.emplace(names[i], vars[i]);
  }

  ag::Var<T> operator()(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw InternalError("parameter not bound: " + name);
    return it->second;
  }

  ag::Tape<T>& tape() const { return *tape_; }

 private:
  ag::Tape<T>* tape_;
  std::unordered_map<std::string, ag::Var<T>> vars_;
};

}  // namespace catseg
