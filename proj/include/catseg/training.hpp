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

// Per-pixel binary cross-entropy, AdamW with two learning-rate groups,
// fine-tuning partitions over the encoder parameters, and the training loop.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "catseg/inference.hpp"

namespace catseg {

inline constexpr double kProbClamp = 1e-7;

namespace detail {

template <class T>
bool is_sentinel_row(const Tensor<T>& logits, std::size_t c, std::size_t plane) {
  for (std::size_t p = 0; p < plane; ++p) {
    if (static_cast<double>(logits[c * plane + p]) > kSentinelLogit / 2) return false;
  }
  return true;
}

template <class T>
void check_bce_inputs(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    throw DimensionError("bce_loss: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  }
  if (logits.rank() != 3) throw DimensionError("bce_loss: expected [N,H,W], got " + shape_str(logits.shape()));
  for (T y : targets.values()) {
    if (y != T{0} && y != T{1}) throw ContractError("bce_loss: targets must be 0 or 1");
  }
}

inline double bce_term(double logit, double y) {
  const double p = std::clamp(1.0 / (1.0 + std::exp(-logit)), kProbClamp, 1.0 - kProbClamp);
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

}  // namespace detail

/// Mean per-pixel BCE over classes that were not dropped (sentinel rows are
/// skipped). Returns 0 when every row is a sentinel.
template <class T>
double bce_loss(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::check_bce_inputs(logits, targets);
  const std::size_t n = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < n; ++c) {
    if (detail::is_sentinel_row(logits, c, plane)) continue;
    for (std::size_t p = 0; p < plane; ++p) {
      sum += detail::bce_term(logits[c * plane + p], targets[c * plane + p]);
    }
    count += plane;
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

namespace ag {

/// Mean BCE over all entries of logits [N,H,W]. The gradient is
/// (sigmoid(x) - y) / count; the probability clamp only guards the log.
template <class T>
Var<T> bce_loss(Var<T> logits, const Tensor<T>& targets) {
  catseg::detail::check_bce_inputs(logits.value(), targets);
  const auto& x = logits.value();
  const std::size_t count = x.size();
  double sum = 0;
  for (std::size_t i = 0; i < count; ++i) sum += catseg::detail::bce_term(x[i], targets[i]);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(sum / static_cast<double>(count)));
  return logits.tape->record(
      "bce_loss", {logits.id}, std::move(out),
      [x, targets, count](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        if (!gi[0]) return;
        const double scale = static_cast<double>(g[0]) / static_cast<double>(count);
        for (std::size_t i = 0; i < count; ++i) {
          const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(x[i])));
          (*gi[0])[i] += static_cast<T>((p - static_cast<double>(targets[i])) * scale);
        }
      });
}

}  // namespace ag

/// One-hot targets [K,H,W] for the listed classes of an index map.
template <class T>
Tensor<T> one_hot(const SegmentationMap& map, const std::vector<std::size_t>& classes) {
  map.validate();
  const std::size_t plane = map.height * map.width;
  Tensor<T> t({classes.size(), map.height, map.width});
  for (std::size_t k = 0; k < classes.size(); ++k)
    for (std::size_t p = 0; p < plane; ++p) {
      if (map.indices[p] == classes[k]) t[k * plane + p] = T{1};
    }
  return t;
}

// ------------------------------------------------------------------ AdamW

struct AdamWGroup {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
};

/// Per-parameter moments and the shared step counter.
struct OptimizerState {
  std::map<std::string, Moments> moments;
  std::uint64_t step = 0;
};

/// Decoupled-weight-decay Adam update of one tensor at step t (1-based):
/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
template <class T>
void adamw_update(Tensor<T>& param, const Tensor<T>* grad, Moments& mv, std::uint64_t t,
                  const AdamWGroup& g) {
  const std::size_t n = param.size();
  if (grad && grad->size() != n) throw DimensionError("adamw: gradient/parameter size mismatch");
  if (mv.m.size() != n) {
    mv.m.assign(n, 0.0);
    mv.v.assign(n, 0.0);
  }
  const double c1 = 1.0 - std::pow(g.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(g.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = grad ? static_cast<double>((*grad)[i]) : 0.0;
    mv.m[i] = g.beta1 * mv.m[i] + (1.0 - g.beta1) * gi;
    mv.v[i] = g.beta2 * mv.v[i] + (1.0 - g.beta2) * gi * gi;
    const double mh = mv.m[i] / c1, vh = mv.v[i] / c2;
    const double th = static_cast<double>(param[i]);
    param[i] = static_cast<T>(th - g.lr * (mh / (std::sqrt(vh) + g.eps) + g.weight_decay * th));
  }
}

/// One optimizer step over the named parameters. Parameters without an
/// entry in `grads` are treated as having zero gradient.
template <class T, class GroupOf>
void adamw_step(ParameterStore<T>& store, const std::vector<std::string>& names,
                const ag::GradientMap<T>& grads, OptimizerState& state, GroupOf&& group_of) {
  ++state.step;
  for (const auto& name : names) {
    auto it = grads.find(name);
    adamw_update(store.get(name), it == grads.end() ? nullptr : &it->second,
                 state.moments[name], state.step, group_of(name));
  }
}

// ---------------------------------------------------------- partitions

struct Partition {
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
};

/// Whether a parameter trains under `preset`. Module (aggregator, decoder,
/// cost embedding) parameters always train.
inline bool preset_trains(FinetunePreset preset, Tower tower, Role role) {
  if (tower == Tower::module) return true;
  const bool q = role == Role::query, k = role == Role::key, v = role == Role::value,
             o = role == Role::output;
  switch (preset) {
    case FinetunePreset::freeze: return false;
    case FinetunePreset::full: return true;
    case FinetunePreset::attn: return q || k || v || o;
    case FinetunePreset::qk: return q || k;
    case FinetunePreset::kv: return k || v;
    case FinetunePreset::qv_image: return tower == Tower::image && (q || v);
    case FinetunePreset::qv_text: return tower == Tower::text && (q || v);
    case FinetunePreset::qv_both: return q || v;
  }
  return false;
}

template <class T>
Partition partition_parameters(const ParameterStore<T>& store, FinetunePreset preset) {
  Partition p;
  for (const auto& prm : store.all()) {
    (preset_trains(preset, prm.tower, prm.role) ? p.trainable : p.frozen).push_back(prm.name);
  }
  return p;
}

template <class T>
Partition partition_parameters(const ParameterStore<T>& store, const std::string& preset) {
  return partition_parameters(store, parse_preset(preset));
}

// ---------------------------------------------------------- training loop

/// One training example: an image for the toy encoders or precomputed
/// embeddings, plus the ground-truth index map at output resolution.
template <class T>
struct TrainSample {
  std::optional<Tensor<T>> image;        // [3,H,W]
  std::optional<EmbeddingSet<T>> embeddings;
  std::vector<std::string> class_names;
  SegmentationMap target;
};

struct TrainResult {
  std::vector<double> losses;  // mean batch loss per step
};

template <class T>
class Trainer {
 public:
  Trainer(Model<T>& model, FinetunePreset preset) : model_(&model) {
    const auto part = partition_parameters(model.store(), preset);
    trainable_ = part.trainable;
    for (const auto& n : trainable_) train_set_.insert(n);
  }

  const std::vector<std::string>& trainable() const { return trainable_; }

  /// Loss on one sample, recorded on `bind`'s tape.
  ag::Var<T> sample_loss(const Binder<T>& bind, const TrainSample<T>& s) const {
    const Model<T>& m = *model_;
    auto& tape = bind.tape();
    ag::Var<T> dv, dl;
    std::vector<ag::Var<T>> guidance;
    if (s.image) {
      auto enc = encode_image(bind, m.encoder_config(), tape.constant(*s.image));
      dv = enc.dense;
      guidance = enc.guidance;
      dl = encode_text(bind, m.encoder_config(), s.class_names);
    } else if (s.embeddings) {
      dv = tape.constant(s.embeddings->image);
      dl = tape.constant(s.embeddings->text);
      for (const auto& g : s.embeddings->guidance) guidance.push_back(tape.constant(g));
    } else {
      throw ContractError("training sample has neither an image nor embeddings");
    }
    auto r = m.forward(bind, dv, dl, guidance, s.target.height, s.target.width);
    return ag::bce_loss(r.logits, one_hot<T>(s.target, r.selected));
  }

  /// One optimizer step on `batch`; returns the mean loss.
  double step(const std::vector<const TrainSample<T>*>& batch) {
    ag::Tape<T> tape;
    Binder<T> bind(tape, model_->store(), [&](const std::string& n) { return train_set_.count(n) > 0; });
    std::optional<ag::Var<T>> total;
    for (const auto* s : batch) {
      auto l = sample_loss(bind, *s);
      total = total ? ag::add(*total, l) : l;
    }
    auto loss = ag::scale(*total, T{1} / static_cast<T>(batch.size()));
    const double value = static_cast<double>(loss.value().item());
    if (!std::isfinite(value)) {
      throw NumericalError("non-finite loss at step " + std::to_string(state_.step + 1));
    }
    const auto grads = tape.backward(loss);
    const RunConfig& c = model_->config();
    const AdamWGroup module{c.lr_module, c.beta1, c.beta2, c.adam_eps, c.weight_decay};
    const AdamWGroup encoder{c.lr_encoder, c.beta1, c.beta2, c.adam_eps, c.weight_decay};
    const auto& store = model_->store();
    adamw_step(model_->store(), trainable_, grads, state_, [&](const std::string& n) {
      return store.find(n).tower == Tower::module ? module : encoder;
    });
    return value;
  }

  /// Runs `steps` steps cycling through `data` in order, batch_size samples
  /// per step.
  TrainResult run(const std::vector<TrainSample<T>>& data, std::size_t steps,
                  const std::function<void(std::size_t, double)>& on_step = {}) {
    if (data.empty()) throw ContractError("training set is empty");
    const std::size_t bs = model_->config().batch_size;
    TrainResult r;
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<const TrainSample<T>*> batch;
      for (std::size_t b = 0; b < bs; ++b) batch.push_back(&data[cursor++ % data.size()]);
      r.losses.push_back(step(batch));
      if (on_step) on_step(s, r.losses.back());
    }
    return r;
  }

  const OptimizerState& state() const { return state_; }

 private:
  Model<T>* model_;
  std::vector<std::string> trainable_;
  std::set<std::string> train_set_;
  OptimizerState state_;
};

template <class T>
TrainResult train(Model<T>& model, const std::vector<TrainSample<T>>& data, std::size_t steps,
                  const std::function<void(std::size_t, double)>& on_step = {}) {
  Trainer<T> t(model, model.config().finetune);
  return t.run(data, steps, on_step);
}

}  // namespace catseg
