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

// Finite-difference verification of every backward rule and of the composed
// model. Each op is checked in f64 on random small shapes with a random
// linear read-out sum(w * op(...)) as the scalar.

#include <functional>
#include <string>
#include <vector>

#include "catseg/training.hpp"

namespace catseg {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  std::size_t cases = 0;
  std::size_t skipped = 0;
};

namespace gradcheck_detail {

using ag::Var;
using VarSpan = std::span<const Var<double>>;
using Builder = std::function<Var<double>(ag::Tape<double>&, VarSpan)>;

struct Case {
  std::vector<Tensor<double>> inputs;
  Builder build;
};

inline Tensor<double> rand_t(Rng& rng, Shape s, double lo = -1, double hi = 1) {
  return rng.uniform_tensor<double>(std::move(s), lo, hi);
}

/// Values bounded away from zero, for ops with a kink at the origin.
inline Tensor<double> off_zero(Rng& rng, Shape s) {
  auto t = rand_t(rng, std::move(s), 0.1, 1.0);
  for (auto& v : t.data()) v = rng.unit() < 0.5 ? -v : v;
  return t;
}

inline std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

/// Appends a random read-out so the scalar depends on every output entry.
inline Builder readout(std::function<Var<double>(ag::Tape<double>&, VarSpan)> f, std::uint64_t seed) {
  return [f, seed](ag::Tape<double>& t, VarSpan v) {
    auto y = f(t, v);
    Rng r(seed);
    return ag::weighted_sum(y, r.uniform_tensor<double>(y.shape(), -1, 1));
  };
}

inline Case make_case(const std::string& op, Rng& rng) {
  const std::uint64_t rs = rng.next();
  auto R = [&](auto f) { return readout(f, rs); };
  if (op == "matmul") {
    const std::size_t m = dim(rng, 1, 5), k = dim(rng, 1, 5), n = dim(rng, 1, 5);
    return {{rand_t(rng, {m, k}), rand_t(rng, {k, n})},
            R([](auto&, VarSpan v) { return ag::matmul(v[0], v[1]); })};
  }
  if (op == "bmm") {
    const std::size_t b = dim(rng, 1, 3), m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
    const bool ta = rng.below(2), tb = rng.below(2);
    return {{rand_t(rng, ta ? Shape{b, k, m} : Shape{b, m, k}),
             rand_t(rng, tb ? Shape{b, n, k} : Shape{b, k, n})},
            R([ta, tb](auto&, VarSpan v) { return ag::bmm(v[0], v[1], ta, tb); })};
  }
  if (op == "add" || op == "mul") {
    const Shape s{dim(rng, 1, 4), dim(rng, 1, 4)};
    if (op == "add") return {{rand_t(rng, s), rand_t(rng, s)}, R([](auto&, VarSpan v) { return ag::add(v[0], v[1]); })};
    return {{rand_t(rng, s), rand_t(rng, s)}, R([](auto&, VarSpan v) { return ag::mul(v[0], v[1]); })};
  }
  if (op == "scale") {
    const double a = rng.uniform(-2, 2);
    return {{rand_t(rng, {dim(rng, 1, 4), dim(rng, 1, 4)})},
            R([a](auto&, VarSpan v) { return ag::scale(v[0], a); })};
  }
  if (op == "add_bias") {
    const std::size_t n = dim(rng, 1, 5);
    return {{rand_t(rng, {dim(rng, 1, 3), dim(rng, 1, 3), n}), rand_t(rng, {n})},
            R([](auto&, VarSpan v) { return ag::add_bias(v[0], v[1]); })};
  }
  if (op == "add_periodic") {
    const std::size_t n = dim(rng, 1, 4), reps = dim(rng, 1, 3);
    auto c = rand_t(rng, {n});
    return {{rand_t(rng, {reps, n})}, R([c](auto&, VarSpan v) { return ag::add_periodic(v[0], c); })};
  }
  if (op == "relu" || op == "gelu" || op == "elu1") {
    const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
    auto x = op == "relu" ? off_zero(rng, s) : rand_t(rng, s, -3, 3);
    if (op == "relu") return {{x}, R([](auto&, VarSpan v) { return ag::relu(v[0]); })};
    if (op == "gelu") return {{x}, R([](auto&, VarSpan v) { return ag::gelu(v[0]); })};
    return {{off_zero(rng, s)}, R([](auto&, VarSpan v) { return ag::elu1(v[0]); })};
  }
  if (op == "softmax") {
    return {{rand_t(rng, {dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 6)}, -3, 3)},
            R([](auto&, VarSpan v) { return ag::softmax(v[0]); })};
  }
  if (op == "layer_norm") {
    const std::size_t d = dim(rng, 2, 6);
    return {{rand_t(rng, {dim(rng, 1, 4), d}), rand_t(rng, {d}), rand_t(rng, {d})},
            R([](auto&, VarSpan v) { return ag::layer_norm(v[0], v[1], v[2]); })};
  }
  if (op == "group_norm") {
    const std::size_t g = dim(rng, 1, 3), c = g * dim(rng, 1, 2);
    return {{rand_t(rng, {dim(rng, 1, 2), c, dim(rng, 1, 3), dim(rng, 2, 3)}), rand_t(rng, {c}),
             rand_t(rng, {c})},
            R([g](auto&, VarSpan v) { return ag::group_norm(v[0], g, v[1], v[2]); })};
  }
  if (op == "conv2d") {
    const std::size_t ci = dim(rng, 1, 3), co = dim(rng, 1, 3), k = dim(rng, 1, 3);
    const std::size_t stride = dim(rng, 1, 2), pad = rng.below(2);
    const std::size_t h = dim(rng, k, 5), w = dim(rng, k, 5);
    return {{rand_t(rng, {dim(rng, 1, 2), ci, h, w}), rand_t(rng, {co, ci, k, k}), rand_t(rng, {co})},
            R([stride, pad](auto&, VarSpan v) { return ag::conv2d(v[0], v[1], v[2], stride, pad); })};
  }
  if (op == "transposed_conv2d") {
    const std::size_t ci = dim(rng, 1, 3), co = dim(rng, 1, 3), k = dim(rng, 1, 4);
    const std::size_t stride = dim(rng, 1, 4);
    return {{rand_t(rng, {ci, dim(rng, 1, 3), dim(rng, 1, 3)}), rand_t(rng, {ci, co, k, k}),
             rand_t(rng, {co})},
            R([stride](auto&, VarSpan v) { return ag::transposed_conv2d(v[0], v[1], v[2], stride); })};
  }
  if (op == "bilinear_resize") {
    const std::size_t ho = dim(rng, 1, 7), wo = dim(rng, 1, 7);
    return {{rand_t(rng, {dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 5), dim(rng, 1, 5)})},
            R([ho, wo](auto&, VarSpan v) { return ag::bilinear_resize(v[0], ho, wo); })};
  }
  if (op == "concat") {
    const std::size_t axis = rng.below(2);
    Shape a{dim(rng, 1, 3), dim(rng, 1, 3)}, b = a;
    b[axis] = dim(rng, 1, 3);
    return {{rand_t(rng, a), rand_t(rng, b)},
            R([axis](auto&, VarSpan v) { return ag::concat<double>({v[0], v[1]}, axis); })};
  }
  if (op == "gather") {
    const std::size_t n = dim(rng, 1, 8), m = dim(rng, 1, 10);
    std::vector<std::size_t> idx(m);
    for (auto& i : idx) i = rng.below(n);
    return {{rand_t(rng, {n})}, R([idx, m](auto&, VarSpan v) { return ag::gather(v[0], idx, {m}); })};
  }
  if (op == "reshape") {
    const std::size_t a = dim(rng, 1, 4), b = dim(rng, 1, 4);
    return {{rand_t(rng, {a, b})}, R([a, b](auto&, VarSpan v) { return ag::reshape(v[0], {b, a}); })};
  }
  if (op == "sum") {
    return {{rand_t(rng, {dim(rng, 1, 4), dim(rng, 1, 4)})},
            [](auto&, VarSpan v) { return ag::scale(ag::sum(v[0]), 0.7); }};
  }
  if (op == "linear_attention") {
    const std::size_t b = dim(rng, 1, 2), n = dim(rng, 2, 6), h = dim(rng, 1, 4), dv = dim(rng, 1, 4);
    return {{rand_t(rng, {b, n, h}, 0.1, 2), rand_t(rng, {b, n, h}, 0.1, 2), rand_t(rng, {b, n, dv})},
            R([](auto&, VarSpan v) { return ag::linear_attention_core(v[0], v[1], v[2]); })};
  }
  if (op == "cosine_cost") {
    const std::size_t d = dim(rng, 2, 5);
    return {{rand_t(rng, {dim(rng, 1, 3), dim(rng, 1, 3), d}), rand_t(rng, {dim(rng, 1, 4), d})},
            R([](auto&, VarSpan v) { return ag::cosine_cost(v[0], v[1]); })};
  }
  if (op == "bce_loss") {
    const Shape s{dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
    Tensor<double> y(s);
    for (auto& v : y.data()) v = static_cast<double>(rng.below(2));
    return {{rand_t(rng, s, -4, 4)}, [y](auto&, VarSpan v) { return ag::bce_loss(v[0], y); }};
  }
  throw InternalError("no gradient check case for op '" + op + "'");
}

}  // namespace gradcheck_detail

/// Checks one op on `cases` random shapes.
inline GradCheckResult check_op(const std::string& op, std::size_t cases = 10, std::uint64_t seed = 7) {
  Rng rng(seed ^ fnv1a64(op));
  GradCheckResult r{op, 0.0, cases};
  for (std::size_t i = 0; i < cases; ++i) {
    auto c = gradcheck_detail::make_case(op, rng);
    std::size_t skipped = 0;
    r.max_rel_error =
        std::max(r.max_rel_error, ag::grad_check(c.build, c.inputs, 1e-5, 0, &skipped));
    r.skipped += skipped;
  }
  return r;
}

inline std::vector<GradCheckResult> check_all_ops(std::size_t cases = 10, std::uint64_t seed = 7) {
  std::vector<GradCheckResult> out;
  for (auto op : ag::kDifferentiableOps) out.push_back(check_op(std::string(op), cases, seed));
  return out;
}

/// Geometry for composite checks: 16x16 images on a 4x4 cost grid, d=8,
/// d_F=8, two classes. Two channels per norm group keep every conv bias
/// observable after normalization.
inline RunConfig gradcheck_config() {
  RunConfig c = RunConfig::tiny();
  c.d_f = 8;
  c.d_g = 4;
  c.heads = 2;
  c.window = 2;
  c.gn_groups = 2;
  c.cost_hw = 4;
  c.train_res = 16;
  c.patch = {1, 16, 0, false};
  c.encoder = {8, 2, 64};
  return c;
}

namespace gradcheck_detail {

/// Runs `loss(bind)` with every parameter of `store` (optionally filtered)
/// perturbed by the finite-difference checker.
template <class LossFn>
double check_store(const ParameterStore<double>& store, LossFn&& loss, std::size_t max_elements,
                   double h, std::size_t* skipped) {
  std::vector<std::string> names;
  std::vector<Tensor<double>> values;
  for (const auto& p : store.all()) {
    names.push_back(p.name);
    values.push_back(p.value);
  }
  return ag::grad_check(
      [&](ag::Tape<double>& tape, VarSpan vars) {
        Binder<double> bind(tape, names, vars);
        return loss(bind);
      },
      values, h, max_elements, skipped);
}

}  // namespace gradcheck_detail

/// Aggregation stack alone, with the cost features and embeddings as inputs.
inline GradCheckResult check_aggregation(std::uint64_t seed = 11, std::size_t max_elements = 6,
                                         double h = 1e-4) {
  const RunConfig c = gradcheck_config();
  auto agg = AggregatorParams<double>::create(c.aggregator_config(8), seed);
  Rng rng(seed);
  const auto f0 = rng.uniform_tensor<double>({4, 4, 3, c.d_f}, -1, 1);
  const auto dv = rng.uniform_tensor<double>({4, 4, 8}, -1, 1);
  const auto dl = rng.uniform_tensor<double>({3, 8}, -1, 1);
  const auto w = rng.uniform_tensor<double>({4, 4, 3, c.d_f}, -1, 1);
  ParameterStore<double> store = agg.store;
  store.add("input.f", f0, Tower::module, Role::other);
  store.add("input.dv", dv, Tower::module, Role::other);
  store.add("input.dl", dl, Tower::module, Role::other);
  std::size_t skipped = 0;
  const double e = gradcheck_detail::check_store(
      store,
      [&](const Binder<double>& b) {
        auto y = aggregate_stack(b, agg.config, b("input.f"), b("input.dv"), b("input.dl"));
        return ag::weighted_sum(y, w);
      },
      max_elements, h, &skipped);
  return {"aggregate_stack", e, 1, skipped};
}

/// Decoder alone: aggregated features plus guidance grids as inputs.
inline GradCheckResult check_decoder(std::uint64_t seed = 13, std::size_t max_elements = 6,
                                     double h = 1e-4) {
  const RunConfig c = gradcheck_config();
  auto dec = DecoderParams<double>::create(c.decoder_config(8), seed);
  Rng rng(seed);
  ParameterStore<double> store = dec.store;
  store.add("input.f", rng.uniform_tensor<double>({4, 4, 2, c.d_f}, -1, 1), Tower::module, Role::other);
  store.add("input.g1", rng.uniform_tensor<double>({4, 4, 8}, -1, 1), Tower::module, Role::other);
  store.add("input.g2", rng.uniform_tensor<double>({4, 4, 8}, -1, 1), Tower::module, Role::other);
  const auto w = rng.uniform_tensor<double>({2, 16, 16}, -1, 1);
  std::size_t skipped = 0;
  const double e = gradcheck_detail::check_store(
      store,
      [&](const Binder<double>& b) {
        auto y = decode(b, dec.config, b("input.f"), {b("input.g1"), b("input.g2")}, 16, 16);
        return ag::weighted_sum(y, w);
      },
      max_elements, h, &skipped);
  return {"decoder", e, 1, skipped};
}

/// Cost volume, aggregation, decoder and BCE against a fixed index map,
/// differentiated with respect to every module parameter and to the
/// embeddings and guidance grids.
inline GradCheckResult check_full_model(Mode mode = Mode::cost, std::uint64_t seed = 17,
                                        std::size_t max_elements = 4, double h = 1e-4) {
  RunConfig c = gradcheck_config();
  c.mode = mode;
  c.seed = seed;
  const std::size_t d = c.encoder.dim;
  Model<double> model(c, {d, d, false});
  Rng rng(seed);
  ParameterStore<double> store = model.store();
  store.add("input.dv", rng.uniform_tensor<double>({4, 4, d}, -1, 1), Tower::module, Role::other);
  store.add("input.dl", rng.uniform_tensor<double>({2, d}, -1, 1), Tower::module, Role::other);
  store.add("input.g1", rng.uniform_tensor<double>({4, 4, d}, -1, 1), Tower::module, Role::other);
  store.add("input.g2", rng.uniform_tensor<double>({4, 4, d}, -1, 1), Tower::module, Role::other);
  SegmentationMap target{16, 16, std::vector<std::uint32_t>(256), {"cat", "dog"}};
  for (std::size_t p = 0; p < 256; ++p) target.indices[p] = (p % 16 < 8) ? 0 : 1;
  std::size_t skipped = 0;
  const double e = gradcheck_detail::check_store(
      store,
      [&](const Binder<double>& b) {
        auto r = model.forward(b, b("input.dv"), b("input.dl"), {b("input.g1"), b("input.g2")},
                               16, 16);
        return ag::bce_loss(r.logits, one_hot<double>(target, r.selected));
      },
      max_elements, h, &skipped);
  return {std::string("forward+bce (") + to_string(mode) + ")", e, 1, skipped};
}

/// Toy image and text encoders under a random read-out of the dense grid,
/// both guidance grids and the text rows.
inline GradCheckResult check_encoders(std::uint64_t seed = 19, std::size_t max_elements = 4,
                                      double h = 1e-4) {
  const RunConfig c = gradcheck_config();
  Model<double> model = Model<double>::toy(c);
  ParameterStore<double> enc;
  for (const auto& p : model.store().all()) {
    if (p.name.rfind("encoder.", 0) == 0) enc.add(p.name, p.value, p.tower, p.role);
  }
  Rng rng(seed);
  const auto image = rng.uniform_tensor<double>({3, 16, 16}, 0, 1);
  const std::vector<std::string> names{"cat", "dog"};
  const std::size_t d = c.encoder.dim;
  const auto w_dense = rng.uniform_tensor<double>({4, 4, d}, -1, 1);
  const auto w_g1 = rng.uniform_tensor<double>({4, 4, d}, -1, 1);
  const auto w_g2 = rng.uniform_tensor<double>({4, 4, d}, -1, 1);
  const auto w_text = rng.uniform_tensor<double>({2, d}, -1, 1);
  std::size_t skipped = 0;
  const double e = gradcheck_detail::check_store(
      enc,
      [&](const Binder<double>& b) {
        auto im = encode_image(b, model.encoder_config(), b.tape().constant(image));
        auto tx = encode_text(b, model.encoder_config(), names);
        return ag::add(ag::add(ag::weighted_sum(im.dense, w_dense), ag::weighted_sum(tx, w_text)),
                       ag::add(ag::weighted_sum(im.guidance[0], w_g1),
                               ag::weighted_sum(im.guidance[1], w_g2)));
      },
      max_elements, h, &skipped);
  return {"toy encoders", e, 1, skipped};
}

inline std::vector<GradCheckResult> check_composites() {
  return {check_aggregation(), check_decoder(), check_encoders(), check_full_model(Mode::cost),
          check_full_model(Mode::feature)};
}

}  // namespace catseg
