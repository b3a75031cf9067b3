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

// Tape-based reverse-mode differentiation. A Tape is rebuilt for every
// forward pass; nodes are appended in execution order, so node index order is
// a valid topological order and backward simply walks it in reverse.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "catseg/ops.hpp"
#include "catseg/rng.hpp"

namespace catseg::ag {

template <class T>
class Tape;

/// Handle to a value recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Parameter name -> dL/dparam, same shape as the parameter.
template <class T>
using GradientMap = std::map<std::string, Tensor<T>>;

template <class T>
class Tape {
 public:
  /// Receives dL/dout and one slot per input; a slot is null when that input
  /// does not need a gradient, otherwise it points at an accumulator the rule
  /// adds into.
  using BackwardFn =
      std::function<void(const Tensor<T>& grad_out, std::span<Tensor<T>* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{"constant", {}, std::move(value), false, {}, {}});
    return {this, nodes_.size() - 1};
  }

  /// Leaf for a named parameter. Frozen parameters behave as constants and
  /// never receive a gradient. Binding the same name twice returns the first
  /// leaf.
  Var<T> parameter(const std::string& name, const Tensor<T>& value, bool trainable) {
    if (auto it = params_.find(name); it != params_.end()) return {this, it->second};
    nodes_.push_back(Node{"parameter", {}, value, trainable, {}, name});
    params_.emplace(name, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  Var<T> record(std::string_view op, std::vector<std::size_t> inputs, Tensor<T> value,
                BackwardFn fn) {
    bool rg = false;
    for (std::size_t i : inputs) {
      if (i >= nodes_.size()) throw InternalError("tape input recorded out of order");
      rg = rg || nodes_[i].requires_grad;
    }
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), rg,
                          rg ? std::move(fn) : BackwardFn{}, {}});
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }

  /// Hash of the active/inactive pattern of every relu on the tape. Two
  /// evaluations with equal signatures lie on the same linear piece.
  std::uint64_t kink_signature() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& n : nodes_) {
      if (n.op != "relu") continue;
      for (std::size_t i = 0; i < n.value.size(); ++i) {
        h = (h ^ (n.value[i] > T{0} ? 0x9eu : 0x3bu)) * 1099511628211ull;
      }
    }
    return h;
  }

  /// Gradients of the scalar `loss` for every trainable parameter that it
  /// depends on.
  GradientMap<T> backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
    const Node& ln = nodes_.at(loss.id);
    if (ln.value.size() != 1) {
      throw ContractError("backward: loss must be scalar, got " + shape_str(ln.value.shape()));
    }
    GradientMap<T> out;
    if (!ln.requires_grad) return out;
    std::vector<std::optional<Tensor<T>>> grads(loss.id + 1);
    grads[loss.id] = Tensor<T>::full(ln.value.shape(), T{1});
    std::vector<Tensor<T>*> slots;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !grads[id]) continue;
      if (!n.param_name.empty()) {
        auto [it, fresh] = out.emplace(n.param_name, std::move(*grads[id]));
        if (!fresh) throw InternalError("duplicate parameter leaf " + n.param_name);
        continue;
      }
      if (!n.backward) {
        throw InternalError("no backward rule registered for op '" + std::string(n.op) + "'");
      }
      slots.assign(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t in = n.inputs[k];
        if (!nodes_[in].requires_grad) continue;
        if (!grads[in]) grads[in] = Tensor<T>(nodes_[in].value.shape());
        slots[k] = &*grads[in];
      }
      n.backward(*grads[id], slots);
      grads[id].reset();
    }
    return out;
  }

 private:
  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    bool requires_grad;
    BackwardFn backward;
    std::string param_name;
  };

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> params_;
};

namespace detail {

template <class T>
void accumulate(Tensor<T>* dst, const Tensor<T>& src) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <class T>
Tape<T>& same_tape(std::initializer_list<Var<T>> vs) {
  Tape<T>* t = vs.begin()->tape;
  for (const auto& v : vs) {
    if (v.tape != t) throw ContractError("vars from different tapes mixed in one op");
  }
  return *t;
}

}  // namespace detail

// Names of every differentiable op; the gradient-check suite covers each.
inline constexpr std::string_view kDifferentiableOps[] = {
    "matmul",       "bmm",         "add",        "scale",          "add_bias",
    "relu",         "gelu",        "elu1",       "softmax",        "layer_norm",
    "group_norm",   "conv2d",      "transposed_conv2d", "bilinear_resize", "concat",
    "gather",       "reshape",     "sum",        "add_periodic",   "linear_attention",
    "cosine_cost",  "bce_loss",    "mul"};

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tp = detail::same_tape<T>({a, b});
  Tensor<T> av = a.value(), bv = b.value();
  auto out = ops::matmul(av, bv);
  return tp.record("matmul", {a.id, b.id}, std::move(out),
                   [av, bv](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                     const std::size_t k = bv.dim(0), n = bv.dim(1), m = av.size() / k;
                     const auto a2 = av.reshaped({m, k});
                     const auto g2 = g.reshaped({m, n});
                     if (gi[0]) {
                       auto ga = ops::bmm(g2.reshaped({1, m, n}), bv.reshaped({1, k, n}),
                                          false, true);
                       detail::accumulate(gi[0], ga.reshaped(av.shape()));
                     }
                     if (gi[1]) {
                       auto gb = ops::bmm(a2.reshaped({1, m, k}), g2.reshaped({1, m, n}),
                                          true, false);
                       detail::accumulate(gi[1], gb.reshaped(bv.shape()));
                     }
                   });
}

template <class T>
Var<T> bmm(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false) {
  auto& tp = detail::same_tape<T>({a, b});
  Tensor<T> av = a.value(), bv = b.value();
  auto out = ops::bmm(av, bv, trans_a, trans_b);
  return tp.record("bmm", {a.id, b.id}, std::move(out),
                   [av, bv, trans_a, trans_b](const Tensor<T>& g,
                                              std::span<Tensor<T>* const> gi) {
                     if (gi[0]) {
                       Tensor<T> ga = !trans_a
                                          ? ops::bmm(g, bv, false, !trans_b)
                                          : (trans_b ? ops::bmm(bv, g, true, true)
                                                     : ops::bmm(bv, g, false, true));
                       detail::accumulate(gi[0], ga);
                     }
                     if (gi[1]) {
                       Tensor<T> gb = !trans_b
                                          ? ops::bmm(av, g, !trans_a, false)
                                          : (trans_a ? ops::bmm(g, av, true, true)
                                                     : ops::bmm(g, av, true, false));
                       detail::accumulate(gi[1], gb);
                     }
                   });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tp = detail::same_tape<T>({a, b});
  return tp.record("add", {a.id, b.id}, ops::add(a.value(), b.value()),
                   [](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                     detail::accumulate(gi[0], g);
                     detail::accumulate(gi[1], g);
                   });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  return a.tape->record("scale", {a.id}, ops::scale(a.value(), s),
                        [s](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          detail::accumulate(gi[0], ops::scale(g, s));
                        });
}

template <class T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  auto& tp = detail::same_tape<T>({x, b});
  const std::size_t n = b.value().size();
  return tp.record("add_bias", {x.id, b.id}, ops::add_bias(x.value(), b.value()),
                   [n](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                     detail::accumulate(gi[0], g);
                     if (gi[1]) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i % n] += g[i];
                     }
                   });
}

/// x + c where c is a constant tensor repeated over x: out[i] = x[i] + c[i % |c|].
template <class T>
Var<T> add_periodic(Var<T> x, const Tensor<T>& c) {
  if (x.value().size() % c.size() != 0) {
    throw DimensionError("add_periodic: " + shape_str(c.shape()) + " does not tile " +
                         shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i % c.size()];
  return x.tape->record("add_periodic", {x.id}, std::move(out),
                        [](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          detail::accumulate(gi[0], g);
                        });
}

template <class T>
Var<T> relu(Var<T> x) {
  Tensor<T> xv = x.value();
  return x.tape->record("relu", {x.id}, ops::relu(xv),
                        [xv](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          if (!gi[0]) return;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (xv[i] > T{0}) (*gi[0])[i] += g[i];
                          }
                        });
}

template <class T>
Var<T> gelu(Var<T> x) {
  Tensor<T> xv = x.value();
  return x.tape->record("gelu", {x.id}, ops::gelu(xv),
                        [xv](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          if (!gi[0]) return;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            (*gi[0])[i] += g[i] * ops::gelu_grad(xv[i]);
                          }
                        });
}

template <class T>
Var<T> elu1(Var<T> x) {
  Tensor<T> xv = x.value();
  return x.tape->record("elu1", {x.id}, ops::feature_map_elu1(xv),
                        [xv](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          if (!gi[0]) return;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            (*gi[0])[i] += g[i] * (xv[i] >= T{0} ? T{1} : std::exp(xv[i]));
                          }
                        });
}

/// Softmax over the last axis.
template <class T>
Var<T> softmax(Var<T> x) {
  auto y = ops::softmax(x.value(), x.value().rank() - 1);
  Tensor<T> yv = y;
  return x.tape->record("softmax", {x.id}, std::move(y),
                        [yv](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          if (gi[0]) detail::accumulate(gi[0], ops::softmax_last_backward(yv, g));
                        });
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  auto& tp = detail::same_tape<T>({x, gamma, beta});
  Tensor<T> xv = x.value(), gv = gamma.value();
  return tp.record("layer_norm", {x.id, gamma.id, beta.id},
                   ops::layer_norm(xv, gv, beta.value(), eps),
                   [xv, gv, eps](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                     auto r = ops::layer_norm_backward(xv, gv, eps, g);
                     detail::accumulate(gi[0], r.x);
                     detail::accumulate(gi[1], r.gamma);
                     detail::accumulate(gi[2], r.beta);
                   });
}

template <class T>
Var<T> group_norm(Var<T> x, std::size_t groups, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  auto& tp = detail::same_tape<T>({x, gamma, beta});
  Tensor<T> xv = x.value(), gv = gamma.value();
  return tp.record("group_norm", {x.id, gamma.id, beta.id},
                   ops::group_norm(xv, groups, gv, beta.value(), eps),
                   [xv, gv, groups, eps](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                     auto r = ops::group_norm_backward(xv, groups, gv, eps, g);
                     detail::accumulate(gi[0], r.x);
                     detail::accumulate(gi[1], r.gamma);
                     detail::accumulate(gi[2], r.beta);
                   });
}

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride, std::size_t pad) {
  auto& tp = detail::same_tape<T>({x, w, b});
  Tensor<T> xv = x.value(), wv = w.value();
  return tp.record("conv2d", {x.id, w.id, b.id}, ops::conv2d(xv, wv, b.value(), stride, pad),
                   [xv, wv, stride, pad](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                     auto r = ops::conv2d_backward(xv, wv, stride, pad, g);
                     detail::accumulate(gi[0], r.x);
                     detail::accumulate(gi[1], r.w);
                     detail::accumulate(gi[2], r.b);
                   });
}

template <class T>
Var<T> transposed_conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride) {
  auto& tp = detail::same_tape<T>({x, w, b});
  Tensor<T> xv = x.value(), wv = w.value();
  return tp.record("transposed_conv2d", {x.id, w.id, b.id},
                   ops::transposed_conv2d(xv, wv, b.value(), stride),
                   [xv, wv, stride](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                     auto r = ops::transposed_conv2d_backward(xv, wv, stride, g);
                     detail::accumulate(gi[0], r.x);
                     detail::accumulate(gi[1], r.w);
                     detail::accumulate(gi[2], r.b);
                   });
}

template <class T>
Var<T> bilinear_resize(Var<T> x, std::size_t h_out, std::size_t w_out) {
  Shape in_shape = x.shape();
  return x.tape->record("bilinear_resize", {x.id}, ops::bilinear_resize(x.value(), h_out, w_out),
                        [in_shape](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          if (gi[0]) {
                            detail::accumulate(gi[0], ops::bilinear_resize_backward(in_shape, g));
                          }
                        });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ContractError("concat: no inputs");
  Tape<T>& tp = *xs.front().tape;
  std::vector<Tensor<T>> vals;
  std::vector<std::size_t> ids;
  std::vector<Shape> shapes;
  for (const auto& x : xs) {
    if (x.tape != &tp) throw ContractError("vars from different tapes mixed in one op");
    vals.push_back(x.value());
    ids.push_back(x.id);
    shapes.push_back(x.shape());
  }
  auto out = ops::concat(vals, axis);
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= shapes[0][a];
  return tp.record("concat", std::move(ids), std::move(out),
                   [shapes, outer](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                     std::size_t pos = 0;
                     for (std::size_t o = 0; o < outer; ++o) {
                       for (std::size_t k = 0; k < shapes.size(); ++k) {
                         const std::size_t chunk = numel(shapes[k]) / outer;
                         if (gi[k]) {
                           T* dst = gi[k]->data().data() + o * chunk;
                           for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[pos + i];
                         }
                         pos += chunk;
                       }
                     }
                   });
}

template <class T>
Var<T> concat_last(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_last: no inputs");
  return concat(xs, xs.front().shape().size() - 1);
}

template <class T>
Var<T> gather(Var<T> x, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape) {
  Shape in_shape = x.shape();
  auto out = ops::gather(x.value(), *index, std::move(out_shape));
  return x.tape->record("gather", {x.id}, std::move(out),
                        [in_shape, index](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          if (!gi[0]) return;
                          const auto& idx = *index;
                          for (std::size_t i = 0; i < idx.size(); ++i) (*gi[0])[idx[i]] += g[i];
                        });
}

template <class T>
Var<T> gather(Var<T> x, std::vector<std::size_t> index, Shape out_shape) {
  return gather(x, std::make_shared<const std::vector<std::size_t>>(std::move(index)),
                std::move(out_shape));
}

template <class T>
Var<T> permute(Var<T> x, const std::vector<std::size_t>& perm) {
  Shape os;
  auto idx = ops::permute_index(x.shape(), perm, &os);
  return gather(x, std::move(idx), std::move(os));
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Shape in_shape = x.shape();
  return x.tape->record("reshape", {x.id}, x.value().reshaped(std::move(shape)),
                        [in_shape](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          detail::accumulate(gi[0], g.reshaped(in_shape));
                        });
}

template <class T>
Var<T> sum(Var<T> x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  return x.tape->record("sum", {x.id}, Tensor<T>::scalar(s),
                        [](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          if (!gi[0]) return;
                          for (auto& v : gi[0]->data()) v += g[0];
                        });
}

/// sum(x * w) for a constant weight tensor; used to reduce ops to a scalar in
/// gradient checks.
/// Elementwise product of equal-shape tensors.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tp = detail::same_tape<T>({a, b});
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor<T> av = a.value(), bv = b.value();
  Tensor<T> prod = av;
  for (std::size_t i = 0; i < prod.size(); ++i) prod[i] *= bv[i];
  return tp.record("mul", {a.id, b.id}, std::move(prod),
                   [av, bv](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                     if (gi[0]) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * bv[i];
                     }
                     if (gi[1]) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * av[i];
                     }
                   });
}

/// sum(x * w) for a constant weight tensor.
template <class T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& w) {
  return sum(mul(x, x.tape->constant(w)));
}

// ---------------------------------------------------------------- grad_check

/// Checks tape gradients against central finite differences.
///
/// `f(tape, vars)` must build a scalar from `vars` (one leaf per entry of
/// `params`). Returns max over checked elements of
/// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|). With `max_elements` set, only
/// that many entries per tensor are perturbed, largest analytic gradient
/// first. Entries whose +-h stencil changes the relu activation pattern are
/// not differentiable there and are replaced by the next entry; `skipped`
/// counts them.
template <class F>
double grad_check(F&& f, std::vector<Tensor<double>> params, double h = 1e-5,
                  std::size_t max_elements = 0, std::size_t* skipped = nullptr) {
  auto names = [&](std::size_t i) { return "p" + std::to_string(i); };
  auto eval = [&](bool with_grad, GradientMap<double>* grads, std::uint64_t* sig) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      vars.push_back(tape.parameter(names(i), params[i], with_grad));
    }
    Var<double> loss = f(tape, std::span<const Var<double>>(vars));
    const double v = loss.value().item();
    if (grads) *grads = tape.backward(loss);
    if (sig) *sig = tape.kink_signature();
    return v;
  };
  GradientMap<double> grads;
  std::uint64_t base = 0;
  eval(true, &grads, &base);
  double worst = 0.0;
  std::size_t skips = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto it = grads.find(names(p));
    Tensor<double> g = it != grads.end() ? it->second : Tensor<double>(params[p].shape());
    const std::size_t n = params[p].size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(g[a]) > std::abs(g[b]);
    });
    const std::size_t want = max_elements == 0 ? n : std::min(max_elements, n);
    std::size_t checked = 0;
    for (std::size_t e : order) {
      if (checked == want) break;
      const double orig = params[p][e];
      std::uint64_t sp = 0, sm = 0;
      params[p][e] = orig + h;
      const double fp = eval(false, nullptr, &sp);
      params[p][e] = orig - h;
      const double fm = eval(false, nullptr, &sm);
      params[p][e] = orig;
      if (sp != base || sm != base) {
        ++skips;
        continue;
      }
      ++checked;
      const double fd = (fp - fm) / (2.0 * h);
      const double err = std::abs(g[e] - fd) / std::max(1e-8, std::abs(g[e]) + std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  if (skipped) *skipped = skips;
  return worst;
}

}  // namespace catseg::ag
