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

// End-to-end prediction, overlapping-patch inference and the argmax
// decision rule.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "catseg/model.hpp"

namespace catseg {

/// Per-pixel class indices with the index -> name legend.
struct SegmentationMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint32_t> indices;  // row-major [height, width]
  std::vector<std::string> legend;

  std::uint32_t at(std::size_t y, std::size_t x) const { return indices[y * width + x]; }

  void validate() const {
    if (indices.size() != height * width) {
      throw DimensionError("segmentation map holds " + std::to_string(indices.size()) +
                           " pixels for " + std::to_string(height) + "x" + std::to_string(width));
    }
    for (auto v : indices) {
      if (!legend.empty() && v >= legend.size()) {
        throw ContractError("class index " + std::to_string(v) + " outside a legend of " +
                            std::to_string(legend.size()));
      }
    }
  }
};

/// Per pixel, the class of maximal logit; ties go to the lower index.
template <class T>
SegmentationMap argmax_map(const Tensor<T>& logits, std::vector<std::string> legend) {
  if (logits.rank() != 3) throw DimensionError("logits must be [N,H,W], got " + shape_str(logits.shape()));
  if (!legend.empty() && legend.size() != logits.dim(0)) {
    throw DimensionError(std::to_string(legend.size()) + " legend entries for " +
                         std::to_string(logits.dim(0)) + " logit planes");
  }
  const std::size_t n = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  SegmentationMap m{logits.dim(1), logits.dim(2), std::vector<std::uint32_t>(plane), std::move(legend)};
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < n; ++c) {
      if (logits[c * plane + p] > logits[best * plane + p]) best = c;
    }
    m.indices[p] = static_cast<std::uint32_t>(best);
  }
  return m;
}

struct PatchRect {
  std::size_t y = 0, x = 0, h = 0, w = 0;
  bool global = false;  // whole image evaluated at model resolution
};

struct PatchPlan {
  std::size_t n_p = 1;
  std::size_t patch = 0;
  std::size_t overlap = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool include_global = false;
  std::vector<PatchRect> rects;  // patches in row-major grid order, then the global entry
};

namespace detail {

inline std::size_t check_cover(std::size_t extent, std::size_t n_p, std::size_t patch,
                               std::size_t overlap, const char* axis) {
  if (patch == 0 || n_p == 0) throw ConfigError("patch size and N_P must be positive");
  if (patch > extent) {
    throw ConfigError(std::string("patch ") + std::to_string(patch) + " exceeds image " + axis +
                      " " + std::to_string(extent));
  }
  const std::size_t covered = n_p * patch - (n_p - 1) * std::min(overlap, patch);
  if (covered != extent || (n_p > 1 && overlap >= patch)) {
    std::string hint;
    if (n_p > 1 && n_p * patch >= extent && (n_p * patch - extent) % (n_p - 1) == 0) {
      hint = "; use overlap " + std::to_string((n_p * patch - extent) / (n_p - 1));
    } else if (n_p == 1) {
      hint = "; a single patch must equal the image size";
    } else {
      hint = "; no integer overlap covers this size";
    }
    throw ConfigError(std::to_string(n_p) + " patches of " + std::to_string(patch) +
                      " with overlap " + std::to_string(overlap) + " cover " +
                      std::to_string(covered) + ", not image " + axis + " " +
                      std::to_string(extent) + hint);
  }
  return patch - (n_p > 1 ? overlap : 0);
}

}  // namespace detail

inline PatchPlan plan_patches(std::size_t height, std::size_t width, std::size_t n_p,
                              std::size_t patch, std::size_t overlap, bool include_global) {
  const std::size_t sy = detail::check_cover(height, n_p, patch, overlap, "height");
  const std::size_t sx = detail::check_cover(width, n_p, patch, overlap, "width");
  PatchPlan plan{n_p, patch, n_p > 1 ? overlap : 0, height, width, include_global, {}};
  for (std::size_t r = 0; r < n_p; ++r)
    for (std::size_t c = 0; c < n_p; ++c) plan.rects.push_back({r * sy, c * sx, patch, patch, false});
  if (include_global) plan.rects.push_back({0, 0, height, width, true});
  return plan;
}

/// Overlap solving n_p*patch - (n_p-1)*overlap == extent.
inline std::optional<std::size_t> solve_overlap(std::size_t extent, std::size_t n_p,
                                                std::size_t patch) {
  if (n_p < 2 || n_p * patch < extent || (n_p * patch - extent) % (n_p - 1) != 0) return {};
  return (n_p * patch - extent) / (n_p - 1);
}

/// Averages the predictions of every plan entry per pixel. `predict(rect)`
/// returns logits [N, rect.h, rect.w]; for the global entry that is the
/// whole image. Accumulation runs in plan order.
template <class T, class Predict>
Tensor<T> patch_inference(const PatchPlan& plan, Predict&& predict) {
  std::optional<Tensor<T>> sum;
  std::vector<std::uint32_t> count(plan.height * plan.width, 0);
  std::size_t n = 0;
  for (const auto& r : plan.rects) {
    const Tensor<T> p = predict(r);
    if (p.rank() != 3 || p.dim(1) != r.h || p.dim(2) != r.w) {
      throw DimensionError("patch prediction " + shape_str(p.shape()) + " for a " +
                           std::to_string(r.h) + "x" + std::to_string(r.w) + " rectangle");
    }
    if (!sum) {
      n = p.dim(0);
      sum.emplace(Shape{n, plan.height, plan.width});
    } else if (p.dim(0) != n) {
      throw DimensionError("patch predictions disagree on the class count");
    }
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t y = 0; y < r.h; ++y)
        for (std::size_t x = 0; x < r.w; ++x) {
          (*sum)[(c * plan.height + r.y + y) * plan.width + r.x + x] += p[(c * r.h + y) * r.w + x];
        }
    for (std::size_t y = 0; y < r.h; ++y)
      for (std::size_t x = 0; x < r.w; ++x) ++count[(r.y + y) * plan.width + r.x + x];
  }
  if (!sum) throw InternalError("patch plan has no entries");
  const std::size_t plane = plan.height * plan.width;
  for (std::size_t p = 0; p < plane; ++p) {
    if (count[p] == 0) throw InternalError("pixel " + std::to_string(p) + " not covered by any patch");
  }
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t p = 0; p < plane; ++p) (*sum)[c * plane + p] /= static_cast<T>(count[p]);
  return std::move(*sum);
}

/// Single forward pass over one embedding set.
template <class T>
Tensor<T> forward(const EmbeddingSet<T>& emb, const Model<T>& model) {
  return model.predict(emb);
}

/// Crops rows/columns of a [C,H,W] image.
template <class T>
Tensor<T> crop(const Tensor<T>& image, const PatchRect& r) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (r.y + r.h > h || r.x + r.w > w) throw DimensionError("crop outside the image");
  Tensor<T> out({c, r.h, r.w});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < r.h; ++y)
      for (std::size_t x = 0; x < r.w; ++x)
        out[(k * r.h + y) * r.w + x] = image[(k * h + r.y + y) * w + r.x + x];
  return out;
}

/// Patch inference with the toy encoders: patches are cropped and encoded on
/// the fly; the global entry encodes the image resized to the training
/// resolution and resizes its logits back.
template <class T>
Tensor<T> patch_inference(const Tensor<T>& image, const std::vector<std::string>& names,
                          const PatchPlan& plan, const Model<T>& model) {
  const std::size_t res = model.config().train_res;
  return patch_inference<T>(plan, [&](const PatchRect& r) {
    if (!r.global) return model.predict(model.embed(crop(image, r), names), r.h, r.w);
    const Tensor<T> small = ops::bilinear_resize(image, res, res);
    return ops::bilinear_resize(model.predict(model.embed(small, names), res, res), r.h, r.w);
  });
}

/// Patch inference over precomputed embeddings: `patches[i]` belongs to
/// plan entry i, `whole` to the global entry.
template <class T>
Tensor<T> patch_inference(const EmbeddingSet<T>& whole, const std::vector<EmbeddingSet<T>>& patches,
                          const PatchPlan& plan, const Model<T>& model) {
  const std::size_t n_patches = plan.rects.size() - (plan.include_global ? 1 : 0);
  if (patches.size() != n_patches) {
    throw ContractError("plan has " + std::to_string(n_patches) + " patches but " +
                        std::to_string(patches.size()) + " embedding sets were supplied");
  }
  std::size_t next = 0;
  return patch_inference<T>(plan, [&](const PatchRect& r) {
    if (!r.global) return model.predict(patches.at(next++), r.h, r.w);
    return ops::bilinear_resize(model.predict(whole), r.h, r.w);
  });
}

}  // namespace catseg
