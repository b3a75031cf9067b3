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

#include <cstdint>
#include <vector>

#include "catseg/inference.hpp"

namespace catseg {

struct ConfusionCounts {
  std::vector<std::uint64_t> intersection;
  std::vector<std::uint64_t> union_;

  std::size_t num_classes() const { return intersection.size(); }

  /// IoU of class c, or nullopt when c is absent from both maps.
  std::optional<double> iou(std::size_t c) const {
    if (union_[c] == 0) return {};
    return static_cast<double>(intersection[c]) / static_cast<double>(union_[c]);
  }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    if (o.num_classes() != num_classes()) throw DimensionError("confusion counts: class counts differ");
    for (std::size_t c = 0; c < num_classes(); ++c) {
      intersection[c] += o.intersection[c];
      union_[c] += o.union_[c];
    }
    return *this;
  }
};

inline ConfusionCounts confusion(const SegmentationMap& pred, const SegmentationMap& gt,
                                 std::size_t n_classes) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError("prediction " + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " vs ground truth " +
                         std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  pred.validate();
  gt.validate();
  std::vector<std::uint64_t> np(n_classes), ng(n_classes);
  ConfusionCounts cc{std::vector<std::uint64_t>(n_classes), std::vector<std::uint64_t>(n_classes)};
  for (std::size_t i = 0; i < pred.indices.size(); ++i) {
    const auto p = pred.indices[i], g = gt.indices[i];
    if (p >= n_classes || g >= n_classes) {
      throw ContractError("class index " + std::to_string(std::max(p, g)) + " >= " +
                          std::to_string(n_classes));
    }
    ++np[p];
    ++ng[g];
    if (p == g) ++cc.intersection[p];
  }
  for (std::size_t c = 0; c < n_classes; ++c) cc.union_[c] = np[c] + ng[c] - cc.intersection[c];
  return cc;
}

/// Mean IoU over classes present in either map.
inline double miou(const ConfusionCounts& cc) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < cc.num_classes(); ++c) {
    if (auto v = cc.iou(c)) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) throw NumericalError("mIoU undefined: no class occurs in either map");
  return sum / static_cast<double>(n);
}

}  // namespace catseg
