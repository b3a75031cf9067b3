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

// Synthetic colored-region scenes for smoke training and tests. Each image is
// split at a random cell boundary into four quadrants, each filled with the
// flat color of one class.

#include <array>
#include <string>
#include <vector>

#include "catseg/inference.hpp"

namespace catseg {

inline constexpr std::array<const char*, 8> kColorNames = {"red",  "green",   "blue",  "yellow",
                                                           "cyan", "magenta", "white", "gray"};
inline constexpr std::array<std::array<double, 3>, 8> kColors = {{{1, 0, 0},
                                                                  {0, 1, 0},
                                                                  {0, 0, 1},
                                                                  {1, 1, 0},
                                                                  {0, 1, 1},
                                                                  {1, 0, 1},
                                                                  {1, 1, 1},
                                                                  {0.5, 0.5, 0.5}}};

template <class T>
struct SyntheticSet {
  std::vector<Tensor<T>> images;       // [3,size,size]
  std::vector<SegmentationMap> maps;   // [size,size]
  std::vector<std::string> class_names;
};

/// `cell` is the region granularity in pixels; split points fall on cell
/// boundaries.
template <class T>
SyntheticSet<T> make_synthetic(std::size_t n_images, std::size_t size, std::size_t cell,
                               std::size_t n_classes, std::uint64_t seed) {
  if (n_classes == 0 || n_classes > kColors.size()) {
    throw ConfigError("synthetic scenes support 1.." + std::to_string(kColors.size()) + " classes");
  }
  if (cell == 0 || size % cell != 0 || size / cell < 2) {
    throw ConfigError("synthetic scenes need at least two cells per side");
  }
  SyntheticSet<T> s;
  for (std::size_t c = 0; c < n_classes; ++c) s.class_names.push_back(kColorNames[c]);
  Rng rng(seed);
  const std::size_t cells = size / cell;
  for (std::size_t i = 0; i < n_images; ++i) {
    const std::size_t sy = (1 + rng.below(cells - 1)) * cell, sx = (1 + rng.below(cells - 1)) * cell;
    const auto perm = rng.permutation(std::max<std::size_t>(n_classes, 4));
    std::array<std::uint32_t, 4> quad{};
    for (std::size_t q = 0; q < 4; ++q) quad[q] = static_cast<std::uint32_t>(perm[q] % n_classes);
    Tensor<T> img({3, size, size});
    SegmentationMap m{size, size, std::vector<std::uint32_t>(size * size), s.class_names};
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const std::uint32_t c = quad[(y >= sy ? 2 : 0) + (x >= sx ? 1 : 0)];
        m.indices[y * size + x] = c;
        for (std::size_t k = 0; k < 3; ++k) img[(k * size + y) * size + x] = static_cast<T>(kColors[c][k]);
      }
    s.images.push_back(std::move(img));
    s.maps.push_back(std::move(m));
  }
  return s;
}

}  // namespace catseg
