// Copyright 2026 The dglab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace dglab {

/// Grid extent in (D, H, W) order; data is stored C-order with W fastest.
struct Shape3 {
  int d = 0;
  int h = 0;
  int w = 0;

  [[nodiscard]] std::size_t voxels() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  [[nodiscard]] std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * static_cast<std::size_t>(h) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(w) +
           static_cast<std::size_t>(x);
  }
  [[nodiscard]] int min_extent() const;
  [[nodiscard]] std::string str() const;

  friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// Scalar intensity grid with voxel spacing in mm.
struct Volume {
  Shape3 shape;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<float> data;

  Volume() = default;
  explicit Volume(Shape3 s, float fill = 0.0f)
      : shape(s), data(s.voxels(), fill) {}

  float& at(int z, int y, int x) { return data[shape.index(z, y, x)]; }
  [[nodiscard]] float at(int z, int y, int x) const {
    return data[shape.index(z, y, x)];
  }
  [[nodiscard]] bool all_finite() const;
};

/// Binary {0,1} label grid.
struct LabelMask {
  Shape3 shape;
  std::vector<std::uint8_t> data;

  LabelMask() = default;
  explicit LabelMask(Shape3 s) : shape(s), data(s.voxels(), 0) {}

  std::uint8_t& at(int z, int y, int x) { return data[shape.index(z, y, x)]; }
  [[nodiscard]] std::uint8_t at(int z, int y, int x) const {
    return data[shape.index(z, y, x)];
  }
  [[nodiscard]] std::size_t count() const;
  [[nodiscard]] double foreground_fraction() const;
  [[nodiscard]] bool is_binary() const;
};

enum class Variant { kSource, kTarget };

const char* to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct DomainSample {
  Volume image;
  LabelMask mask;
  int domain_id = 0;
  Variant variant = Variant::kSource;
};

}  // namespace dglab
