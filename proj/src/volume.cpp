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

#include "dglab/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dglab/error.hpp"

namespace dglab {

int Shape3::min_extent() const { return std::min({d, h, w}); }

std::string Shape3::str() const {
  return "(" + std::to_string(d) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

bool Volume::all_finite() const {
  return std::all_of(data.begin(), data.end(),
                     [](float v) { return std::isfinite(v); });
}

std::size_t LabelMask::count() const {
  return static_cast<std::size_t>(
      std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

double LabelMask::foreground_fraction() const {
  if (data.empty()) return 0.0;
  return static_cast<double>(count()) / static_cast<double>(data.size());
}

bool LabelMask::is_binary() const {
  return std::all_of(data.begin(), data.end(),
                     [](auto v) { return v == 0 || v == 1; });
}

const char* to_string(Variant v) {
  return v == Variant::kSource ? "SOURCE" : "TARGET";
}

Variant variant_from_string(const std::string& s) {
  if (s == "SOURCE") return Variant::kSource;
  if (s == "TARGET") return Variant::kTarget;
  throw ConfigError("unknown variant '" + s + "'");
}

}  // namespace dglab
