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

// Synthetic multi-domain vessel/aneurysm phantoms and the appearance-shift
// pipeline used both to define domains and to derive simulated targets.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dglab/volume.hpp"

namespace dglab {

/// Parameters of one acquisition "domain" (or one random target shift).
struct DomainSpec {
  int domain_id = 0;
  double intensity_gain = 1.0;
  double intensity_offset = 0.0;
  double noise_sigma = 0.0;
  double smoothing_sigma = 0.0;  // voxels
  double histogram_shift = 0.0;  // |shift| < 1 keeps the remap monotone
  double bias_field_amplitude = 0.0;
  double resolution_scale = 1.0;  // > 1 degrades effective resolution
  bool geometric = false;
  double max_rotation_deg = 10.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  std::uint64_t rng_seed = 0;

  static DomainSpec identity(int domain_id = 0);

  /// Tuple compared for the "distinct domains" invariant.
  [[nodiscard]] std::array<double, 7> appearance_tuple() const;

  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

void to_json(nlohmann::json& j, const DomainSpec& s);
void from_json(const nlohmann::json& j, DomainSpec& s);

/// Sampling ranges for random DomainSpecs. Defaults are deliberately mild.
struct ShiftRanges {
  std::pair<double, double> gain{0.7, 1.4};
  std::pair<double, double> offset{-0.1, 0.1};
  std::pair<double, double> noise_sigma{0.0, 0.1};
  std::pair<double, double> smoothing_sigma{0.0, 1.0};
  std::pair<double, double> histogram_shift{-0.5, 0.5};
  std::pair<double, double> bias_amplitude{0.0, 0.3};
  std::pair<double, double> resolution_scale{1.0, 1.5};
  bool geometric = true;
  double max_rotation_deg = 10.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
};

void to_json(nlohmann::json& j, const ShiftRanges& r);
void from_json(const nlohmann::json& j, ShiftRanges& r);

DomainSpec sample_domain_spec(const ShiftRanges& ranges, int domain_id,
                              std::uint64_t seed);

/// Where the phantom put its aneurysm; exposed for tests and debugging.
struct PhantomGeometry {
  std::array<int, 3> aneurysm_center{};  // (z, y, x), integer voxel coords
  double aneurysm_radius = 0.0;
  double vessel_radius = 0.0;
};

/// One curved tube plus an attached sphere; the mask labels the sphere.
DomainSample generate_phantom(std::uint64_t seed, Shape3 shape,
                              std::pair<double, double> aneurysm_radius_range,
                              PhantomGeometry* geometry = nullptr);

/// Number of integer lattice points p with |p|^2 <= r^2.
std::size_t lattice_ball_count(double radius);

/// SOURCE -> TARGET. Stages run in a fixed order: geometric (incl.
/// resolution), gain/offset, smoothing, noise, histogram shift, bias field.
DomainSample apply_domain_shift(const DomainSample& sample,
                                const DomainSpec& spec);

/// Same pipeline, used to give a raw phantom a domain's appearance. The
/// result stays a SOURCE sample tagged with spec.domain_id.
DomainSample render_in_domain(const DomainSample& phantom,
                              const DomainSpec& spec);

struct DatasetOptions {
  int num_domains = 4;
  int samples_per_domain = 10;
  std::uint64_t master_seed = 42;
  Shape3 shape{32, 32, 32};
  std::pair<double, double> aneurysm_radius_range{2.5, 4.5};
  ShiftRanges domain_ranges = [] {
    ShiftRanges r;
    r.geometric = false;
    r.resolution_scale = {1.0, 1.6};
    return r;
  }();
};

/// Read-only view over a dataset directory:
///   <root>/domain_<k>/sample_<i>.{img.raw,msk.raw,json}
class Dataset {
 public:
  static Dataset open(const std::filesystem::path& root);

  [[nodiscard]] const std::filesystem::path& root() const { return root_; }
  [[nodiscard]] const std::vector<int>& domain_ids() const { return domains_; }
  [[nodiscard]] bool has_domain(int k) const;
  [[nodiscard]] int samples_in_domain(int k) const;
  [[nodiscard]] int total_samples() const;
  [[nodiscard]] Shape3 shape() const { return shape_; }

  [[nodiscard]] DomainSample load(int domain, int index) const;
  [[nodiscard]] std::vector<DomainSample> load_domain(int domain) const;
  [[nodiscard]] DomainSpec domain_spec(int domain) const;

  /// SHA-256 over every file (sorted relative path + bytes).
  [[nodiscard]] std::string content_digest() const;

 private:
  std::filesystem::path root_;
  std::vector<int> domains_;
  std::vector<int> counts_;
  Shape3 shape_;
};

/// Fails if root exists and is non-empty.
Dataset build_dataset(const std::filesystem::path& root,
                      const DatasetOptions& options);

void write_sample(const std::filesystem::path& dir, int index,
                  const DomainSample& s, const DomainSpec& spec,
                  std::uint64_t seed);
DomainSample read_sample(const std::filesystem::path& dir, int index);

}  // namespace dglab
