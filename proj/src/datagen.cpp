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

#include "dglab/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <regex>

#include "dglab/error.hpp"
#include "dglab/io.hpp"

namespace dglab {

namespace fs = std::filesystem;
using detail::require;

namespace {

// Stage tags for per-stage RNG streams; disabling one stage must not perturb
// the draws of another.
enum : std::uint64_t {
  kStageGeometric = 1,
  kStageNoise = 2,
  kStageBias = 3,
  kPhantom = 0x9a1,
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double uniform(std::mt19937_64& rng, std::pair<double, double> r) {
  return uniform(rng, r.first, r.second);
}

using Vec3 = std::array<double, 3>;

double dist2(const Vec3& a, const Vec3& b) {
  const double dz = a[0] - b[0], dy = a[1] - b[1], dx = a[2] - b[2];
  return dz * dz + dy * dy + dx * dx;
}

// Clamp-to-edge trilinear sample at continuous (z, y, x).
float trilinear(const Volume& v, double z, double y, double x) {
  const Shape3& s = v.shape;
  z = std::clamp(z, 0.0, s.d - 1.0);
  y = std::clamp(y, 0.0, s.h - 1.0);
  x = std::clamp(x, 0.0, s.w - 1.0);
  const int z0 = std::min(static_cast<int>(z), s.d - 2 < 0 ? 0 : s.d - 2);
  const int y0 = std::min(static_cast<int>(y), s.h - 2 < 0 ? 0 : s.h - 2);
  const int x0 = std::min(static_cast<int>(x), s.w - 2 < 0 ? 0 : s.w - 2);
  const int z1 = std::min(z0 + 1, s.d - 1);
  const int y1 = std::min(y0 + 1, s.h - 1);
  const int x1 = std::min(x0 + 1, s.w - 1);
  const double fz = z - z0, fy = y - y0, fx = x - x0;
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const double c00 = lerp(v.at(z0, y0, x0), v.at(z0, y0, x1), fx);
  const double c01 = lerp(v.at(z0, y1, x0), v.at(z0, y1, x1), fx);
  const double c10 = lerp(v.at(z1, y0, x0), v.at(z1, y0, x1), fx);
  const double c11 = lerp(v.at(z1, y1, x0), v.at(z1, y1, x1), fx);
  return static_cast<float>(
      lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz));
}

void validate_spec(const DomainSpec& spec) {
  require(std::isfinite(spec.intensity_gain) && spec.intensity_gain > 0.0,
          "intensity_gain must be positive");
  require(std::isfinite(spec.intensity_offset),
          "intensity_offset must be finite");
  require(spec.noise_sigma >= 0.0, "noise_sigma must be nonnegative");
  require(spec.smoothing_sigma >= 0.0, "smoothing_sigma must be nonnegative");
  require(std::abs(spec.histogram_shift) < 1.0,
          "histogram_shift must lie in (-1, 1)");
  require(spec.bias_field_amplitude >= 0.0 && spec.bias_field_amplitude < 1.0,
          "bias_field_amplitude must lie in [0, 1)");
  require(spec.resolution_scale > 0.0, "resolution_scale must be positive");
  require(spec.scale_min > 0.0 && spec.scale_min <= spec.scale_max,
          "geometric scale range must be positive and ordered");
}

void geometric_stage(DomainSample& s, const DomainSpec& spec) {
  std::mt19937_64 rng(derive_seed(spec.rng_seed, kStageGeometric));
  const double deg = std::numbers::pi / 180.0;
  const double a = uniform(rng, -spec.max_rotation_deg, spec.max_rotation_deg) * deg;
  const double b = uniform(rng, -spec.max_rotation_deg, spec.max_rotation_deg) * deg;
  const double c = uniform(rng, -spec.max_rotation_deg, spec.max_rotation_deg) * deg;
  const double scale = uniform(rng, spec.scale_min, spec.scale_max);

  // R = Rz(a) * Ry(b) * Rx(c) acting on (z, y, x) ordered vectors.
  const double ca = std::cos(a), sa = std::sin(a);
  const double cb = std::cos(b), sb = std::sin(b);
  const double cc = std::cos(c), sc = std::sin(c);
  const std::array<std::array<double, 3>, 3> rz{{{1, 0, 0}, {0, ca, -sa}, {0, sa, ca}}};
  const std::array<std::array<double, 3>, 3> ry{{{cb, 0, sb}, {0, 1, 0}, {-sb, 0, cb}}};
  const std::array<std::array<double, 3>, 3> rx{{{cc, -sc, 0}, {sc, cc, 0}, {0, 0, 1}}};
  auto mul = [](const auto& m, const auto& n) {
    std::array<std::array<double, 3>, 3> r{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) r[i][j] += m[i][k] * n[k][j];
    return r;
  };
  const auto rot = mul(mul(rz, ry), rx);

  const Shape3 sh = s.image.shape;
  const Vec3 ctr{(sh.d - 1) / 2.0, (sh.h - 1) / 2.0, (sh.w - 1) / 2.0};
  Volume img(sh);
  img.spacing = s.image.spacing;
  LabelMask msk(sh);
  for (int z = 0; z < sh.d; ++z) {
    for (int y = 0; y < sh.h; ++y) {
      for (int x = 0; x < sh.w; ++x) {
        const Vec3 p{(z - ctr[0]) / scale, (y - ctr[1]) / scale,
                     (x - ctr[2]) / scale};
        // inverse map: q = c + R^T p
        Vec3 q{};
        for (int i = 0; i < 3; ++i)
          q[i] = ctr[i] + rot[0][i] * p[0] + rot[1][i] * p[1] + rot[2][i] * p[2];
        img.at(z, y, x) = trilinear(s.image, q[0], q[1], q[2]);
        const int qz = static_cast<int>(std::lround(q[0]));
        const int qy = static_cast<int>(std::lround(q[1]));
        const int qx = static_cast<int>(std::lround(q[2]));
        if (qz >= 0 && qz < sh.d && qy >= 0 && qy < sh.h && qx >= 0 &&
            qx < sh.w) {
          msk.at(z, y, x) = s.mask.at(qz, qy, qx);
        }
      }
    }
  }
  s.image = std::move(img);
  s.mask = std::move(msk);
}

// Resample onto a grid coarser by `factor` and back again.
void resolution_stage(Volume& v, double factor) {
  const Shape3 fine = v.shape;
  const Shape3 coarse{std::max(2, static_cast<int>(std::lround(fine.d / factor))),
                      std::max(2, static_cast<int>(std::lround(fine.h / factor))),
                      std::max(2, static_cast<int>(std::lround(fine.w / factor)))};
  auto ratio = [](int from, int to) {
    return to > 1 ? static_cast<double>(from - 1) / (to - 1) : 0.0;
  };
  Volume lo(coarse);
  const double rz = ratio(fine.d, coarse.d), ry = ratio(fine.h, coarse.h),
               rx = ratio(fine.w, coarse.w);
  for (int z = 0; z < coarse.d; ++z)
    for (int y = 0; y < coarse.h; ++y)
      for (int x = 0; x < coarse.w; ++x)
        lo.at(z, y, x) = trilinear(v, z * rz, y * ry, x * rx);
  const double uz = ratio(coarse.d, fine.d), uy = ratio(coarse.h, fine.h),
               ux = ratio(coarse.w, fine.w);
  for (int z = 0; z < fine.d; ++z)
    for (int y = 0; y < fine.h; ++y)
      for (int x = 0; x < fine.w; ++x)
        v.at(z, y, x) = trilinear(lo, z * uz, y * uy, x * ux);
}

void gaussian_stage(Volume& v, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& w : k) w /= sum;

  const Shape3 s = v.shape;
  std::vector<float> tmp(v.data.size());
  // Pass along one axis with clamp-to-edge borders.
  auto pass = [&](int axis) {
    for (int z = 0; z < s.d; ++z)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          double acc = 0.0;
          for (int i = -radius; i <= radius; ++i) {
            int zz = z, yy = y, xx = x;
            if (axis == 0) zz = std::clamp(z + i, 0, s.d - 1);
            if (axis == 1) yy = std::clamp(y + i, 0, s.h - 1);
            if (axis == 2) xx = std::clamp(x + i, 0, s.w - 1);
            acc += k[i + radius] * v.data[s.index(zz, yy, xx)];
          }
          tmp[s.index(z, y, x)] = static_cast<float>(acc);
        }
    v.data.swap(tmp);
  };
  pass(0);
  pass(1);
  pass(2);
}

// Monotone remap t -> t + s t (1 - t) on [0, 1], linearly extended outside.
double histogram_remap(double t, double s) {
  if (t < 0.0) return t * (1.0 + s);
  if (t > 1.0) return 1.0 + (t - 1.0) * (1.0 - s);
  return t + s * t * (1.0 - t);
}

void bias_stage(Volume& v, double amplitude, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, kStageBias));
  std::array<double, 9> c{};
  for (auto& ci : c) ci = uniform(rng, -1.0, 1.0);
  const Shape3 s = v.shape;
  auto norm = [](int i, int n) { return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0; };
  std::vector<double> field(v.data.size());
  double peak = 0.0;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const double u = norm(z, s.d), w = norm(y, s.h), r = norm(x, s.w);
        const double p = c[0] * u + c[1] * w + c[2] * r + c[3] * u * u +
                         c[4] * w * w + c[5] * r * r + c[6] * u * w +
                         c[7] * u * r + c[8] * w * r;
        field[s.index(z, y, x)] = p;
        peak = std::max(peak, std::abs(p));
      }
  if (peak == 0.0) return;
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    v.data[i] = static_cast<float>(v.data[i] *
                                   (1.0 + amplitude * field[i] / peak));
  }
}

DomainSample run_pipeline(const DomainSample& in, const DomainSpec& spec) {
  validate_spec(spec);
  require(in.image.shape == in.mask.shape, "image and mask shapes differ");
  DomainSample out = in;

  if (spec.geometric) geometric_stage(out, spec);
  if (spec.resolution_scale != 1.0) resolution_stage(out.image, spec.resolution_scale);

  if (spec.intensity_gain != 1.0 || spec.intensity_offset != 0.0) {
    const double g = spec.intensity_gain, o = spec.intensity_offset;
    for (auto& x : out.image.data) x = static_cast<float>(g * x + o);
  }
  if (spec.smoothing_sigma > 0.0) gaussian_stage(out.image, spec.smoothing_sigma);
  if (spec.noise_sigma > 0.0) {
    std::mt19937_64 rng(derive_seed(spec.rng_seed, kStageNoise));
    std::normal_distribution<double> n(0.0, spec.noise_sigma);
    for (auto& x : out.image.data) x = static_cast<float>(x + n(rng));
  }
  if (spec.histogram_shift != 0.0) {
    for (auto& x : out.image.data)
      x = static_cast<float>(histogram_remap(x, spec.histogram_shift));
  }
  if (spec.bias_field_amplitude > 0.0) {
    bias_stage(out.image, spec.bias_field_amplitude, spec.rng_seed);
  }
  return out;
}

}  // namespace

DomainSpec DomainSpec::identity(int domain_id) {
  DomainSpec s;
  s.domain_id = domain_id;
  return s;
}

std::array<double, 7> DomainSpec::appearance_tuple() const {
  return {intensity_gain,       intensity_offset, noise_sigma,
          smoothing_sigma,      histogram_shift,  bias_field_amplitude,
          resolution_scale};
}

void to_json(nlohmann::json& j, const DomainSpec& s) {
  j = nlohmann::json{{"domain_id", s.domain_id},
                     {"intensity_gain", s.intensity_gain},
                     {"intensity_offset", s.intensity_offset},
                     {"noise_sigma", s.noise_sigma},
                     {"smoothing_sigma", s.smoothing_sigma},
                     {"histogram_shift", s.histogram_shift},
                     {"bias_field_amplitude", s.bias_field_amplitude},
                     {"resolution_scale", s.resolution_scale},
                     {"geometric", s.geometric},
                     {"max_rotation_deg", s.max_rotation_deg},
                     {"scale_min", s.scale_min},
                     {"scale_max", s.scale_max},
                     {"rng_seed", s.rng_seed}};
}

void from_json(const nlohmann::json& j, DomainSpec& s) {
  s = DomainSpec{};
  s.domain_id = j.value("domain_id", 0);
  s.intensity_gain = j.value("intensity_gain", 1.0);
  s.intensity_offset = j.value("intensity_offset", 0.0);
  s.noise_sigma = j.value("noise_sigma", 0.0);
  s.smoothing_sigma = j.value("smoothing_sigma", 0.0);
  s.histogram_shift = j.value("histogram_shift", 0.0);
  s.bias_field_amplitude = j.value("bias_field_amplitude", 0.0);
  s.resolution_scale = j.value("resolution_scale", 1.0);
  s.geometric = j.value("geometric", false);
  s.max_rotation_deg = j.value("max_rotation_deg", 10.0);
  s.scale_min = j.value("scale_min", 0.9);
  s.scale_max = j.value("scale_max", 1.1);
  s.rng_seed = j.value("rng_seed", std::uint64_t{0});
}

void to_json(nlohmann::json& j, const ShiftRanges& r) {
  auto pr = [](const std::pair<double, double>& p) {
    return nlohmann::json::array({p.first, p.second});
  };
  j = nlohmann::json{{"gain", pr(r.gain)},
                     {"offset", pr(r.offset)},
                     {"noise_sigma", pr(r.noise_sigma)},
                     {"smoothing_sigma", pr(r.smoothing_sigma)},
                     {"histogram_shift", pr(r.histogram_shift)},
                     {"bias_amplitude", pr(r.bias_amplitude)},
                     {"resolution_scale", pr(r.resolution_scale)},
                     {"geometric", r.geometric},
                     {"max_rotation_deg", r.max_rotation_deg},
                     {"scale_min", r.scale_min},
                     {"scale_max", r.scale_max}};
}

void from_json(const nlohmann::json& j, ShiftRanges& r) {
  r = ShiftRanges{};
  auto pr = [&](const char* key, std::pair<double, double>& out) {
    if (!j.contains(key)) return;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != 2) {
      throw ConfigError(std::string("field '") + key +
                        "' must be a [lo, hi] pair");
    }
    out = {a[0].get<double>(), a[1].get<double>()};
  };
  pr("gain", r.gain);
  pr("offset", r.offset);
  pr("noise_sigma", r.noise_sigma);
  pr("smoothing_sigma", r.smoothing_sigma);
  pr("histogram_shift", r.histogram_shift);
  pr("bias_amplitude", r.bias_amplitude);
  pr("resolution_scale", r.resolution_scale);
  r.geometric = j.value("geometric", r.geometric);
  r.max_rotation_deg = j.value("max_rotation_deg", r.max_rotation_deg);
  r.scale_min = j.value("scale_min", r.scale_min);
  r.scale_max = j.value("scale_max", r.scale_max);
}

DomainSpec sample_domain_spec(const ShiftRanges& ranges, int domain_id,
                              std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(domain_id)));
  DomainSpec s;
  s.domain_id = domain_id;
  s.intensity_gain = uniform(rng, ranges.gain);
  s.intensity_offset = uniform(rng, ranges.offset);
  s.noise_sigma = uniform(rng, ranges.noise_sigma);
  s.smoothing_sigma = uniform(rng, ranges.smoothing_sigma);
  s.histogram_shift = uniform(rng, ranges.histogram_shift);
  s.bias_field_amplitude = uniform(rng, ranges.bias_amplitude);
  s.resolution_scale = uniform(rng, ranges.resolution_scale);
  s.geometric = ranges.geometric;
  s.max_rotation_deg = ranges.max_rotation_deg;
  s.scale_min = ranges.scale_min;
  s.scale_max = ranges.scale_max;
  s.rng_seed = derive_seed(seed, static_cast<std::uint64_t>(domain_id), 1);
  return s;
}

std::size_t lattice_ball_count(double radius) {
  const int r = static_cast<int>(std::floor(radius));
  const double r2 = radius * radius;
  std::size_t n = 0;
  for (int z = -r; z <= r; ++z)
    for (int y = -r; y <= r; ++y)
      for (int x = -r; x <= r; ++x)
        if (z * z + y * y + x * x <= r2) ++n;
  return n;
}

DomainSample generate_phantom(std::uint64_t seed, Shape3 shape,
                              std::pair<double, double> aneurysm_radius_range,
                              PhantomGeometry* geometry) {
  require(shape.d >= 16 && shape.h >= 16 && shape.w >= 16,
          "phantom shape " + shape.str() + " must be at least 16 per axis");
  const auto [rmin, rmax] = aneurysm_radius_range;
  require(rmin >= 1.0 && rmin <= rmax,
          "aneurysm radius range must satisfy 1 <= lo <= hi");
  require(rmax <= shape.min_extent() / 4.0,
          "aneurysm radius exceeds min(shape)/4 for shape " + shape.str());
  require(static_cast<double>(lattice_ball_count(rmax)) <
              0.05 * static_cast<double>(shape.voxels()),
          "shape " + shape.str() +
              " is too small: the largest aneurysm would exceed 5% of voxels");

  std::mt19937_64 rng(derive_seed(seed, kPhantom));
  const std::array<int, 3> ext{shape.d, shape.h, shape.w};
  const int axis = static_cast<int>(rng() % 3);
  const double vessel_r = uniform(rng, 1.2, 2.0);

  std::array<double, 3> amp{}, freq{}, phase{}, ctr{};
  for (int i = 0; i < 3; ++i) {
    amp[i] = uniform(rng, 0.08, 0.18) * ext[i];
    freq[i] = uniform(rng, 0.5, 1.5) * std::numbers::pi;
    phase[i] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    ctr[i] = uniform(rng, 0.35, 0.65) * (ext[i] - 1);
  }
  constexpr int kPoints = 256;
  std::vector<Vec3> line(kPoints);
  for (int k = 0; k < kPoints; ++k) {
    const double t = static_cast<double>(k) / (kPoints - 1);
    for (int i = 0; i < 3; ++i) {
      line[k][i] = (i == axis)
                       ? -2.0 + t * (ext[i] + 3.0)
                       : ctr[i] + amp[i] * std::sin(freq[i] * t + phase[i]);
    }
  }

  // Aneurysm: sphere bulging sideways off the centerline.
  const double ar = uniform(rng, rmin, rmax);
  const int k0 = static_cast<int>(uniform(rng, 0.35, 0.65) * (kPoints - 1));
  Vec3 tan{};
  for (int i = 0; i < 3; ++i) tan[i] = line[k0 + 1][i] - line[k0 - 1][i];
  const double tn = std::sqrt(dist2(tan, Vec3{}));
  for (auto& t : tan) t /= tn;
  Vec3 dir{};
  std::normal_distribution<double> g(0.0, 1.0);
  double dn = 0.0;
  while (dn < 1e-6) {
    for (auto& d : dir) d = g(rng);
    const double dot = dir[0] * tan[0] + dir[1] * tan[1] + dir[2] * tan[2];
    for (int i = 0; i < 3; ++i) dir[i] -= dot * tan[i];
    dn = std::sqrt(dist2(dir, Vec3{}));
  }
  std::array<int, 3> centre{};
  const int margin = static_cast<int>(std::ceil(ar)) + 1;
  for (int i = 0; i < 3; ++i) {
    const double c = line[k0][i] + dir[i] / dn * (vessel_r + 0.6 * ar);
    centre[i] = std::clamp(static_cast<int>(std::lround(c)), margin,
                           ext[i] - 1 - margin);
  }

  constexpr double kBackground = 0.1;
  constexpr double kVessel = 0.75;
  constexpr double kAneurysm = 1.0;
  DomainSample out;
  out.image = Volume(shape, static_cast<float>(kBackground));
  out.mask = LabelMask(shape);
  const Vec3 cc{static_cast<double>(centre[0]), static_cast<double>(centre[1]),
                static_cast<double>(centre[2])};
  const double ar2 = ar * ar;
  for (int z = 0; z < shape.d; ++z) {
    for (int y = 0; y < shape.h; ++y) {
      for (int x = 0; x < shape.w; ++x) {
        const Vec3 p{static_cast<double>(z), static_cast<double>(y),
                     static_cast<double>(x)};
        double best = std::numeric_limits<double>::max();
        for (const auto& q : line) best = std::min(best, dist2(p, q));
        const double vessel_occ =
            std::clamp(vessel_r + 0.5 - std::sqrt(best), 0.0, 1.0);
        const double d2c = dist2(p, cc);
        const double an_occ = std::clamp(ar + 0.5 - std::sqrt(d2c), 0.0, 1.0);
        const double v = std::max(kBackground + (kVessel - kBackground) * vessel_occ,
                                  kBackground + (kAneurysm - kBackground) * an_occ);
        out.image.at(z, y, x) = static_cast<float>(v);
        out.mask.at(z, y, x) = d2c <= ar2 ? 1 : 0;
      }
    }
  }
  out.domain_id = 0;
  out.variant = Variant::kSource;
  if (geometry != nullptr) {
    geometry->aneurysm_center = centre;
    geometry->aneurysm_radius = ar;
    geometry->vessel_radius = vessel_r;
  }
  return out;
}

DomainSample apply_domain_shift(const DomainSample& sample,
                                const DomainSpec& spec) {
  require(sample.variant == Variant::kSource,
          "apply_domain_shift expects a SOURCE sample");
  DomainSample out = run_pipeline(sample, spec);
  out.variant = Variant::kTarget;
  return out;
}

DomainSample render_in_domain(const DomainSample& phantom,
                              const DomainSpec& spec) {
  require(phantom.variant == Variant::kSource,
          "render_in_domain expects a SOURCE sample");
  DomainSample out = run_pipeline(phantom, spec);
  out.domain_id = spec.domain_id;
  out.variant = Variant::kSource;
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory

namespace {

fs::path domain_dir(const fs::path& root, int k) {
  return root / ("domain_" + std::to_string(k));
}

std::string stem(int i) { return "sample_" + std::to_string(i); }

}  // namespace

void write_sample(const fs::path& dir, int index, const DomainSample& s,
                  const DomainSpec& spec, std::uint64_t seed) {
  fs::create_directories(dir);
  write_f32_le(dir / (stem(index) + ".img.raw"), s.image.data);
  write_bytes(dir / (stem(index) + ".msk.raw"), s.mask.data);
  const Shape3 sh = s.image.shape;
  nlohmann::json meta{
      {"shape", {sh.d, sh.h, sh.w}},
      {"spacing", s.image.spacing},
      {"domain_id", s.domain_id},
      {"variant", to_string(s.variant)},
      {"seed", seed},
      {"domain_spec", spec},
  };
  write_json(dir / (stem(index) + ".json"), meta);
}

DomainSample read_sample(const fs::path& dir, int index) {
  const auto meta = read_json(dir / (stem(index) + ".json"));
  DomainSample s;
  const auto shp = meta.at("shape");
  const Shape3 shape{shp[0].get<int>(), shp[1].get<int>(), shp[2].get<int>()};
  s.image = Volume(shape);
  s.image.spacing = meta.at("spacing").get<std::array<double, 3>>();
  s.image.data = read_f32_le(dir / (stem(index) + ".img.raw"));
  s.mask = LabelMask(shape);
  s.mask.data = read_bytes(dir / (stem(index) + ".msk.raw"));
  if (s.image.data.size() != shape.voxels() ||
      s.mask.data.size() != shape.voxels()) {
    throw ConfigError((dir / stem(index)).string() +
                      ": raw payload does not match shape " + shape.str());
  }
  s.domain_id = meta.at("domain_id").get<int>();
  s.variant = variant_from_string(meta.at("variant").get<std::string>());
  return s;
}

Dataset Dataset::open(const fs::path& root) {
  if (!fs::is_directory(root)) {
    throw ConfigError("dataset directory not found: " + root.string());
  }
  Dataset ds;
  ds.root_ = root;
  static const std::regex dom_re("domain_([0-9]+)");
  static const std::regex smp_re("sample_([0-9]+)\\.json");
  std::vector<std::pair<int, int>> found;
  for (const auto& e : fs::directory_iterator(root)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (!e.is_directory() || !std::regex_match(name, m, dom_re)) continue;
    int n = 0;
    for (const auto& f : fs::directory_iterator(e.path())) {
      const std::string fname = f.path().filename().string();
      if (std::regex_match(fname, smp_re)) ++n;
    }
    found.emplace_back(std::stoi(m[1].str()), n);
  }
  if (found.empty()) {
    throw ConfigError("no domain_<k> directories under " + root.string());
  }
  std::sort(found.begin(), found.end());
  for (auto [k, n] : found) {
    if (n == 0) {
      throw ConfigError(domain_dir(root, k).string() + " holds no samples");
    }
    ds.domains_.push_back(k);
    ds.counts_.push_back(n);
  }
  const auto meta = read_json(domain_dir(root, found.front().first) / "sample_0.json");
  const auto shp = meta.at("shape");
  ds.shape_ = Shape3{shp[0].get<int>(), shp[1].get<int>(), shp[2].get<int>()};
  return ds;
}

bool Dataset::has_domain(int k) const {
  return std::find(domains_.begin(), domains_.end(), k) != domains_.end();
}

int Dataset::samples_in_domain(int k) const {
  for (std::size_t i = 0; i < domains_.size(); ++i)
    if (domains_[i] == k) return counts_[i];
  throw ConfigError("dataset has no domain " + std::to_string(k));
}

int Dataset::total_samples() const {
  int n = 0;
  for (int c : counts_) n += c;
  return n;
}

DomainSample Dataset::load(int domain, int index) const {
  if (index < 0 || index >= samples_in_domain(domain)) {
    throw ConfigError("sample index out of range");
  }
  return read_sample(domain_dir(root_, domain), index);
}

std::vector<DomainSample> Dataset::load_domain(int domain) const {
  std::vector<DomainSample> out;
  const int n = samples_in_domain(domain);
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(load(domain, i));
  return out;
}

DomainSpec Dataset::domain_spec(int domain) const {
  (void)samples_in_domain(domain);  // validates the id
  return read_json(domain_dir(root_, domain) / "sample_0.json")
      .at("domain_spec")
      .get<DomainSpec>();
}

std::string Dataset::content_digest() const {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root_))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string joined;
  for (const auto& f : files) {
    const auto bytes = read_bytes(f);
    joined += fs::relative(f, root_).generic_string();
    joined += '\0';
    joined += sha256_hex(bytes);
    joined += '\n';
  }
  return sha256_hex(joined);
}

Dataset build_dataset(const fs::path& root, const DatasetOptions& options) {
  require(options.num_domains >= 2, "num_domains must be at least 2");
  require(options.samples_per_domain >= 1,
          "samples_per_domain must be at least 1");
  if (fs::exists(root) && !fs::is_empty(root)) {
    throw ConfigError("output directory exists and is not empty: " +
                      root.string());
  }
  fs::create_directories(root);

  std::vector<DomainSpec> specs;
  const std::uint64_t spec_seed = derive_seed(options.master_seed, 0xD0);
  for (int k = 0; k < options.num_domains; ++k) {
    DomainSpec s = sample_domain_spec(options.domain_ranges, k, spec_seed);
    // Continuous draws practically never collide; redraw if they do.
    for (std::uint64_t retry = 1;; ++retry) {
      const bool clash = std::any_of(specs.begin(), specs.end(), [&](const auto& o) {
        return o.appearance_tuple() == s.appearance_tuple();
      });
      if (!clash) break;
      s = sample_domain_spec(options.domain_ranges, k,
                             derive_seed(spec_seed, retry));
    }
    specs.push_back(s);
  }

  for (int k = 0; k < options.num_domains; ++k) {
    const fs::path dir = domain_dir(root, k);
    for (int i = 0; i < options.samples_per_domain; ++i) {
      const std::uint64_t seed = derive_seed(options.master_seed,
                                             static_cast<std::uint64_t>(k),
                                             static_cast<std::uint64_t>(i), 0xF);
      const DomainSample phantom =
          generate_phantom(seed, options.shape, options.aneurysm_radius_range);
      DomainSpec spec = specs[static_cast<std::size_t>(k)];
      spec.rng_seed = derive_seed(spec.rng_seed, static_cast<std::uint64_t>(i));
      write_sample(dir, i, render_in_domain(phantom, spec), spec, seed);
    }
  }
  return Dataset::open(root);
}

}  // namespace dglab
