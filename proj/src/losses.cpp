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

#include "dglab/losses.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <numeric>

#include <fftw3.h>

#include "dglab/error.hpp"

namespace dglab {

using detail::ensure;
using detail::require;

// ---------------------------------------------------------------------------
// Dice + cross-entropy

DceTerms dce_terms(std::span<const double> p, const LabelMask& y) {
  require(p.size() == y.data.size(), "prediction and label sizes differ");
  double inter = 0.0, sp = 0.0, sy = 0.0, ce = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double yi = y.data[i];
    inter += p[i] * yi;
    sp += p[i];
    sy += yi;
    if (yi != 0.0) ce -= std::log(std::max(p[i], kLogEps));
  }
  DceTerms t;
  t.dice = 1.0 - (2.0 * inter + kDiceEps) / (sp + sy + kDiceEps);
  t.ce = p.empty() ? 0.0 : ce / static_cast<double>(p.size());
  return t;
}

double dce_loss(const Prediction& p, const LabelMask& y) {
  require(p.shape == y.shape, "prediction and label shapes differ");
  return dce_terms(p.probs, y).value();
}

double dce_loss(std::span<const Prediction> p, std::span<const LabelMask> y) {
  require(!p.empty() && p.size() == y.size(),
          "batch of predictions and labels must be nonempty and equal-sized");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += dce_loss(p[i], y[i]);
  return acc / static_cast<double>(p.size());
}

double dce_loss_grad(std::span<const double> p, const LabelMask& y,
                     std::span<double> grad_p) {
  require(p.size() == y.data.size() && grad_p.size() == p.size(),
          "prediction, label and gradient sizes differ");
  double inter = 0.0, sp = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * y.data[i];
    sp += p[i];
    sy += y.data[i];
  }
  const double num = 2.0 * inter + kDiceEps;
  const double den = sp + sy + kDiceEps;
  const double inv_v = 1.0 / static_cast<double>(p.size());
  double ce = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double yi = y.data[i];
    double g = -(2.0 * yi * den - num) / (den * den);
    if (yi != 0.0) {
      ce -= std::log(std::max(p[i], kLogEps));
      if (p[i] > kLogEps) g -= inv_v * yi / p[i];
    }
    grad_p[i] = g;
  }
  return 1.0 - num / den + ce * inv_v;
}

// ---------------------------------------------------------------------------
// Cosine similarity and contrastive loss

namespace {

double norm2(std::span<const double> u) {
  return std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
}

double log_sum_exp(std::span<const double> a, double scale) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : a) m = std::max(m, x * scale);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : a) s += std::exp(x * scale - m);
  return m + std::log(s);
}

}  // namespace

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  require(u.size() == v.size(), "cosine_similarity: length mismatch");
  const double nu = norm2(u), nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) {  // NaN propagates to the caller's finiteness check
    throw DegenerateInputError("cosine_similarity: zero-norm input");
  }
  const double h = std::inner_product(u.begin(), u.end(), v.begin(), 0.0) / (nu * nv);
  return std::clamp(h, -1.0, 1.0);
}

void cosine_similarity_backward(std::span<const double> u,
                                std::span<const double> v, double upstream,
                                std::span<double> du, std::span<double> dv) {
  const double nu = norm2(u), nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) {  // NaN propagates to the caller's finiteness check
    throw DegenerateInputError("cosine_similarity: zero-norm input");
  }
  const double dot = std::inner_product(u.begin(), u.end(), v.begin(), 0.0);
  const double h = dot / (nu * nv);
  const double a = upstream / (nu * nv);
  const double bu = upstream * h / (nu * nu);
  const double bv = upstream * h / (nv * nv);
  for (std::size_t i = 0; i < u.size(); ++i) {
    du[i] += a * v[i] - bu * u[i];
    dv[i] += a * u[i] - bv * v[i];
  }
}

void PairSet::append(const PairSet& other) {
  const int base = static_cast<int>(pool.size());
  pool.insert(pool.end(), other.pool.begin(), other.pool.end());
  for (auto [a, b] : other.positives) positives.emplace_back(a + base, b + base);
  for (auto [a, b] : other.negatives) negatives.emplace_back(a + base, b + base);
}

double contrastive_from_similarities(std::span<const double> pos,
                                     std::span<const double> neg,
                                     double temperature) {
  require(!pos.empty() && !neg.empty(),
          "contrastive loss needs at least one positive and one negative pair");
  require(temperature > 0.0, "temperature must be positive");
  std::vector<double> all(pos.begin(), pos.end());
  all.insert(all.end(), neg.begin(), neg.end());
  const double scale = 1.0 / temperature;
  return log_sum_exp(all, scale) - log_sum_exp(pos, scale);
}

namespace {

std::pair<std::vector<double>, std::vector<double>> similarities(const PairSet& s) {
  require(s.num_positive() >= 1 && s.num_negative() >= 1,
          "contrastive loss needs at least one positive and one negative pair");
  auto sims = [&](const std::vector<std::pair<int, int>>& pairs) {
    std::vector<double> out;
    out.reserve(pairs.size());
    for (auto [a, b] : pairs) {
      out.push_back(cosine_similarity(s.pool.at(static_cast<std::size_t>(a)),
                                      s.pool.at(static_cast<std::size_t>(b))));
    }
    return out;
  };
  return {sims(s.positives), sims(s.negatives)};
}

}  // namespace

double contrastive_loss(const PairSet& pairs, double temperature) {
  const auto [pos, neg] = similarities(pairs);
  return contrastive_from_similarities(pos, neg, temperature);
}

ContrastiveGrad contrastive_loss_grad(const PairSet& pairs, double temperature) {
  const auto [pos, neg] = similarities(pairs);
  ContrastiveGrad out;
  out.loss = contrastive_from_similarities(pos, neg, temperature);
  const double scale = 1.0 / temperature;
  std::vector<double> all(pos.begin(), pos.end());
  all.insert(all.end(), neg.begin(), neg.end());
  const double lse_all = log_sum_exp(all, scale);
  const double lse_pos = log_sum_exp(pos, scale);

  out.grad.resize(pairs.pool.size());
  for (std::size_t i = 0; i < pairs.pool.size(); ++i)
    out.grad[i].assign(pairs.pool[i].size(), 0.0);
  auto route = [&](std::pair<int, int> ab, double upstream) {
    const auto a = static_cast<std::size_t>(ab.first);
    const auto b = static_cast<std::size_t>(ab.second);
    cosine_similarity_backward(pairs.pool[a], pairs.pool[b], upstream,
                               out.grad[a], out.grad[b]);
  };
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const double d = (std::exp(pos[i] * scale - lse_all) -
                      std::exp(pos[i] * scale - lse_pos)) * scale;
    route(pairs.positives[i], d);
  }
  for (std::size_t j = 0; j < neg.size(); ++j) {
    route(pairs.negatives[j], std::exp(neg[j] * scale - lse_all) * scale);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fourier boundary features

void MaskSpec::validate() const {
  require(cutoff_fraction > 0.0 && cutoff_fraction < 1.0,
          "cutoff_fraction must lie in (0, 1)");
}

int lowpass_block_side(int n, double cutoff_fraction) {
  const int s = static_cast<int>(std::ceil(cutoff_fraction * n - 1e-9));
  return std::clamp(s, 1, n);
}

namespace {

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

// Mask value per unshifted index along one axis: 1 when the index falls in
// the central block of the DC-centred (fftshifted) spectrum.
std::vector<char> central_block(int n, double cutoff) {
  const int side = lowpass_block_side(n, cutoff);
  const int start = n / 2 - side / 2;
  std::vector<char> in(static_cast<std::size_t>(n), 0);
  for (int k = 0; k < n; ++k) {
    const int pos = (k + n / 2) % n;
    in[static_cast<std::size_t>(k)] = (pos >= start && pos < start + side) ? 1 : 0;
  }
  return in;
}

}  // namespace

std::vector<double> boundary_extract(std::span<const double> data, int channels,
                                     Shape3 shape, const MaskSpec& mask) {
  mask.validate();
  const std::size_t n = shape.voxels();
  require(channels >= 1 && data.size() == static_cast<std::size_t>(channels) * n,
          "boundary_extract: data size does not match channels x shape");

  std::unique_ptr<fftw_complex, FftwFree> buf(
      static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n)));
  fftw_plan fwd, inv;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fwd = fftw_plan_dft_3d(shape.d, shape.h, shape.w, buf.get(), buf.get(),
                           FFTW_FORWARD, FFTW_ESTIMATE);
    inv = fftw_plan_dft_3d(shape.d, shape.h, shape.w, buf.get(), buf.get(),
                           FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  ensure(fwd != nullptr && inv != nullptr, "FFTW planning failed");

  const auto md = central_block(shape.d, mask.cutoff_fraction);
  const auto mh = central_block(shape.h, mask.cutoff_fraction);
  const auto mw = central_block(shape.w, mask.cutoff_fraction);

  std::vector<double> out(data.size());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (int c = 0; c < channels; ++c) {
    const double* src = data.data() + static_cast<std::size_t>(c) * n;
    for (std::size_t i = 0; i < n; ++i) {
      buf.get()[i][0] = src[i];
      buf.get()[i][1] = 0.0;
    }
    fftw_execute(fwd);
    for (int z = 0; z < shape.d; ++z)
      for (int y = 0; y < shape.h; ++y)
        for (int x = 0; x < shape.w; ++x) {
          if (md[static_cast<std::size_t>(z)] && mh[static_cast<std::size_t>(y)] &&
              mw[static_cast<std::size_t>(x)]) {
            const std::size_t i = shape.index(z, y, x);
            buf.get()[i][0] = 0.0;
            buf.get()[i][1] = 0.0;
          }
        }
    fftw_execute(inv);
    double* dst = out.data() + static_cast<std::size_t>(c) * n;
    for (std::size_t i = 0; i < n; ++i) dst[i] = buf.get()[i][0] * inv_n;
  }
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(inv);
  }
  return out;
}

FeatureTensor boundary_extract(const FeatureTensor& z, const MaskSpec& mask) {
  FeatureTensor b = z;
  b.data = boundary_extract(z.data, z.channels, z.shape, mask);
  return b;
}

FeaturePairSets build_pair_sets(const FeatureTensor& z_stu_s,
                                const FeatureTensor& z_stu_t,
                                const FeatureTensor& z_tea_s,
                                const FeatureTensor& z_tea_t,
                                const MaskSpec& mask) {
  const std::array<const FeatureTensor*, 4> zs{&z_stu_s, &z_stu_t, &z_tea_s, &z_tea_t};
  const std::array<Network, 4> nets{Network::kStudent, Network::kStudent,
                                    Network::kTeacher, Network::kTeacher};
  const std::array<Variant, 4> vars{Variant::kSource, Variant::kTarget,
                                    Variant::kSource, Variant::kTarget};
  for (std::size_t i = 0; i < 4; ++i) {
    require(zs[i]->channels == z_stu_s.channels && zs[i]->shape == z_stu_s.shape &&
                zs[i]->data.size() == z_stu_s.data.size(),
            "build_pair_sets: feature tensors differ in shape");
    require(zs[i]->source_network == nets[i] && zs[i]->source_variant == vars[i],
            std::string("build_pair_sets: argument ") + std::to_string(i) +
                " is tagged " + to_string(zs[i]->source_network) + "/" +
                to_string(zs[i]->source_variant) + ", expected " +
                to_string(nets[i]) + "/" + to_string(vars[i]));
  }
  const std::vector<std::pair<int, int>> pos{{0, 2}, {1, 3}};
  const std::vector<std::pair<int, int>> neg{{0, 1}, {2, 3}, {0, 3}, {2, 1}};
  FeaturePairSets out;
  for (const auto* z : zs) {
    out.volume.pool.push_back(z->data);
    out.boundary.pool.push_back(boundary_extract(z->data, z->channels, z->shape, mask));
  }
  out.volume.positives = out.boundary.positives = pos;
  out.volume.negatives = out.boundary.negatives = neg;
  return out;
}

double total_loss(const std::array<double, 4>& supervised, double lc_z,
                  double lc_b, const LossWeights& w) {
  return w.lambda1 * (supervised[0] + supervised[1] + supervised[2] + supervised[3]) +
         w.lambda2 * (lc_z + lc_b);
}

}  // namespace dglab
