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

// Supervised Dice + cross-entropy loss, cosine-similarity contrastive loss
// over student/teacher pairs, Fourier high-pass "boundary" features, and the
// weighted total objective. All functions are pure and reentrant (FFTW plan
// creation is serialised internally).

#pragma once

#include <array>
#include <span>
#include <utility>
#include <vector>

#include "dglab/model.hpp"
#include "dglab/volume.hpp"

namespace dglab {

inline constexpr double kDiceEps = 1e-7;
inline constexpr double kLogEps = 1e-7;

struct DceTerms {
  double dice = 0.0;  // 1 - (2|p∩y| + eps) / (|p| + |y| + eps)
  double ce = 0.0;    // -(1/V) sum y log(max(p, eps))
  [[nodiscard]] double value() const { return dice + ce; }
};

/// Dice + foreground cross-entropy for one case.
DceTerms dce_terms(std::span<const double> p, const LabelMask& y);
double dce_loss(const Prediction& p, const LabelMask& y);
/// Mean over the batch (N = batch size).
double dce_loss(std::span<const Prediction> p, std::span<const LabelMask> y);

/// Value and d(loss)/d(p) for one case.
double dce_loss_grad(std::span<const double> p, const LabelMask& y,
                     std::span<double> grad_p);

/// Cosine similarity. Throws DegenerateInputError on a zero-norm input.
double cosine_similarity(std::span<const double> u, std::span<const double> v);

/// Adds upstream * d h(u, v) / du (and / dv) into du, dv.
void cosine_similarity_backward(std::span<const double> u,
                                std::span<const double> v, double upstream,
                                std::span<double> du, std::span<double> dv);

/// Positive and negative pairs expressed as indices into a vector pool, so
/// that gradients can be routed back to the tensors they came from.
struct PairSet {
  std::vector<std::vector<double>> pool;
  std::vector<std::pair<int, int>> positives;
  std::vector<std::pair<int, int>> negatives;

  [[nodiscard]] std::size_t num_positive() const { return positives.size(); }
  [[nodiscard]] std::size_t num_negative() const { return negatives.size(); }

  /// Concatenates another set (indices are re-based).
  void append(const PairSet& other);
};

/// -log( sum_i e^{pos_i/tau} / (sum_i e^{pos_i/tau} + sum_j e^{neg_j/tau}) )
double contrastive_from_similarities(std::span<const double> pos,
                                     std::span<const double> neg,
                                     double temperature = 1.0);

double contrastive_loss(const PairSet& pairs, double temperature = 1.0);

struct ContrastiveGrad {
  double loss = 0.0;
  std::vector<std::vector<double>> grad;  // one per pool vector
};

ContrastiveGrad contrastive_loss_grad(const PairSet& pairs,
                                      double temperature = 1.0);

struct MaskSpec {
  double cutoff_fraction = 0.25;
  void validate() const;
};

/// Side of the zeroed low-frequency block along an axis of length n.
int lowpass_block_side(int n, double cutoff_fraction);

/// Per-channel 3D DFT, zero the DC-centred low-frequency cube, inverse DFT,
/// real part. The map is linear and self-adjoint, so it is also its own
/// backward pass.
FeatureTensor boundary_extract(const FeatureTensor& z, const MaskSpec& mask);
std::vector<double> boundary_extract(std::span<const double> data, int channels,
                                     Shape3 shape, const MaskSpec& mask);

struct FeaturePairSets {
  PairSet volume;
  PairSet boundary;
};

/// Pool order is [z_stu_s, z_stu_t, z_tea_s, z_tea_t]; positives
/// (stu_s, tea_s), (stu_t, tea_t); negatives (stu_s, stu_t), (tea_s, tea_t),
/// (stu_s, tea_t), (tea_s, stu_t). The boundary set has the same topology
/// over b = boundary_extract(z).
FeaturePairSets build_pair_sets(const FeatureTensor& z_stu_s,
                                const FeatureTensor& z_stu_t,
                                const FeatureTensor& z_tea_s,
                                const FeatureTensor& z_tea_t,
                                const MaskSpec& mask);

struct LossWeights {
  double lambda1 = 0.25;
  double lambda2 = 0.5;
};

/// lambda1 * (sum of the four supervised terms) + lambda2 * (L_c^z + L_c^b)
double total_loss(const std::array<double, 4>& supervised, double lc_z,
                  double lc_b, const LossWeights& w);

}  // namespace dglab
