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

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "dglab/error.hpp"
#include "dglab/losses.hpp"

using namespace dglab;

namespace {

LabelMask mask_of(Shape3 s, std::initializer_list<std::size_t> on) {
  LabelMask m(s);
  for (auto i : on) m.data[i] = 1;
  return m;
}

// Pair set whose i-th pair has cosine exactly sims[i] (2-D unit vectors).
PairSet pairs_with_sims(const std::vector<double>& pos, const std::vector<double>& neg) {
  PairSet ps;
  auto add = [&](double s, std::vector<std::pair<int, int>>& list) {
    const int a = static_cast<int>(ps.pool.size());
    ps.pool.push_back({1.0, 0.0});
    ps.pool.push_back({s, std::sqrt(std::max(0.0, 1.0 - s * s))});
    list.emplace_back(a, a + 1);
  };
  for (double s : pos) add(s, ps.positives);
  for (double s : neg) add(s, ps.negatives);
  return ps;
}

double naive_contrastive(const std::vector<double>& pos, const std::vector<double>& neg) {
  double sp = 0.0, sn = 0.0;
  for (double s : pos) sp += std::exp(s);
  for (double s : neg) sn += std::exp(s);
  return -std::log(sp / (sp + sn));
}

FeatureTensor tensor(int c, Shape3 s, std::vector<double> data, Network n, Variant v) {
  FeatureTensor z;
  z.channels = c;
  z.shape = s;
  z.data = std::move(data);
  z.source_network = n;
  z.source_variant = v;
  return z;
}

// Direct O(N^2) DFT, centred-block mask on signed frequencies, inverse DFT.
std::vector<double> dft_highpass_oracle(const std::vector<double>& z, int n, double cutoff) {
  const int side = static_cast<int>(std::ceil(cutoff * n - 1e-9));
  const int lo = -(side / 2);
  const int hi = lo + side;  // exclusive
  auto signed_freq = [n](int k) { return k < n / 2 ? k : k - n; };
  auto masked = [&](int k) {
    const int f = signed_freq(k);
    return f >= lo && f < hi;
  };
  const double w = 2.0 * std::numbers::pi / n;
  const int N = n * n * n;
  std::vector<std::complex<double>> Z(N);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < n; ++c) {
        std::complex<double> acc = 0.0;
        for (int x = 0; x < n; ++x)
          for (int y = 0; y < n; ++y)
            for (int q = 0; q < n; ++q)
              acc += z[(x * n + y) * n + q] * std::polar(1.0, -w * (a * x + b * y + c * q));
        Z[(a * n + b) * n + c] = (masked(a) && masked(b) && masked(c)) ? 0.0 : acc;
      }
  std::vector<double> out(N);
  for (int x = 0; x < n; ++x)
    for (int y = 0; y < n; ++y)
      for (int q = 0; q < n; ++q) {
        std::complex<double> acc = 0.0;
        for (int a = 0; a < n; ++a)
          for (int b = 0; b < n; ++b)
            for (int c = 0; c < n; ++c)
              acc += Z[(a * n + b) * n + c] * std::polar(1.0, w * (a * x + b * y + c * q));
        out[(x * n + y) * n + q] = acc.real() / N;
      }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- DCE

TEST(Dce, PerfectPredictionIsZero) {
  const Shape3 s{4, 4, 4};
  const auto y = mask_of(s, {1, 5, 9, 30});
  std::vector<double> p(s.voxels(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = y.data[i];
  const auto t = dce_terms(p, y);
  EXPECT_NEAR(t.dice, 0.0, 1e-12);
  EXPECT_NEAR(t.ce, 0.0, 1e-12);
  EXPECT_NEAR(dce_loss(Prediction{s, p}, y), 0.0, 1e-12);
}

TEST(Dce, SingleVoxelHandEvaluation) {
  const Shape3 s{1, 1, 1};
  const auto y = mask_of(s, {0});
  const auto t = dce_terms(std::vector<double>{0.5}, y);
  EXPECT_NEAR(t.dice, 1.0 / 3.0, 1e-7);
  EXPECT_NEAR(t.ce, std::log(2.0), 1e-12);
  EXPECT_NEAR(t.value(), 1.0265, 1e-4);
}

TEST(Dce, EmptyTargetGivesUnitDiceNoCe) {
  const Shape3 s{2, 2, 2};
  const LabelMask y(s);
  const std::vector<double> p{0.1, 0.9, 0.3, 0.0, 0.2, 0.5, 0.7, 0.4};
  const auto t = dce_terms(p, y);
  EXPECT_EQ(t.ce, 0.0);
  EXPECT_NEAR(t.dice, 1.0, 1e-6);
}

TEST(Dce, BatchIsMeanOfCases) {
  const Shape3 s{2, 2, 2};
  std::vector<Prediction> ps{{s, std::vector<double>(8, 0.3)}, {s, std::vector<double>(8, 0.8)}};
  std::vector<LabelMask> ys{mask_of(s, {0, 1}), mask_of(s, {7})};
  const double mean = 0.5 * (dce_loss(ps[0], ys[0]) + dce_loss(ps[1], ys[1]));
  EXPECT_NEAR(dce_loss(ps, ys), mean, 1e-15);
}

TEST(Dce, MinimisedOnlyAtExactMatch) {
  const Shape3 s{3, 3, 3};
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    LabelMask y(s);
    for (auto& v : y.data) v = u(rng) < 0.3;
    y.data[0] = 1;
    std::vector<double> p(s.voxels());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = y.data[i];
    const std::size_t k = static_cast<std::size_t>(u(rng) * p.size());
    p[k] = y.data[k] ? 0.9 : 0.1;
    EXPECT_GT(dce_loss(Prediction{s, p}, y), 1e-4);
  }
}

TEST(Dce, GradientMatchesFiniteDifferences) {
  const Shape3 s{2, 3, 2};
  const auto y = mask_of(s, {0, 4, 7});
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<double> p(s.voxels());
  for (auto& v : p) v = u(rng);
  std::vector<double> g(p.size());
  const double val = dce_loss_grad(p, y, g);
  EXPECT_NEAR(val, dce_terms(p, y).value(), 1e-15);
  const double h = 1e-6;
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto pp = p, pm = p;
    pp[i] += h;
    pm[i] -= h;
    const double fd = (dce_terms(pp, y).value() - dce_terms(pm, y).value()) / (2 * h);
    EXPECT_NEAR(g[i], fd, 1e-7) << i;
  }
}

// ---------------------------------------------------------------- cosine

TEST(Cosine, WorkedExamples) {
  const std::vector<double> u{1, 2, 3}, v{4, 5, 6};
  EXPECT_NEAR(cosine_similarity(u, v), 32.0 / (std::sqrt(14.0) * std::sqrt(77.0)), 1e-15);
  EXPECT_NEAR(cosine_similarity(u, v), 0.974632, 1e-6);
  EXPECT_NEAR(cosine_similarity(u, u), 1.0, 1e-15);
  EXPECT_EQ(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
  EXPECT_THROW(cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{1, 0}),
               DegenerateInputError);
}

TEST(Cosine, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::vector<double> u(6), v(6);
  for (auto& x : u) x = n(rng);
  for (auto& x : v) x = n(rng);
  std::vector<double> du(6, 0.0), dv(6, 0.0);
  cosine_similarity_backward(u, v, 2.0, du, dv);
  const double h = 1e-6;
  for (int i = 0; i < 6; ++i) {
    auto up = u, um = u;
    up[i] += h;
    um[i] -= h;
    EXPECT_NEAR(du[i], 2.0 * (cosine_similarity(up, v) - cosine_similarity(um, v)) / (2 * h), 1e-8);
    auto vp = v, vm = v;
    vp[i] += h;
    vm[i] -= h;
    EXPECT_NEAR(dv[i], 2.0 * (cosine_similarity(u, vp) - cosine_similarity(u, vm)) / (2 * h), 1e-8);
  }
}

// ---------------------------------------------------------------- contrastive

TEST(Contrastive, AllEqualSimilaritiesGiveLog3) {
  for (double s : {-1.0, -0.3, 0.0, 0.5, 1.0})
    EXPECT_NEAR(contrastive_loss(pairs_with_sims({s, s}, {s, s, s, s})), std::log(3.0), 1e-9);
}

TEST(Contrastive, WorkedExample) {
  const double e = std::exp(1.0);
  const double expect = -std::log(2 * e / (2 * e + 4 / e));
  // Printed reference 0.23953 is rounded; the closed form is 0.2395448.
  EXPECT_NEAR(expect, 0.23953, 2e-5);
  EXPECT_NEAR(contrastive_loss(pairs_with_sims({1, 1}, {-1, -1, -1, -1})), expect, 1e-12);
  EXPECT_NEAR(contrastive_from_similarities(std::vector<double>{1, 1},
                                            std::vector<double>{-1, -1, -1, -1}),
              expect, 1e-12);
}

TEST(Contrastive, VeryNegativeNegativesApproachZero) {
  const double l = contrastive_from_similarities(std::vector<double>{0.0},
                                                 std::vector<double>{-1e3, -1e3});
  EXPECT_GE(l, 0.0);
  EXPECT_LT(l, 1e-12);
}

TEST(Contrastive, MatchesScalarOracleOn1000RandomSets) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> count(1, 8);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> pos(count(rng)), neg(count(rng));
    for (auto& s : pos) s = u(rng);
    for (auto& s : neg) s = u(rng);
    const double got = contrastive_loss(pairs_with_sims(pos, neg));
    const double want = naive_contrastive(pos, neg);
    worst = std::max(worst, std::abs(got - want) / want);
    ASSERT_GT(got, 0.0);
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Contrastive, MonotoneInPositiveAndNegativeSimilarities) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-0.9, 0.9);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> pos{u(rng), u(rng)}, neg{u(rng), u(rng), u(rng), u(rng)};
    const double base = contrastive_from_similarities(pos, neg);
    auto p2 = pos;
    p2[t % 2] += 0.05;
    EXPECT_LT(contrastive_from_similarities(p2, neg), base);
    auto n2 = neg;
    n2[t % 4] += 0.05;
    EXPECT_GT(contrastive_from_similarities(pos, n2), base);
  }
}

TEST(Contrastive, EmptySetsAreConfigErrors) {
  EXPECT_THROW(contrastive_loss(pairs_with_sims({}, {0.1})), ConfigError);
  EXPECT_THROW(contrastive_loss(pairs_with_sims({0.1}, {})), ConfigError);
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  PairSet ps;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> v(5);
    for (auto& x : v) x = n(rng);
    ps.pool.push_back(v);
  }
  ps.positives = {{0, 2}, {1, 3}};
  ps.negatives = {{0, 1}, {2, 3}, {0, 3}, {2, 1}};
  for (double tau : {1.0, 0.5}) {
    const auto g = contrastive_loss_grad(ps, tau);
    EXPECT_NEAR(g.loss, contrastive_loss(ps, tau), 1e-14);
    const double h = 1e-6;
    for (std::size_t k = 0; k < ps.pool.size(); ++k)
      for (std::size_t i = 0; i < 5; ++i) {
        PairSet pp = ps, pm = ps;
        pp.pool[k][i] += h;
        pm.pool[k][i] -= h;
        const double fd = (contrastive_loss(pp, tau) - contrastive_loss(pm, tau)) / (2 * h);
        EXPECT_NEAR(g.grad[k][i], fd, 1e-7) << k << "," << i;
      }
  }
}

TEST(Contrastive, AppendRebasesIndices) {
  PairSet a = pairs_with_sims({0.2}, {0.1});
  const PairSet b = pairs_with_sims({0.4}, {-0.3, 0.0});
  a.append(b);
  EXPECT_EQ(a.num_positive(), 2u);
  EXPECT_EQ(a.num_negative(), 3u);
  EXPECT_EQ(a.pool.size(), 10u);
  EXPECT_NEAR(contrastive_loss(a), naive_contrastive({0.2, 0.4}, {0.1, -0.3, 0.0}), 1e-12);
}

// ---------------------------------------------------------------- boundary

TEST(Boundary, BlockSide) {
  EXPECT_EQ(lowpass_block_side(8, 0.25), 2);
  EXPECT_EQ(lowpass_block_side(8, 0.3), 3);
  EXPECT_EQ(lowpass_block_side(7, 0.25), 2);
  MaskSpec bad{1.0};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.cutoff_fraction = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Boundary, ConstantVolumeVanishes) {
  const Shape3 s{8, 8, 8};
  const auto b = boundary_extract(std::vector<double>(2 * s.voxels(), 3.7), 2, s, MaskSpec{});
  double m = 0.0;
  for (double x : b) m = std::max(m, std::abs(x));
  EXPECT_LT(m, 1e-6);
}

TEST(Boundary, ImpulseMatchesBruteForceDft) {
  const int n = 8;
  const Shape3 s{n, n, n};
  for (std::size_t pos : {0u, 73u, 511u}) {
    for (double cutoff : {0.25, 0.4}) {
      std::vector<double> z(s.voxels(), 0.0);
      z[pos] = 1.0;
      const auto got = boundary_extract(z, 1, s, MaskSpec{cutoff});
      const auto want = dft_highpass_oracle(z, n, cutoff);
      for (std::size_t i = 0; i < z.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-8) << i;
    }
  }
}

TEST(Boundary, RandomInputMatchesBruteForceDft) {
  const int n = 8;
  const Shape3 s{n, n, n};
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  std::vector<double> z(s.voxels());
  for (auto& x : z) x = g(rng);
  const auto got = boundary_extract(z, 1, s, MaskSpec{});
  const auto want = dft_highpass_oracle(z, n, 0.25);
  for (std::size_t i = 0; i < z.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-8);
}

TEST(Boundary, Linearity) {
  const Shape3 s{4, 8, 8};
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  std::vector<double> z1(3 * s.voxels()), z2(3 * s.voxels());
  for (auto& x : z1) x = g(rng);
  for (auto& x : z2) x = g(rng);
  const double a = 1.7, b = -0.4;
  std::vector<double> mix(z1.size());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * z1[i] + b * z2[i];
  const auto bm = boundary_extract(mix, 3, s, MaskSpec{});
  const auto b1 = boundary_extract(z1, 3, s, MaskSpec{});
  const auto b2 = boundary_extract(z2, 3, s, MaskSpec{});
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double r = a * b1[i] + b * b2[i];
    num += (bm[i] - r) * (bm[i] - r);
    den += r * r;
  }
  EXPECT_LT(std::sqrt(num / den), 1e-10);
}

TEST(Boundary, RemovesEnergyAndIsSelfAdjoint) {
  const Shape3 s{8, 8, 8};
  std::mt19937_64 rng(10);
  std::normal_distribution<double> g;
  for (int t = 0; t < 10; ++t) {
    std::vector<double> z(s.voxels()), w(s.voxels());
    for (auto& x : z) x = g(rng) + 2.0;
    for (auto& x : w) x = g(rng);
    const auto bz = boundary_extract(z, 1, s, MaskSpec{});
    const auto bw = boundary_extract(w, 1, s, MaskSpec{});
    double mean = 0.0;
    for (double x : z) mean += x;
    mean /= z.size();
    double eb = 0.0, ez = 0.0, lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      eb += bz[i] * bz[i];
      ez += (z[i] - mean) * (z[i] - mean);
      lhs += bz[i] * w[i];
      rhs += z[i] * bw[i];
    }
    EXPECT_LE(eb, ez);
    EXPECT_NEAR(lhs, rhs, 1e-9 * std::max(1.0, std::abs(lhs)));
  }
}

// ---------------------------------------------------------------- pairs

TEST(Pairs, TopologyAndOrthogonalConstruction) {
  const Shape3 s{2, 2, 2};
  std::vector<double> zs(s.voxels(), 0.0), zt(s.voxels(), 0.0);
  zs[0] = 1.0;
  zs[3] = 2.0;
  zt[5] = 1.5;
  const auto sets = build_pair_sets(tensor(1, s, zs, Network::kStudent, Variant::kSource),
                                    tensor(1, s, zt, Network::kStudent, Variant::kTarget),
                                    tensor(1, s, zs, Network::kTeacher, Variant::kSource),
                                    tensor(1, s, zt, Network::kTeacher, Variant::kTarget),
                                    MaskSpec{});
  for (const PairSet* p : {&sets.volume, &sets.boundary}) {
    EXPECT_EQ(p->num_positive(), 2u);
    EXPECT_EQ(p->num_negative(), 4u);
    EXPECT_EQ(p->pool.size(), 4u);
  }
  for (auto [a, b] : sets.volume.positives)
    EXPECT_NEAR(cosine_similarity(sets.volume.pool[a], sets.volume.pool[b]), 1.0, 1e-15);
  for (auto [a, b] : sets.volume.negatives)
    EXPECT_EQ(cosine_similarity(sets.volume.pool[a], sets.volume.pool[b]), 0.0);
  EXPECT_EQ(sets.volume.positives, (std::vector<std::pair<int, int>>{{0, 2}, {1, 3}}));
  EXPECT_EQ(sets.boundary.pool[1], boundary_extract(zt, 1, s, MaskSpec{}));
}

TEST(Pairs, RejectsWrongTagsAndShapes) {
  const Shape3 s{2, 2, 2};
  const std::vector<double> z(8, 1.0);
  const auto ss = tensor(1, s, z, Network::kStudent, Variant::kSource);
  const auto st = tensor(1, s, z, Network::kStudent, Variant::kTarget);
  const auto ts = tensor(1, s, z, Network::kTeacher, Variant::kSource);
  const auto tt = tensor(1, s, z, Network::kTeacher, Variant::kTarget);
  const auto mislabeled = tensor(1, s, z, Network::kStudent, Variant::kSource);
  EXPECT_THROW(build_pair_sets(ss, st, mislabeled, tt, MaskSpec{}), ConfigError);
  const auto wrong = tensor(1, {2, 2, 4}, std::vector<double>(16, 1.0), Network::kTeacher,
                            Variant::kTarget);
  EXPECT_THROW(build_pair_sets(ss, st, ts, wrong, MaskSpec{}), ConfigError);
}

// ---------------------------------------------------------------- total

TEST(Total, WeightedSum) {
  EXPECT_DOUBLE_EQ(total_loss({1, 1, 1, 1}, 1, 1, LossWeights{}), 2.0);
  EXPECT_EQ(total_loss({0, 0, 0, 0}, 0, 0, LossWeights{}), 0.0);
  EXPECT_DOUBLE_EQ(total_loss({0.1, 0.2, 0.3, 0.4}, 5, 7, LossWeights{0.25, 0.0}), 0.25);
}
