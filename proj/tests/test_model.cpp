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
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "dglab/datagen.hpp"
#include "dglab/error.hpp"
#include "dglab/model.hpp"

namespace fs = std::filesystem;
using namespace dglab;

namespace {

BackboneConfig tiny() {
  BackboneConfig c;
  c.in_shape = {8, 8, 8};
  c.base_channels = 4;
  c.depth = 2;
  c.latent_channels = 3;
  c.channel_growth = 1;
  return c;
}

Volume random_volume(Shape3 s, std::uint64_t seed) {
  Volume v(s);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& x : v.data) x = u(rng);
  return v;
}

// Counted directly from the layer list: k^3 * cin * cout + cout per conv.
std::size_t expected_params(const BackboneConfig& c) {
  auto conv = [](std::size_t cin, std::size_t cout, std::size_t k) {
    return k * k * k * cin * cout + cout;
  };
  std::size_t n = 0;
  std::size_t prev = 1;
  std::vector<std::size_t> ch;
  for (int l = 0; l < c.depth; ++l) {
    std::size_t cl = c.base_channels;
    for (int i = 0; i < l; ++i) cl *= c.channel_growth;
    ch.push_back(cl);
    n += conv(prev, cl, 3);
    prev = cl;
  }
  n += conv(prev, c.latent_channels, 3);
  prev = c.latent_channels;
  for (int l = c.depth - 1; l >= 0; --l) {
    n += conv(prev, ch[l], 3);
    prev = ch[l];
  }
  n += conv(prev, 1, 1);
  return n;
}

}  // namespace

TEST(Backbone, ParameterCountMatchesLayerList) {
  BackboneConfig c;
  EXPECT_EQ(Backbone<float>(c).num_params(), expected_params(c));
  EXPECT_EQ(expected_params(c), 8793u);
  EXPECT_EQ(Backbone<float>(tiny()).num_params(), expected_params(tiny()));
}

TEST(Backbone, OutputShapes) {
  BackboneConfig c;
  Backbone<float> net(c);
  const auto p = net.init_params(1);
  const auto v = random_volume(c.in_shape, 2);
  const auto [pred, z] = forward(net, p, v, Network::kTeacher, Variant::kTarget);
  EXPECT_EQ(pred.shape, c.in_shape);
  EXPECT_EQ(pred.probs.size(), c.in_shape.voxels());
  EXPECT_EQ(z.channels, 16);
  EXPECT_EQ(z.shape, (Shape3{8, 8, 8}));
  EXPECT_EQ(z.data.size(), 16u * 8 * 8 * 8);
  EXPECT_EQ(z.source_network, Network::kTeacher);
  EXPECT_EQ(z.source_variant, Variant::kTarget);
  EXPECT_TRUE(z.all_finite());
  for (double q : pred.probs) {
    ASSERT_GE(q, 0.0);
    ASSERT_LE(q, 1.0);
  }
}

TEST(Backbone, ForwardIsPure) {
  Backbone<float> net(tiny());
  const auto p = net.init_params(3);
  const auto copy = p.values;
  const auto v = random_volume(tiny().in_shape, 4);
  const auto a = net.forward(p, v);
  const auto b = net.forward(p, v);
  EXPECT_EQ(a.probs, b.probs);
  EXPECT_EQ(a.latent, b.latent);
  EXPECT_EQ(p.values, copy);
}

TEST(Backbone, ZeroParamsGiveHalf) {
  Backbone<float> net(tiny());
  const auto out = net.forward(net.zero_params(), random_volume(tiny().in_shape, 5));
  for (float q : out.probs) ASSERT_EQ(q, 0.5f);
  for (float z : out.latent) ASSERT_EQ(z, 0.0f);
}

TEST(Backbone, InitIsSeeded) {
  Backbone<float> net(tiny());
  EXPECT_EQ(net.init_params(7).values, net.init_params(7).values);
  EXPECT_NE(net.init_params(7).values, net.init_params(8).values);
  const auto p = net.init_params(7);
  for (float b : p.slice("enc0.bias")) EXPECT_EQ(b, 0.0f);
  EXPECT_NEAR(1.0 / (1.0 + std::exp(-p.slice("head.bias")[0])), kHeadPrior, 1e-6);
}

TEST(Backbone, RejectsBadConfigAndShape) {
  BackboneConfig c = tiny();
  c.in_shape = {10, 8, 8};
  EXPECT_THROW(Backbone<float>{c}, ConfigError);
  c = tiny();
  c.base_channels = 2;
  EXPECT_THROW(Backbone<float>{c}, ConfigError);
  Backbone<float> net(tiny());
  EXPECT_THROW(net.forward(net.zero_params(), Volume({16, 16, 16})), ConfigError);
}

TEST(Backbone, GradientMatchesCentralDifferences) {
  // Scalar objective J = sum(a * logits) + sum(b * latent) with random a, b.
  Backbone<double> net(tiny());
  auto p = net.init_params(11);
  const auto v = random_volume(tiny().in_shape, 12);
  const std::vector<double> img(v.data.begin(), v.data.end());
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n(0.0, 1.0);
  const auto probe = net.forward(p, img);
  std::vector<double> a(probe.logits.size()), b(probe.latent.size());
  for (auto& x : a) x = n(rng);
  for (auto& x : b) x = n(rng);
  auto objective = [&](const ParamVector<double>& q) {
    const auto o = net.forward(q, img);
    double j = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) j += a[i] * o.logits[i];
    for (std::size_t i = 0; i < b.size(); ++i) j += b[i] * o.latent[i];
    return j;
  };

  Backbone<double>::Tape tape;
  net.forward(p, img, &tape);
  const auto g = flatten_gradient(*net.layout(), net.backward(p, tape, a, b));
  ASSERT_EQ(g.values.size(), p.size());

  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p.values[i];
    p.values[i] = keep + h;
    const double jp = objective(p);
    p.values[i] = keep - h;
    const double jm = objective(p);
    p.values[i] = keep;
    const double fd = (jp - jm) / (2 * h);
    const double rel = std::abs(fd - g.values[i]) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, rel);
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Backbone, EmptyUpstreamGradientsAreZero) {
  Backbone<double> net(tiny());
  const auto p = net.init_params(1);
  const auto v = random_volume(tiny().in_shape, 2);
  const std::vector<double> img(v.data.begin(), v.data.end());
  Backbone<double>::Tape tape;
  net.forward(p, img, &tape);
  const auto g = flatten_gradient(*net.layout(), net.backward(p, tape, {}, {}));
  for (double x : g.values) ASSERT_EQ(x, 0.0);
}

TEST(Backbone, FloatAgreesWithDouble) {
  Backbone<float> nf(tiny());
  Backbone<double> nd(tiny());
  const auto pf = nf.init_params(21);
  const auto pd = cast_params<double>(pf);
  const auto v = random_volume(tiny().in_shape, 22);
  const auto of = nf.forward(pf, v);
  const auto od = nd.forward(pd, v);
  for (std::size_t i = 0; i < of.probs.size(); ++i)
    ASSERT_NEAR(of.probs[i], od.probs[i], 1e-5);
}

TEST(Gradients, FlattenFollowsLayoutOrder) {
  Backbone<float> net(tiny());
  NamedGradients<float> named;
  for (const auto& e : net.layout()->entries())
    named[e.name] = std::vector<float>(e.size, static_cast<float>(e.offset));
  const auto g = flatten_gradient(*net.layout(), named, GradOrigin::kSrc);
  EXPECT_EQ(g.origin, GradOrigin::kSrc);
  for (const auto& e : net.layout()->entries())
    for (std::size_t i = 0; i < e.size; ++i)
      ASSERT_EQ(g.values[e.offset + i], static_cast<double>(e.offset));
  named.erase("head.bias");
  EXPECT_THROW(flatten_gradient(*net.layout(), named), InternalError);
  named["head.bias"] = {1.0f, 2.0f};
  EXPECT_THROW(flatten_gradient(*net.layout(), named), InternalError);
}

TEST(Layout, DigestTracksArchitecture) {
  const auto a = ParamLayout::for_config(tiny());
  const auto b = ParamLayout::for_config(tiny());
  EXPECT_EQ(a->digest(), b->digest());
  BackboneConfig c = tiny();
  c.latent_channels = 4;
  EXPECT_NE(ParamLayout::for_config(c)->digest(), a->digest());
  EXPECT_THROW(a->find("nope"), InternalError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const fs::path dir = fs::temp_directory_path() / "dglab_test_model_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Backbone<float> net(tiny());
  const auto p = net.init_params(5);
  save_checkpoint(dir / "m", p, tiny(), 17, {{"network", "teacher"}});
  const auto back = load_checkpoint(dir / "m");
  EXPECT_EQ(back.params.values, p.values);
  EXPECT_EQ(back.config, tiny());
  EXPECT_EQ(back.step, 17);
  EXPECT_EQ(back.sidecar.at("network"), "teacher");
  EXPECT_THROW(load_checkpoint(dir / "absent"), ConfigError);

  // A truncated parameter blob is rejected.
  fs::resize_file(dir / "m.params", fs::file_size(dir / "m.params") - 4);
  EXPECT_THROW(load_checkpoint(dir / "m"), ConfigError);
}
