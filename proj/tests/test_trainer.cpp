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
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "dglab/datagen.hpp"
#include "dglab/error.hpp"
#include "dglab/io.hpp"
#include "dglab/trainer.hpp"

namespace fs = std::filesystem;
using namespace dglab;

namespace {

const Shape3 k16{16, 16, 16};

TrainConfig small_config() {
  TrainConfig c;
  c.backbone.in_shape = k16;
  c.backbone.base_channels = 4;
  c.backbone.latent_channels = 8;
  c.epochs = 2;
  c.batch_size = 2;
  c.seed = 3;
  c.optimizer = OptimizerKind::kAdam;
  c.base_lr = 0.003;
  c.ema.alpha = 0.9;
  return c;
}

std::vector<DomainSample> phantoms(int n, std::uint64_t seed0, int domain = 0) {
  std::vector<DomainSample> v;
  for (int i = 0; i < n; ++i) {
    auto s = generate_phantom(seed0 + i, k16, {2.0, 3.0});
    s.domain_id = domain;
    v.push_back(std::move(s));
  }
  return v;
}

bool bit_equal(const ParamVector<float>& a, const ParamVector<float>& b) {
  return a.values.size() == b.values.size() &&
         std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dglab_test_trainer_" + name);
  fs::remove_all(p);
  return p;
}

const Dataset& tiny_dataset() {
  static const Dataset ds = [] {
    DatasetOptions o;
    o.num_domains = 3;
    o.samples_per_domain = 2;
    o.master_seed = 5;
    o.shape = k16;
    o.aneurysm_radius_range = {2.0, 3.0};
    return build_dataset(scratch("dataset"), o);
  }();
  return ds;
}

}  // namespace

TEST(Schedule, StepDecayEveryTenEpochs) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(c.lr_for_epoch(0), 0.001);
  EXPECT_DOUBLE_EQ(c.lr_for_epoch(9), 0.001);
  EXPECT_NEAR(c.lr_for_epoch(10), 1e-4, 1e-18);
  EXPECT_NEAR(c.lr_for_epoch(25), 1e-5, 1e-18);
  EXPECT_NEAR(c.lr_for_epoch(30), 1e-6, 1e-18);
}

TEST(Arms, ParseAndPrint) {
  EXPECT_EQ(AblationArm::parse("GS_EMA,BACL").str(), "GS_EMA,BACL");
  EXPECT_EQ(AblationArm::parse("NO_EMA,NONE").ema, EmaArm::kNoEma);
  EXPECT_EQ(AblationArm::parse("EMA,BACL_B").bacl, BaclArm::kBaclB);
  EXPECT_THROW(AblationArm::parse("GS_EMA"), ConfigError);
  EXPECT_THROW(AblationArm::parse("FOO,BACL"), ConfigError);
}

TEST(Config, RoundTripAndStrictness) {
  TrainConfig c = small_config();
  c.ablation_arm = AblationArm::parse("EMA,BACL_V");
  c.ema.gate_rule = GateRule::kPseudocode;
  const auto j = to_json(c);
  const TrainConfig back = train_config_from_json(j);
  EXPECT_EQ(to_json(back), j);

  auto bad = j;
  bad["ema"]["alpah"] = 0.9;
  try {
    train_config_from_json(bad);
    FAIL() << "unknown field accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("ema.alpah"), std::string::npos) << e.what();
  }
  bad = j;
  bad["epochs"] = "ten";
  try {
    train_config_from_json(bad);
    FAIL() << "string epochs accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epochs"), std::string::npos) << e.what();
  }
  bad = j;
  bad["epochs"] = 2.5;
  EXPECT_THROW(train_config_from_json(bad), ConfigError);
  bad = j;
  bad["ema"]["alpha"] = 1.0;
  EXPECT_THROW(train_config_from_json(bad), ConfigError);
  // Partial configs keep defaults.
  const auto partial = train_config_from_json({{"epochs", 3}});
  EXPECT_EQ(partial.epochs, 3);
  EXPECT_DOUBLE_EQ(partial.ema.alpha, 0.9999);
}

TEST(RunRecords, JsonRoundTripAndRecompute) {
  RunRecord r;
  r.step = 4;
  r.epoch = 1;
  r.L_stu_src = 0.5;
  r.L_stu_trg = 0.6;
  r.L_tea_src = 0.7;
  r.L_tea_trg = 0.8;
  r.L_c_z = 1.1;
  r.total = 0.0;
  r.gate = GateDecision{0.3, 0.1, true};
  r.lr = 0.01;
  const LossWeights w;
  r.total = recompute_total(r, w);
  EXPECT_NEAR(r.total, 0.25 * 2.6 + 0.5 * 1.1, 1e-15);
  const auto back = run_record_from_json(to_json(r));
  EXPECT_EQ(to_json(back), to_json(r));
  EXPECT_FALSE(to_json(r).contains("L_c_b"));
}

TEST(TrainStep, ForcedClosedGateLeavesTeacherBitIdentical) {
  const Trainer t(small_config());
  auto state = t.init_state();
  const auto batch = phantoms(2, 10);
  t.train_step(batch, state, true);  // make teacher and student differ
  const auto before = state.teacher;
  const auto rec = t.train_step(batch, state, false);
  ASSERT_TRUE(rec.gate.has_value());
  EXPECT_FALSE(rec.gate->updated);
  EXPECT_TRUE(bit_equal(before, state.teacher));
  EXPECT_FALSE(bit_equal(before, state.student));
}

TEST(TrainStep, ForcedOpenGateAveragesTowardsStudent) {
  const Trainer t(small_config());
  auto state = t.init_state();
  const auto batch = phantoms(2, 10);
  t.train_step(batch, state, false);
  const auto old_teacher = state.teacher;
  t.train_step(batch, state, true);
  // Teacher follows the student as it stands after the step.
  for (std::size_t i = 0; i < old_teacher.size(); ++i) {
    const double want = 0.9 * old_teacher.values[i] + 0.1 * state.student.values[i];
    ASSERT_NEAR(state.teacher.values[i], want, 1e-6 * std::max(1.0, std::abs(want))) << i;
  }
  EXPECT_EQ(state.teacher_updates, 1);
}

TEST(TrainStep, OverfitsSinglePhantom) {
  TrainConfig c = small_config();
  c.batch_size = 1;
  c.base_lr = 0.03;
  const Trainer t(c);
  auto state = t.init_state();
  const auto batch = phantoms(1, 77);
  double first = 0.0, last = 0.0;
  for (int k = 0; k < 50; ++k) {
    const auto rec = t.train_step(batch, state);
    if (k == 0) first = rec.L_stu_src;
    last = rec.L_stu_src;
  }
  // Threshold frozen from a calibration run on this seed.
  EXPECT_LE(last, 0.5 * first) << "first " << first << " last " << last;
}

TEST(TrainStep, NoEmaNoneArmSkipsGateAndContrast) {
  TrainConfig c = small_config();
  c.ablation_arm = AblationArm::parse("NO_EMA,NONE");
  const Trainer t(c);
  EXPECT_EQ(t.eval_network(), Network::kStudent);
  auto state = t.init_state();
  const auto initial = state.teacher;
  const auto batch = phantoms(2, 20);
  for (int k = 0; k < 3; ++k) {
    const auto rec = t.train_step(batch, state);
    EXPECT_FALSE(rec.gate.has_value());
    EXPECT_FALSE(rec.L_c_z.has_value());
    EXPECT_FALSE(rec.L_c_b.has_value());
    const auto j = to_json(rec);
    EXPECT_FALSE(j.contains("gate"));
    EXPECT_FALSE(j.contains("L_c_z"));
  }
  EXPECT_TRUE(bit_equal(initial, state.teacher));
  EXPECT_EQ(state.teacher_updates, 0);
}

TEST(TrainStep, ArmControlsContrastTerms) {
  const auto batch = phantoms(2, 20);
  for (const char* arm : {"GS_EMA,BACL_V", "GS_EMA,BACL_B", "GS_EMA,BACL"}) {
    TrainConfig c = small_config();
    c.ablation_arm = AblationArm::parse(arm);
    const Trainer t(c);
    auto state = t.init_state();
    const auto rec = t.train_step(batch, state);
    EXPECT_EQ(rec.L_c_z.has_value(), c.ablation_arm.volume_contrast()) << arm;
    EXPECT_EQ(rec.L_c_b.has_value(), c.ablation_arm.boundary_contrast()) << arm;
    EXPECT_NEAR(rec.total, recompute_total(rec, c.weights), 1e-9) << arm;
  }
}

TEST(TrainStep, ZeroLambda2MatchesNoContrastSupervisedLosses) {
  const auto batch = phantoms(2, 30);
  TrainConfig a = small_config();
  a.weights.lambda2 = 0.0;
  a.ablation_arm = AblationArm::parse("GS_EMA,BACL");
  TrainConfig b = small_config();
  b.ablation_arm = AblationArm::parse("GS_EMA,NONE");
  const Trainer ta(a), tb(b);
  auto sa = ta.init_state();
  auto sb = tb.init_state();
  const auto ra = ta.train_step(batch, sa);
  const auto rb = tb.train_step(batch, sb);
  EXPECT_EQ(ra.L_stu_src, rb.L_stu_src);
  EXPECT_EQ(ra.L_stu_trg, rb.L_stu_trg);
  EXPECT_EQ(ra.L_tea_src, rb.L_tea_src);
  EXPECT_EQ(ra.L_tea_trg, rb.L_tea_trg);
  EXPECT_TRUE(bit_equal(sa.student, sb.student));
}

TEST(TrainStep, EmaArmIgnoresGateRule) {
  const auto batch = phantoms(2, 40);
  TrainConfig a = small_config();
  a.ablation_arm = AblationArm::parse("EMA,BACL");
  TrainConfig b = a;
  b.ema.gate_rule = GateRule::kPseudocode;
  const Trainer ta(a), tb(b);
  auto sa = ta.init_state();
  auto sb = tb.init_state();
  for (int k = 0; k < 4; ++k) {
    EXPECT_TRUE(ta.train_step(batch, sa).gate->updated);
    tb.train_step(batch, sb);
    ASSERT_TRUE(bit_equal(sa.teacher, sb.teacher)) << k;
  }
  EXPECT_EQ(sa.teacher_updates, 4);
}

TEST(TrainStep, RejectsTargetsAndEmptyBatches) {
  const Trainer t(small_config());
  auto state = t.init_state();
  auto batch = phantoms(1, 1);
  batch[0].variant = Variant::kTarget;
  EXPECT_THROW(t.train_step(batch, state), ConfigError);
  EXPECT_THROW(t.train_step(std::span<const DomainSample>{}, state), ConfigError);
}

TEST(TrainStep, NonFiniteInputAborts) {
  const Trainer t(small_config());
  auto state = t.init_state();
  auto batch = phantoms(1, 1);
  batch[0].image.data[100] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(t.train_step(batch, state), TrainingAborted);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  BackboneConfig bc;
  bc.in_shape = k16;
  bc.base_channels = 4;
  bc.channel_growth = 1;
  bc.latent_channels = 2;
  Backbone<double> net(bc);
  ASSERT_LE(net.num_params(), 2000u);
  auto stu = net.init_params(1);
  auto tea = net.init_params(2);
  const auto src = phantoms(2, 50);
  std::vector<DomainSample> trg;
  for (std::size_t i = 0; i < src.size(); ++i)
    trg.push_back(apply_domain_shift(src[i], sample_domain_spec(ShiftRanges{}, 0, 90 + i)));
  ObjectiveOptions opt;
  opt.arm = AblationArm::parse("GS_EMA,BACL");
  const auto ev = evaluate_objective(net, stu, tea, src, trg, opt, true);
  ASSERT_TRUE(ev.lc_z && ev.lc_b);

  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> pick(0, stu.size() - 1);
  const double h = 1e-5;
  double worst = 0.0;
  for (int k = 0; k < 150; ++k) {
    const std::size_t i = pick(rng);
    const double keep = stu.values[i];
    stu.values[i] = keep + h;
    const double jp = evaluate_objective(net, stu, tea, src, trg, opt, false).total;
    stu.values[i] = keep - h;
    const double jm = evaluate_objective(net, stu, tea, src, trg, opt, false).total;
    stu.values[i] = keep;
    const double fd = (jp - jm) / (2 * h);
    const double g = ev.g_total.values[i];
    worst = std::max(worst, std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-6}));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Objective, TotalIsWeightedSumOfParts) {
  BackboneConfig bc;
  bc.in_shape = k16;
  Backbone<float> net(bc);
  const auto stu = net.init_params(1);
  const auto tea = net.init_params(2);
  const auto src = phantoms(2, 60);
  std::vector<DomainSample> trg;
  for (const auto& s : src) trg.push_back(apply_domain_shift(s, DomainSpec::identity()));
  ObjectiveOptions opt;
  opt.arm = AblationArm::parse("GS_EMA,BACL");
  const auto ev = evaluate_objective(net, stu, tea, src, trg, opt, false);
  EXPECT_NEAR(ev.total, total_loss(ev.supervised, *ev.lc_z, *ev.lc_b, opt.weights), 1e-12);
  EXPECT_TRUE(ev.g_total.values.empty());
}

TEST(Train, DeterministicRunsAgreeBitExactly) {
  TrainConfig c = small_config();
  c.max_steps = 10;
  c.epochs = 10;
  const auto a = train(c, tiny_dataset(), 2, scratch("det_a"));
  const auto b = train(c, tiny_dataset(), 2, scratch("det_b"));
  ASSERT_EQ(a.records.size(), 10u);
  ASSERT_EQ(b.records.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(to_json(a.records[i]), to_json(b.records[i]));
  EXPECT_TRUE(bit_equal(a.state.teacher, b.state.teacher));
}

TEST(Train, TeacherChangesOnlyOnOpenGates) {
  TrainConfig c = small_config();
  c.epochs = 3;
  std::int64_t changes = 0, opens = 0, grads_into_teacher = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const RunRecord& r, const TrainerState& before, const TrainerState& after) {
    const bool changed = !bit_equal(before.teacher, after.teacher);
    const bool open = r.gate && r.gate->updated;
    changes += changed;
    opens += open;
    if (changed && !open) ++grads_into_teacher;
  };
  const fs::path out = scratch("purity");
  const auto res = train(c, tiny_dataset(), 0, out, hooks);
  EXPECT_EQ(grads_into_teacher, 0);
  EXPECT_EQ(changes, opens);
  EXPECT_EQ(res.state.teacher_updates, opens);
  const auto log = read_run_log(out / "run_log.jsonl");
  ASSERT_EQ(log.size(), res.records.size());
  std::int64_t logged = 0;
  for (const auto& r : log) {
    logged += r.gate && r.gate->updated;
    EXPECT_NEAR(r.total, recompute_total(r, c.weights), 1e-9);
  }
  EXPECT_EQ(logged, opens);
}

TEST(Train, WritesArtifactsAndTrainsOnlySourceDomains) {
  TrainConfig c = small_config();
  c.epochs = 2;
  const fs::path out = scratch("artifacts");
  const auto res = train(c, tiny_dataset(), 1, out);
  // 2 train domains x 2 samples, batch 2, 2 epochs.
  EXPECT_EQ(res.records.size(), 4u);
  EXPECT_TRUE(fs::exists(out / "run_log.jsonl"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "epoch_000" / "teacher.params"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "epoch_001" / "student.json"));
  EXPECT_TRUE(fs::exists(out / "checkpoint" / "trainer_state.json"));
  const auto manifest = read_json(out / "manifest.json");
  EXPECT_EQ(manifest.at("held_out_domain"), 1);
  EXPECT_EQ(manifest.at("train_domains"), (nlohmann::json{0, 2}));
  EXPECT_EQ(manifest.at("dataset").at("digest"), tiny_dataset().content_digest());
  const auto st = read_json(out / "checkpoint" / "trainer_state.json");
  EXPECT_EQ(st.at("step"), 4);
  EXPECT_EQ(st.at("eval_network"), "TEACHER");
  EXPECT_TRUE(st.contains("rng_state"));
  for (const auto& r : res.records) EXPECT_DOUBLE_EQ(r.lr, c.base_lr);
}

TEST(Train, ConfigurationErrors) {
  TrainConfig c = small_config();
  EXPECT_THROW(train(c, tiny_dataset(), 7, scratch("bad_domain")), ConfigError);
  c.backbone.in_shape = {32, 32, 32};
  EXPECT_THROW(train(c, tiny_dataset(), 0, scratch("bad_shape")), ConfigError);
}
