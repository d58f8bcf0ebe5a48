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

// Teacher-student training loop.
//
// Each mini-batch: derive shifted targets, run student and teacher on source
// and target, assemble the weighted objective, extract the student's
// per-domain gradients g_src / g_trg, take one descent step on the student,
// then gate-and-EMA the teacher toward the updated student. The teacher never
// receives gradients; its supervised terms enter the objective's value only.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dglab/datagen.hpp"
#include "dglab/gsema.hpp"
#include "dglab/losses.hpp"
#include "dglab/model.hpp"

namespace dglab {

enum class EmaArm { kNoEma, kEma, kGsEma };
enum class BaclArm { kNone, kBaclV, kBaclB, kBacl };

const char* to_string(EmaArm a);
const char* to_string(BaclArm a);

struct AblationArm {
  EmaArm ema = EmaArm::kGsEma;
  BaclArm bacl = BaclArm::kBacl;

  [[nodiscard]] bool volume_contrast() const {
    return bacl == BaclArm::kBaclV || bacl == BaclArm::kBacl;
  }
  [[nodiscard]] bool boundary_contrast() const {
    return bacl == BaclArm::kBaclB || bacl == BaclArm::kBacl;
  }
  [[nodiscard]] std::string str() const;  // "GS_EMA,BACL"
  static AblationArm parse(const std::string& s);

  friend bool operator==(const AblationArm&, const AblationArm&) = default;
};

enum class OptimizerKind { kSgd, kAdam };
enum class BatchMixing { kSingleDomain, kMixed };

struct TrainConfig {
  int epochs = 100;
  double base_lr = 0.001;
  double lr_decay = 0.1;
  int lr_decay_every = 10;
  int batch_size = 2;
  EMAConfig ema;
  LossWeights weights;
  std::uint64_t seed = 0;
  AblationArm ablation_arm;

  BackboneConfig backbone;
  MaskSpec boundary;
  double temperature = 1.0;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  BatchMixing batch_mixing = BatchMixing::kSingleDomain;
  ShiftRanges target_shift;
  std::int64_t max_steps = 0;  // 0 = no cap
  bool deterministic = true;

  void validate() const;
  [[nodiscard]] double lr_for_epoch(int epoch) const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Strict parse: unknown fields and wrong types raise ConfigError naming the
/// offending field path.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& p);

struct RunRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double L_stu_src = 0.0;
  double L_stu_trg = 0.0;
  double L_tea_src = 0.0;
  double L_tea_trg = 0.0;
  std::optional<double> L_c_z;
  std::optional<double> L_c_b;
  double total = 0.0;
  std::optional<GateDecision> gate;
  double lr = 0.0;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);
/// Total objective recomputed from a record's parts.
double recompute_total(const RunRecord& r, const LossWeights& w);

/// What the objective needs besides parameters and data.
struct ObjectiveOptions {
  LossWeights weights;
  AblationArm arm;
  MaskSpec boundary;
  double temperature = 1.0;
};

struct ObjectiveEval {
  std::array<double, 4> supervised{};  // stu_src, stu_trg, tea_src, tea_trg
  std::optional<double> lc_z;
  std::optional<double> lc_b;
  double total = 0.0;
  GradientVector g_src;    // d L_stu^src / d theta_stu
  GradientVector g_trg;    // d L_stu^trg / d theta_stu
  GradientVector g_total;  // d total / d theta_stu, teacher held constant
};

/// Evaluates the full objective on a batch of (source, target) pairs.
/// Gradients are filled only when `with_grad`.
template <class T>
ObjectiveEval evaluate_objective(const Backbone<T>& net,
                                 const ParamVector<T>& student,
                                 const ParamVector<T>& teacher,
                                 std::span<const DomainSample> sources,
                                 std::span<const DomainSample> targets,
                                 const ObjectiveOptions& opt, bool with_grad);

extern template ObjectiveEval evaluate_objective(
    const Backbone<float>&, const ParamVector<float>&, const ParamVector<float>&,
    std::span<const DomainSample>, std::span<const DomainSample>,
    const ObjectiveOptions&, bool);
extern template ObjectiveEval evaluate_objective(
    const Backbone<double>&, const ParamVector<double>&,
    const ParamVector<double>&, std::span<const DomainSample>,
    std::span<const DomainSample>, const ObjectiveOptions&, bool);

struct TrainerState {
  ParamVector<float> student;
  ParamVector<float> teacher;
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  std::mt19937_64 rng;
  std::int64_t teacher_updates = 0;
  // Adam moments (empty under SGD).
  std::vector<double> adam_m;
  std::vector<double> adam_v;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, RunRecord record)
      : std::runtime_error(what), record_(std::move(record)) {}
  [[nodiscard]] const RunRecord& record() const { return record_; }

 private:
  RunRecord record_;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  [[nodiscard]] const TrainConfig& config() const { return config_; }
  [[nodiscard]] const Backbone<float>& net() const { return net_; }

  /// Student from config.seed; teacher is an exact copy.
  [[nodiscard]] TrainerState init_state() const;

  /// Deterministic target shift for batch item `item` at `step`.
  [[nodiscard]] DomainSample make_target(const DomainSample& source,
                                         std::int64_t step, int item) const;

  /// One mini-batch. `force_gate` overrides the gate outcome (EMA arms only).
  RunRecord train_step(std::span<const DomainSample> batch, TrainerState& state,
                       std::optional<bool> force_gate = std::nullopt) const;

  /// Which network is deployed for evaluation: the teacher unless NO_EMA.
  [[nodiscard]] Network eval_network() const;

 private:
  void optimizer_step(TrainerState& state, const GradientVector& g) const;

  TrainConfig config_;
  Backbone<float> net_;
};

struct TrainHooks {
  /// Called after each step with the state before and after the step.
  std::function<void(const RunRecord&, const TrainerState& before,
                     const TrainerState& after)>
      on_step;
};

struct TrainResult {
  TrainerState state;
  std::vector<RunRecord> records;
};

/// Leave-one-domain-out training. Writes <out>/run_log.jsonl,
/// <out>/checkpoints/epoch_NNN/, <out>/checkpoint/ (final) and
/// <out>/manifest.json.
TrainResult train(const TrainConfig& config, const Dataset& dataset,
                  int held_out_domain, const std::filesystem::path& out_dir,
                  const TrainHooks& hooks = {});

/// Writes {student,teacher}.{params,json} and trainer_state.json into dir.
void save_trainer_checkpoint(const std::filesystem::path& dir,
                             const Trainer& trainer, const TrainerState& state,
                             int held_out_domain);

std::vector<RunRecord> read_run_log(const std::filesystem::path& p);

}  // namespace dglab
