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

// Experiment layer: checkpoint evaluation, feature dumps, the ablation grid
// and run manifests. Everything here reads and writes files so that the
// summary and plotting steps can run after the fact.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dglab/datagen.hpp"
#include "dglab/metrics.hpp"
#include "dglab/model.hpp"
#include "dglab/trainer.hpp"

namespace dglab {

inline constexpr const char* kVersion = "0.1.0";

/// Writes <dir>/manifest.json with the command, its arguments and, when a
/// dataset is given, its path and content digest.
void write_manifest(const std::filesystem::path& dir, const std::string& command,
                    const nlohmann::json& args, const Dataset* dataset = nullptr);

// ---------------------------------------------------------------------------
// Predictors

using Predictor = std::function<Prediction(const DomainSample&)>;

/// Resolves a checkpoint reference to a parameter stem. Accepts a run
/// directory (uses <run>/checkpoint), a checkpoint directory (picks the
/// student or teacher file, by default the one recorded as eval_network), or
/// a stem with or without the .json / .params suffix.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& ref,
                                         std::optional<Network> network = std::nullopt);

/// Loads a predictor from a resolved stem. A sidecar whose "model" is
/// "ground_truth_oracle" yields a predictor that returns the sample's mask.
Predictor load_predictor(const std::filesystem::path& stem);

/// Writes the oracle sidecar used for evaluation self-tests.
void write_oracle_checkpoint(const std::filesystem::path& stem);

/// Metrics over every sample of one domain.
MetricsReport evaluate_domain(const Predictor& predict, const Dataset& dataset,
                              int domain);

// ---------------------------------------------------------------------------
// Feature dumps

struct FeatureLabel {
  int domain_id = 0;
  Variant variant = Variant::kSource;
  Network network = Network::kTeacher;
  int sample_index = 0;
  std::string run;
};

/// Row-major (rows x dim) float32 matrix plus one label per row.
struct FeatureDump {
  std::size_t dim = 0;
  std::vector<float> matrix;
  std::vector<FeatureLabel> labels;

  [[nodiscard]] std::size_t rows() const { return labels.size(); }
  [[nodiscard]] std::span<const float> row(std::size_t r) const {
    return {matrix.data() + r * dim, dim};
  }
  void append(std::span<const double> features, FeatureLabel label);
  [[nodiscard]] FeatureDump filter(const std::function<bool(const FeatureLabel&)>& keep) const;

  /// <stem>.f32 (little-endian) and <stem>.json.
  void save(const std::filesystem::path& stem) const;
  static FeatureDump load(const std::filesystem::path& stem);
};

/// Bottleneck features of the chosen networks for `samples_per_domain`
/// samples (all when <= 0) of each listed domain.
FeatureDump export_features(const std::filesystem::path& checkpoint_dir,
                            const Dataset& dataset, const std::vector<int>& domains,
                            const std::vector<Network>& networks,
                            int samples_per_domain = 0, const std::string& run = "");

/// 1 - chance-normalised balanced accuracy of a leave-one-out nearest-centroid
/// domain classifier on the raw features. 1 means the domains are
/// indistinguishable, 0 means perfectly separable. Ties go to the lowest
/// domain id.
double domain_overlap_score(const FeatureDump& dump);

// ---------------------------------------------------------------------------
// Ablation

struct AblationOptions {
  TrainConfig base;
  std::vector<AblationArm> arms;
  std::vector<std::uint64_t> seeds;
  std::vector<int> held_out;  // empty = every domain in turn
  bool skip_existing = true;  // reuse completed cells
  std::function<void(const std::string&)> progress;
};

struct AblationCell {
  AblationArm arm;
  std::uint64_t seed = 0;
  int held_out = 0;
  MetricsEntry mean;
  double overlap = 0.0;
  std::filesystem::path dir;
};

struct AblationRow {
  AblationArm arm;
  std::size_t runs = 0;
  MetricsEntry mean;
  double overlap = 0.0;
  std::map<std::uint64_t, double> dsc_by_seed;  // mean over held-out folds
  std::map<std::uint64_t, double> overlap_by_seed;
};

struct AblationSummary {
  std::vector<AblationCell> cells;
  std::vector<AblationRow> rows;  // sorted by (EMA arm, BACL arm)

  [[nodiscard]] const AblationRow* find(const AblationArm& arm) const;
  /// Tab-separated, metrics x100 with two decimals.
  [[nodiscard]] std::string to_tsv() const;
  [[nodiscard]] std::string cells_tsv() const;
};

/// Directory of one grid cell under `out`.
std::filesystem::path ablation_cell_dir(const std::filesystem::path& out,
                                        const AblationArm& arm, std::uint64_t seed,
                                        int held_out);

/// Trains and evaluates one cell; writes <cell>/result.json.
AblationCell run_ablation_cell(const TrainConfig& config, const Dataset& dataset,
                               int held_out, const std::filesystem::path& dir);

/// Runs every (arm, seed, fold) cell, then reduces the results.
AblationSummary run_ablation(const AblationOptions& opt, const Dataset& dataset,
                             const std::filesystem::path& out);

/// Pure reduce over the result.json files found under `out`.
AblationSummary summarize_ablation(const std::filesystem::path& out);

}  // namespace dglab
