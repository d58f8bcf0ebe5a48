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

// SVG figures built from persisted logs and feature dumps only.

#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "dglab/experiment.hpp"
#include "dglab/trainer.hpp"

namespace dglab {

/// First two principal components of the rows (centred). Returns rows x 2.
std::vector<std::array<double, 2>> pca_2d(const FeatureDump& dump);

/// Scatter of the 2-D projection; colour = domain, marker = run.
void plot_embedding(const FeatureDump& dump, const std::filesystem::path& svg,
                    const std::string& title = "latent features (PCA)");

struct NamedLog {
  std::string name;
  std::vector<RunRecord> records;
};

/// Total and per-term losses against step.
void plot_loss_curves(const std::vector<NamedLog>& logs,
                      const std::filesystem::path& svg);

/// Running fraction of steps with an open gate (window of `window` steps).
void plot_gate_rate(const std::vector<NamedLog>& logs,
                    const std::filesystem::path& svg, int window = 20);

}  // namespace dglab
