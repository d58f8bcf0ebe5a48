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

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dglab/model.hpp"
#include "dglab/volume.hpp"

namespace dglab {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  [[nodiscard]] std::uint64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt);

struct MetricsEntry {
  double dsc = 0.0;
  double sen = 0.0;
  double jac = 0.0;
  double vs = 0.0;
};

/// DSC = 2TP/(2TP+FP+FN), Sen = TP/(TP+FN), Jac = TP/(TP+FP+FN),
/// VS = 1 - |FP-FN|/(2TP+FP+FN). A 0/0 ratio is 1 when both masks are empty
/// and 0 otherwise.
MetricsEntry compute_metrics(const ConfusionCounts& c);

/// 1 - ||P|-|G|| / (|P|+|G|); equal to vs for binary masks.
double volume_similarity_sizes(std::uint64_t pred_size, std::uint64_t gt_size);

LabelMask binarize(const Prediction& p, double threshold = 0.5);

struct CaseMetrics {
  std::string case_id;
  ConfusionCounts counts;
  MetricsEntry metrics;
};

struct MetricsReport {
  std::vector<CaseMetrics> cases;
  MetricsEntry mean;

  void add(std::string case_id, const ConfusionCounts& c);
  void finalize();
  [[nodiscard]] nlohmann::json to_json() const;
  /// Aligned columns with percentages to two decimals.
  [[nodiscard]] std::string to_table(const std::string& label = "mean") const;
};

}  // namespace dglab
