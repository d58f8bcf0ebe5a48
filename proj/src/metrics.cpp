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

#include "dglab/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "dglab/error.hpp"

namespace dglab {

using detail::require;

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt) {
  require(pred.shape == gt.shape, "confusion: shape mismatch " +
                                      pred.shape.str() + " vs " + gt.shape.str());
  require(pred.data.size() == gt.data.size(), "confusion: size mismatch");
  require(pred.is_binary() && gt.is_binary(), "confusion: masks must be binary");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

namespace {

double ratio(double num, double den, bool both_empty) {
  if (den == 0.0) return both_empty ? 1.0 : 0.0;
  return num / den;
}

}  // namespace

MetricsEntry compute_metrics(const ConfusionCounts& c) {
  const double tp = static_cast<double>(c.tp);
  const double fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn);
  const bool both_empty = c.tp == 0 && c.fp == 0 && c.fn == 0;
  MetricsEntry m;
  m.dsc = ratio(2.0 * tp, 2.0 * tp + fp + fn, both_empty);
  m.sen = ratio(tp, tp + fn, both_empty);
  m.jac = ratio(tp, tp + fp + fn, both_empty);
  const double den = 2.0 * tp + fp + fn;
  m.vs = den == 0.0 ? (both_empty ? 1.0 : 0.0)
                    : 1.0 - std::abs(fp - fn) / den;
  return m;
}

double volume_similarity_sizes(std::uint64_t pred_size, std::uint64_t gt_size) {
  const double p = static_cast<double>(pred_size), g = static_cast<double>(gt_size);
  if (p + g == 0.0) return 1.0;
  return 1.0 - std::abs(p - g) / (p + g);
}

LabelMask binarize(const Prediction& p, double threshold) {
  LabelMask m(p.shape);
  for (std::size_t i = 0; i < p.probs.size(); ++i)
    m.data[i] = p.probs[i] >= threshold ? 1 : 0;
  return m;
}

void MetricsReport::add(std::string case_id, const ConfusionCounts& c) {
  cases.push_back({std::move(case_id), c, compute_metrics(c)});
}

void MetricsReport::finalize() {
  mean = MetricsEntry{};
  if (cases.empty()) return;
  for (const auto& c : cases) {
    mean.dsc += c.metrics.dsc;
    mean.sen += c.metrics.sen;
    mean.jac += c.metrics.jac;
    mean.vs += c.metrics.vs;
  }
  const double n = static_cast<double>(cases.size());
  mean.dsc /= n;
  mean.sen /= n;
  mean.jac /= n;
  mean.vs /= n;
}

nlohmann::json MetricsReport::to_json() const {
  auto entry = [](const MetricsEntry& m) {
    return nlohmann::json{{"dsc", m.dsc}, {"sen", m.sen}, {"jac", m.jac}, {"vs", m.vs}};
  };
  nlohmann::json j;
  j["cases"] = nlohmann::json::array();
  for (const auto& c : cases) {
    auto e = entry(c.metrics);
    e["case"] = c.case_id;
    e["tp"] = c.counts.tp;
    e["fp"] = c.counts.fp;
    e["fn"] = c.counts.fn;
    e["tn"] = c.counts.tn;
    j["cases"].push_back(e);
  }
  j["mean"] = entry(mean);
  return j;
}

std::string MetricsReport::to_table(const std::string& label) const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-24s %8s %8s %8s %8s\n", "", "DSC (%)",
                "Sen (%)", "Jac (%)", "VS (%)");
  os << line;
  auto row = [&](const std::string& name, const MetricsEntry& m) {
    std::snprintf(line, sizeof line, "%-24s %8.2f %8.2f %8.2f %8.2f\n",
                  name.c_str(), 100 * m.dsc, 100 * m.sen, 100 * m.jac, 100 * m.vs);
    os << line;
  };
  for (const auto& c : cases) row(c.case_id, c.metrics);
  row(label, mean);
  return os.str();
}

}  // namespace dglab
