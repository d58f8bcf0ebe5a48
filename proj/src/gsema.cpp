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

#include "dglab/gsema.hpp"

#include <algorithm>
#include <cmath>

#include "dglab/error.hpp"

namespace dglab {

using detail::ensure;
using detail::require;

const char* to_string(GateRule r) {
  return r == GateRule::kProse ? "PROSE" : "PSEUDOCODE";
}

GateRule gate_rule_from_string(const std::string& s) {
  if (s == "PROSE") return GateRule::kProse;
  if (s == "PSEUDOCODE") return GateRule::kPseudocode;
  throw ConfigError("gate_rule must be PROSE or PSEUDOCODE, got '" + s + "'");
}

void EMAConfig::validate() const {
  require(alpha > 0.0 && alpha < 1.0, "ema.alpha must lie in (0, 1)");
}

bool gate_opens(double inner_product, GateRule rule) {
  return rule == GateRule::kProse ? inner_product > 0.0 : inner_product <= 0.0;
}

GateDecision gate(const GradientVector& g_src, const GradientVector& g_trg,
                  const EMAConfig& cfg) {
  ensure(g_src.values.size() == g_trg.values.size(),
         "gate: gradient length mismatch");
  double dot = 0.0, ss = 0.0, tt = 0.0;
  for (std::size_t i = 0; i < g_src.values.size(); ++i) {
    const double a = g_src.values[i], b = g_trg.values[i];
    dot += a * b;
    ss += a * a;
    tt += b * b;
  }
  GateDecision d;
  d.inner_product = dot;
  d.cos_angle = (ss > 0.0 && tt > 0.0) ? dot / (std::sqrt(ss) * std::sqrt(tt)) : 0.0;
  d.updated = gate_opens(dot, cfg.gate_rule);
  return d;
}

template <class T>
ParamVector<T> ema_update(const ParamVector<T>& teacher,
                          const ParamVector<T>& student,
                          const GateDecision& decision, const EMAConfig& cfg) {
  ensure(teacher.values.size() == student.values.size() &&
             (teacher.layout == student.layout ||
              (teacher.layout && student.layout &&
               teacher.layout->digest() == student.layout->digest())),
         "ema_update: teacher and student layouts differ");
  if (!decision.updated) return teacher;
  const double a = cfg.alpha;
  ParamVector<T> out = teacher;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const double t = teacher.values[i], s = student.values[i];
    // Rounding may step a hair outside [min(t,s), max(t,s)]; clamp back.
    const double v = std::clamp(a * t + (1.0 - a) * s, std::min(t, s), std::max(t, s));
    out.values[i] = static_cast<T>(v);
  }
  return out;
}

template ParamVector<float> ema_update(const ParamVector<float>&,
                                       const ParamVector<float>&,
                                       const GateDecision&, const EMAConfig&);
template ParamVector<double> ema_update(const ParamVector<double>&,
                                        const ParamVector<double>&,
                                        const GateDecision&, const EMAConfig&);

}  // namespace dglab
