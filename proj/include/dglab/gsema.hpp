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

// Gradient-gated EMA teacher update.
//
// The teacher follows the student by exponential moving average, but only on
// steps where the student's source-loss and target-loss gradients agree in
// direction. The gate looks at the sign of <g_src, g_trg> over the single,
// globally flattened gradient; it never modifies the gradients themselves.

#pragma once

#include <string>

#include "dglab/model.hpp"

namespace dglab {

enum class GateRule {
  kProse,      // update iff <g_src, g_trg> > 0   (acute angle; default)
  kPseudocode  // update iff <g_src, g_trg> <= 0
};

const char* to_string(GateRule r);
GateRule gate_rule_from_string(const std::string& s);

struct EMAConfig {
  double alpha = 0.9999;
  GateRule gate_rule = GateRule::kProse;

  void validate() const;
};

struct GateDecision {
  double inner_product = 0.0;
  double cos_angle = 0.0;
  bool updated = false;
};

/// Applies the rule to a precomputed inner product.
bool gate_opens(double inner_product, GateRule rule);

GateDecision gate(const GradientVector& g_src, const GradientVector& g_trg,
                  const EMAConfig& cfg);

/// decision.updated ? alpha * teacher + (1 - alpha) * student : teacher.
template <class T>
ParamVector<T> ema_update(const ParamVector<T>& teacher,
                          const ParamVector<T>& student,
                          const GateDecision& decision, const EMAConfig& cfg);

extern template ParamVector<float> ema_update(const ParamVector<float>&,
                                              const ParamVector<float>&,
                                              const GateDecision&,
                                              const EMAConfig&);
extern template ParamVector<double> ema_update(const ParamVector<double>&,
                                               const ParamVector<double>&,
                                               const GateDecision&,
                                               const EMAConfig&);

}  // namespace dglab
