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

#include "dglab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dglab/error.hpp"
#include "dglab/io.hpp"

namespace dglab {

namespace fs = std::filesystem;
using detail::ensure;
using detail::require;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Arms

const char* to_string(EmaArm a) {
  switch (a) {
    case EmaArm::kNoEma: return "NO_EMA";
    case EmaArm::kEma: return "EMA";
    case EmaArm::kGsEma: return "GS_EMA";
  }
  return "?";
}

const char* to_string(BaclArm a) {
  switch (a) {
    case BaclArm::kNone: return "NONE";
    case BaclArm::kBaclV: return "BACL_V";
    case BaclArm::kBaclB: return "BACL_B";
    case BaclArm::kBacl: return "BACL";
  }
  return "?";
}

std::string AblationArm::str() const {
  return std::string(to_string(ema)) + "," + to_string(bacl);
}

AblationArm AblationArm::parse(const std::string& s) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) {
    throw ConfigError("arm must look like EMA_ARM,BACL_ARM (e.g. GS_EMA,BACL), got '" +
                      s + "'");
  }
  const std::string e = s.substr(0, comma), b = s.substr(comma + 1);
  AblationArm arm;
  if (e == "NO_EMA") arm.ema = EmaArm::kNoEma;
  else if (e == "EMA") arm.ema = EmaArm::kEma;
  else if (e == "GS_EMA") arm.ema = EmaArm::kGsEma;
  else throw ConfigError("unknown EMA arm '" + e + "' (NO_EMA, EMA, GS_EMA)");
  if (b == "NONE") arm.bacl = BaclArm::kNone;
  else if (b == "BACL_V") arm.bacl = BaclArm::kBaclV;
  else if (b == "BACL_B") arm.bacl = BaclArm::kBaclB;
  else if (b == "BACL") arm.bacl = BaclArm::kBacl;
  else throw ConfigError("unknown BACL arm '" + b + "' (NONE, BACL_V, BACL_B, BACL)");
  return arm;
}

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  require(epochs >= 1, "epochs must be >= 1");
  require(base_lr > 0.0, "base_lr must be positive");
  require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must lie in (0, 1]");
  require(lr_decay_every >= 1, "lr_decay_every must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(temperature > 0.0, "temperature must be positive");
  require(max_steps >= 0, "max_steps must be >= 0");
  ema.validate();
  boundary.validate();
  backbone.validate();
}

double TrainConfig::lr_for_epoch(int epoch) const {
  return base_lr * std::pow(lr_decay, epoch / lr_decay_every);
}

json to_json(const TrainConfig& c) {
  json ts;
  to_json(ts, c.target_shift);
  return json{
      {"epochs", c.epochs},
      {"base_lr", c.base_lr},
      {"lr_decay", c.lr_decay},
      {"lr_decay_every", c.lr_decay_every},
      {"batch_size", c.batch_size},
      {"ema", {{"alpha", c.ema.alpha}, {"gate_rule", to_string(c.ema.gate_rule)}}},
      {"weights", {{"lambda1", c.weights.lambda1}, {"lambda2", c.weights.lambda2}}},
      {"seed", c.seed},
      {"ablation_arm", c.ablation_arm.str()},
      {"backbone", c.backbone},
      {"boundary", {{"cutoff_fraction", c.boundary.cutoff_fraction}}},
      {"temperature", c.temperature},
      {"optimizer", c.optimizer == OptimizerKind::kSgd ? "sgd" : "adam"},
      {"batch_mixing",
       c.batch_mixing == BatchMixing::kSingleDomain ? "single_domain" : "mixed"},
      {"target_shift", ts},
      {"max_steps", c.max_steps},
      {"deterministic", c.deterministic},
  };
}

namespace {

// Reads fields of one JSON object with type checks and unknown-key detection.
class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
      throw ConfigError("config field '" + (path_.empty() ? "<root>" : path_) +
                        "': expected object, got " + j_.type_name());
    }
  }

  std::string where(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  const json* take(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  [[noreturn]] void type_error(const std::string& key, const char* expected,
                               const json& v) const {
    throw ConfigError("config field '" + where(key) + "': expected " + expected +
                      ", got " + v.type_name());
  }

  void integer(const std::string& key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) type_error(key, "integer", *v);
      out = v->get<int>();
    }
  }
  void integer64(const std::string& key, std::int64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) type_error(key, "integer", *v);
      out = v->get<std::int64_t>();
    }
  }
  void unsigned64(const std::string& key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned() &&
          !(v->is_number_integer() && v->get<std::int64_t>() >= 0)) {
        type_error(key, "nonnegative integer", *v);
      }
      out = v->get<std::uint64_t>();
    }
  }
  void number(const std::string& key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) type_error(key, "number", *v);
      out = v->get<double>();
    }
  }
  void boolean(const std::string& key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) type_error(key, "boolean", *v);
      out = v->get<bool>();
    }
  }
  void string(const std::string& key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) type_error(key, "string", *v);
      out = v->get<std::string>();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError("config field '" + where(it.key()) + "': unknown field");
      }
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
void with_field_context(const std::string& field, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind("config field", 0) == 0) throw;
    throw ConfigError("config field '" + field + "': " + msg);
  }
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  FieldReader r(j, "");
  r.integer("epochs", c.epochs);
  r.number("base_lr", c.base_lr);
  r.number("lr_decay", c.lr_decay);
  r.integer("lr_decay_every", c.lr_decay_every);
  r.integer("batch_size", c.batch_size);
  if (const json* e = r.take("ema")) {
    FieldReader er(*e, "ema");
    er.number("alpha", c.ema.alpha);
    std::string rule = to_string(c.ema.gate_rule);
    er.string("gate_rule", rule);
    with_field_context("ema.gate_rule", [&] { c.ema.gate_rule = gate_rule_from_string(rule); });
    er.finish();
  }
  if (const json* w = r.take("weights")) {
    FieldReader wr(*w, "weights");
    wr.number("lambda1", c.weights.lambda1);
    wr.number("lambda2", c.weights.lambda2);
    wr.finish();
  }
  r.unsigned64("seed", c.seed);
  std::string arm = c.ablation_arm.str();
  r.string("ablation_arm", arm);
  with_field_context("ablation_arm", [&] { c.ablation_arm = AblationArm::parse(arm); });
  if (const json* b = r.take("backbone")) {
    FieldReader br(*b, "backbone");
    if (const json* s = br.take("in_shape")) {
      if (!s->is_array() || s->size() != 3 ||
          !std::all_of(s->begin(), s->end(), [](const json& x) { return x.is_number_integer(); })) {
        throw ConfigError("config field 'backbone.in_shape': expected [D, H, W] integers");
      }
      c.backbone.in_shape = {(*s)[0].get<int>(), (*s)[1].get<int>(), (*s)[2].get<int>()};
    }
    br.integer("base_channels", c.backbone.base_channels);
    br.integer("depth", c.backbone.depth);
    br.integer("latent_channels", c.backbone.latent_channels);
    br.integer("channel_growth", c.backbone.channel_growth);
    br.finish();
  }
  if (const json* b = r.take("boundary")) {
    FieldReader br(*b, "boundary");
    br.number("cutoff_fraction", c.boundary.cutoff_fraction);
    br.finish();
  }
  r.number("temperature", c.temperature);
  std::string opt = c.optimizer == OptimizerKind::kSgd ? "sgd" : "adam";
  r.string("optimizer", opt);
  if (opt == "sgd") c.optimizer = OptimizerKind::kSgd;
  else if (opt == "adam") c.optimizer = OptimizerKind::kAdam;
  else throw ConfigError("config field 'optimizer': expected \"sgd\" or \"adam\", got \"" + opt + "\"");
  std::string mix = c.batch_mixing == BatchMixing::kSingleDomain ? "single_domain" : "mixed";
  r.string("batch_mixing", mix);
  if (mix == "single_domain") c.batch_mixing = BatchMixing::kSingleDomain;
  else if (mix == "mixed") c.batch_mixing = BatchMixing::kMixed;
  else throw ConfigError("config field 'batch_mixing': expected \"single_domain\" or \"mixed\"");
  if (const json* t = r.take("target_shift")) {
    static const std::set<std::string> known{
        "gain", "offset", "noise_sigma", "smoothing_sigma", "histogram_shift",
        "bias_amplitude", "resolution_scale", "geometric", "max_rotation_deg",
        "scale_min", "scale_max"};
    if (!t->is_object()) throw ConfigError("config field 'target_shift': expected object");
    for (auto it = t->begin(); it != t->end(); ++it) {
      if (!known.count(it.key())) {
        throw ConfigError("config field 'target_shift." + it.key() + "': unknown field");
      }
    }
    with_field_context("target_shift", [&] {
      try {
        c.target_shift = t->get<ShiftRanges>();
      } catch (const json::exception& e) {
        throw ConfigError(e.what());
      }
    });
  }
  r.integer64("max_steps", c.max_steps);
  r.boolean("deterministic", c.deterministic);
  r.finish();
  c.validate();
  return c;
}

TrainConfig load_train_config(const fs::path& p) {
  return train_config_from_json(read_json(p));
}

// ---------------------------------------------------------------------------
// RunRecord

json to_json(const RunRecord& r) {
  json j{{"step", r.step},           {"epoch", r.epoch},
         {"L_stu_src", r.L_stu_src}, {"L_stu_trg", r.L_stu_trg},
         {"L_tea_src", r.L_tea_src}, {"L_tea_trg", r.L_tea_trg}};
  if (r.L_c_z) j["L_c_z"] = *r.L_c_z;
  if (r.L_c_b) j["L_c_b"] = *r.L_c_b;
  j["total"] = r.total;
  if (r.gate) {
    j["gate"] = {{"inner_product", r.gate->inner_product},
                 {"cos_angle", r.gate->cos_angle},
                 {"updated", r.gate->updated}};
  }
  j["lr"] = r.lr;
  return j;
}

RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.step = j.at("step").get<std::int64_t>();
  r.epoch = j.at("epoch").get<int>();
  r.L_stu_src = j.at("L_stu_src").get<double>();
  r.L_stu_trg = j.at("L_stu_trg").get<double>();
  r.L_tea_src = j.at("L_tea_src").get<double>();
  r.L_tea_trg = j.at("L_tea_trg").get<double>();
  if (j.contains("L_c_z")) r.L_c_z = j.at("L_c_z").get<double>();
  if (j.contains("L_c_b")) r.L_c_b = j.at("L_c_b").get<double>();
  r.total = j.at("total").get<double>();
  if (j.contains("gate") && !j.at("gate").is_null()) {
    const auto& g = j.at("gate");
    r.gate = GateDecision{g.at("inner_product").get<double>(),
                          g.at("cos_angle").get<double>(),
                          g.at("updated").get<bool>()};
  }
  r.lr = j.at("lr").get<double>();
  return r;
}

double recompute_total(const RunRecord& r, const LossWeights& w) {
  return total_loss({r.L_stu_src, r.L_stu_trg, r.L_tea_src, r.L_tea_trg},
                    r.L_c_z.value_or(0.0), r.L_c_b.value_or(0.0), w);
}

std::vector<RunRecord> read_run_log(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open run log " + p.string());
  std::vector<RunRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    if (j.value("aborted", false)) continue;
    out.push_back(run_record_from_json(j));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Objective

template <class T>
ObjectiveEval evaluate_objective(const Backbone<T>& net,
                                 const ParamVector<T>& student,
                                 const ParamVector<T>& teacher,
                                 std::span<const DomainSample> sources,
                                 std::span<const DomainSample> targets,
                                 const ObjectiveOptions& opt, bool with_grad) {
  require(!sources.empty() && sources.size() == targets.size(),
          "objective needs a nonempty batch with one target per source");
  const std::size_t B = sources.size();
  const double inv_b = 1.0 / static_cast<double>(B);
  const bool use_v = opt.arm.volume_contrast();
  const bool use_b = opt.arm.boundary_contrast();
  const auto& cfg = net.config();

  struct Item {
    typename Backbone<T>::Tape tape_s, tape_t;
    std::vector<double> p_s, p_t, grad_s, grad_t;
  };
  std::vector<Item> items(B);
  PairSet vol, bnd;
  ObjectiveEval ev;

  auto feature = [&](const std::vector<T>& latent, Network n, Variant v) {
    FeatureTensor z;
    z.channels = cfg.latent_channels;
    z.shape = cfg.latent_shape();
    z.data.assign(latent.begin(), latent.end());
    z.source_network = n;
    z.source_variant = v;
    return z;
  };

  for (std::size_t i = 0; i < B; ++i) {
    Item& it = items[i];
    const auto out_s = net.forward(student, sources[i].image, &it.tape_s);
    const auto out_t = net.forward(student, targets[i].image, &it.tape_t);
    const auto tea_s = net.forward(teacher, sources[i].image);
    const auto tea_t = net.forward(teacher, targets[i].image);

    it.p_s.assign(out_s.probs.begin(), out_s.probs.end());
    it.p_t.assign(out_t.probs.begin(), out_t.probs.end());
    it.grad_s.resize(it.p_s.size());
    it.grad_t.resize(it.p_t.size());
    ev.supervised[0] += inv_b * dce_loss_grad(it.p_s, sources[i].mask, it.grad_s);
    ev.supervised[1] += inv_b * dce_loss_grad(it.p_t, targets[i].mask, it.grad_t);
    const std::vector<double> q_s(tea_s.probs.begin(), tea_s.probs.end());
    const std::vector<double> q_t(tea_t.probs.begin(), tea_t.probs.end());
    ev.supervised[2] += inv_b * dce_terms(q_s, sources[i].mask).value();
    ev.supervised[3] += inv_b * dce_terms(q_t, targets[i].mask).value();

    if (use_v || use_b) {
      auto sets = build_pair_sets(feature(out_s.latent, Network::kStudent, Variant::kSource),
                                  feature(out_t.latent, Network::kStudent, Variant::kTarget),
                                  feature(tea_s.latent, Network::kTeacher, Variant::kSource),
                                  feature(tea_t.latent, Network::kTeacher, Variant::kTarget),
                                  opt.boundary);
      if (use_v) vol.append(sets.volume);
      if (use_b) bnd.append(sets.boundary);
    }
  }

  ContrastiveGrad cz, cb;
  if (use_v) {
    cz = contrastive_loss_grad(vol, opt.temperature);
    ev.lc_z = cz.loss;
  }
  if (use_b) {
    cb = contrastive_loss_grad(bnd, opt.temperature);
    ev.lc_b = cb.loss;
  }
  ev.total = total_loss(ev.supervised, ev.lc_z.value_or(0.0), ev.lc_b.value_or(0.0),
                        opt.weights);
  if (!with_grad) return ev;

  const auto& layout = *net.layout();
  const std::size_t n = layout.total();
  ev.g_src = {std::vector<double>(n, 0.0), GradOrigin::kSrc};
  ev.g_trg = {std::vector<double>(n, 0.0), GradOrigin::kTrg};
  std::vector<double> g_con(n, 0.0);
  auto accumulate = [&](std::vector<double>& acc, const NamedGradients<T>& g) {
    const auto flat = flatten_gradient(layout, g);
    for (std::size_t k = 0; k < n; ++k) acc[k] += flat.values[k];
  };
  auto logit_grad = [&](const std::vector<double>& p, const std::vector<double>& gp) {
    std::vector<T> out(p.size());
    for (std::size_t k = 0; k < p.size(); ++k)
      out[k] = static_cast<T>(inv_b * gp[k] * p[k] * (1.0 - p[k]));
    return out;
  };
  const bool contrast = (use_v || use_b) && opt.weights.lambda2 != 0.0;
  const std::size_t latent_size =
      static_cast<std::size_t>(cfg.latent_channels) * cfg.latent_shape().voxels();

  for (std::size_t i = 0; i < B; ++i) {
    const Item& it = items[i];
    accumulate(ev.g_src.values,
               net.backward(student, it.tape_s, logit_grad(it.p_s, it.grad_s), {}));
    accumulate(ev.g_trg.values,
               net.backward(student, it.tape_t, logit_grad(it.p_t, it.grad_t), {}));
    if (!contrast) continue;
    // Pool slots 4i and 4i+1 hold the student's source and target features.
    for (std::size_t slot = 0; slot < 2; ++slot) {
      std::vector<double> gz(latent_size, 0.0);
      const std::size_t idx = 4 * i + slot;
      if (use_v) {
        for (std::size_t k = 0; k < latent_size; ++k) gz[k] += cz.grad[idx][k];
      }
      if (use_b) {
        const auto back = boundary_extract(cb.grad[idx], cfg.latent_channels,
                                           cfg.latent_shape(), opt.boundary);
        for (std::size_t k = 0; k < latent_size; ++k) gz[k] += back[k];
      }
      const std::vector<T> gzt(gz.begin(), gz.end());
      accumulate(g_con, net.backward(student, slot == 0 ? it.tape_s : it.tape_t, {}, gzt));
    }
  }

  ev.g_total.origin = GradOrigin::kOther;
  ev.g_total.values.resize(n);
  const double l1 = opt.weights.lambda1, l2 = opt.weights.lambda2;
  for (std::size_t k = 0; k < n; ++k) {
    ev.g_total.values[k] =
        l1 * (ev.g_src.values[k] + ev.g_trg.values[k]) + (contrast ? l2 * g_con[k] : 0.0);
  }
  return ev;
}

template ObjectiveEval evaluate_objective(
    const Backbone<float>&, const ParamVector<float>&, const ParamVector<float>&,
    std::span<const DomainSample>, std::span<const DomainSample>,
    const ObjectiveOptions&, bool);
template ObjectiveEval evaluate_objective(
    const Backbone<double>&, const ParamVector<double>&,
    const ParamVector<double>&, std::span<const DomainSample>,
    std::span<const DomainSample>, const ObjectiveOptions&, bool);

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config)
    : config_((config.validate(), std::move(config))), net_(config_.backbone) {}

TrainerState Trainer::init_state() const {
  TrainerState s;
  s.student = net_.init_params(derive_seed(config_.seed, 0x5EED));
  s.teacher = s.student;
  s.rng.seed(derive_seed(config_.seed, 0xBA7C));
  s.lr = config_.lr_for_epoch(0);
  return s;
}

Network Trainer::eval_network() const {
  return config_.ablation_arm.ema == EmaArm::kNoEma ? Network::kStudent
                                                    : Network::kTeacher;
}

DomainSample Trainer::make_target(const DomainSample& source, std::int64_t step,
                                  int item) const {
  const std::uint64_t seed =
      derive_seed(config_.seed, 0x7A, static_cast<std::uint64_t>(step),
                  static_cast<std::uint64_t>(item));
  return apply_domain_shift(source,
                            sample_domain_spec(config_.target_shift, source.domain_id, seed));
}

void Trainer::optimizer_step(TrainerState& state, const GradientVector& g) const {
  auto& p = state.student.values;
  ensure(g.values.size() == p.size(), "optimizer: gradient length mismatch");
  const double lr = state.lr;
  if (config_.optimizer == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < p.size(); ++i)
      p[i] = static_cast<float>(p[i] - lr * g.values[i]);
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (state.adam_m.size() != p.size()) {
    state.adam_m.assign(p.size(), 0.0);
    state.adam_v.assign(p.size(), 0.0);
  }
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g.values[i];
    state.adam_m[i] = b1 * state.adam_m[i] + (1.0 - b1) * gi;
    state.adam_v[i] = b2 * state.adam_v[i] + (1.0 - b2) * gi * gi;
    const double mh = state.adam_m[i] / c1, vh = state.adam_v[i] / c2;
    p[i] = static_cast<float>(p[i] - lr * mh / (std::sqrt(vh) + eps));
  }
}

RunRecord Trainer::train_step(std::span<const DomainSample> batch,
                              TrainerState& state,
                              std::optional<bool> force_gate) const {
  require(!batch.empty(), "train_step: empty batch");
  for (const auto& s : batch) {
    require(s.variant == Variant::kSource, "train_step: batch must hold SOURCE samples");
  }
  ensure(state.student.layout && state.teacher.layout &&
             state.student.layout->digest() == state.teacher.layout->digest(),
         "train_step: student and teacher layouts differ");

  std::vector<DomainSample> targets;
  targets.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    targets.push_back(make_target(batch[i], state.step, static_cast<int>(i)));

  const ObjectiveOptions opt{config_.weights, config_.ablation_arm, config_.boundary,
                             config_.temperature};
  const ObjectiveEval ev = evaluate_objective<float>(net_, state.student, state.teacher,
                                                     batch, targets, opt, true);

  RunRecord rec;
  rec.step = state.step;
  rec.epoch = state.epoch;
  rec.L_stu_src = ev.supervised[0];
  rec.L_stu_trg = ev.supervised[1];
  rec.L_tea_src = ev.supervised[2];
  rec.L_tea_trg = ev.supervised[3];
  rec.L_c_z = ev.lc_z;
  rec.L_c_b = ev.lc_b;
  rec.total = ev.total;
  rec.lr = state.lr;

  const bool finite =
      std::isfinite(ev.total) &&
      std::all_of(ev.g_total.values.begin(), ev.g_total.values.end(),
                  [](double v) { return std::isfinite(v); });
  if (!finite) {
    char msg[256];
    std::snprintf(msg, sizeof msg,
                  "non-finite loss at step %lld: stu_src=%g stu_trg=%g tea_src=%g "
                  "tea_trg=%g total=%g",
                  static_cast<long long>(state.step), rec.L_stu_src, rec.L_stu_trg,
                  rec.L_tea_src, rec.L_tea_trg, rec.total);
    throw TrainingAborted(msg, rec);
  }

  std::optional<GateDecision> decision;
  if (config_.ablation_arm.ema != EmaArm::kNoEma) {
    GateDecision d = gate(ev.g_src, ev.g_trg, config_.ema);
    if (config_.ablation_arm.ema == EmaArm::kEma) d.updated = true;
    if (force_gate) d.updated = *force_gate;
    decision = d;
  }
  rec.gate = decision;

  optimizer_step(state, ev.g_total);
  // The teacher averages in the student as it stands after this step's
  // descent; at step 0 the pre-step student is bit-identical to the teacher.
  if (decision && decision->updated) {
    state.teacher = ema_update(state.teacher, state.student, *decision, config_.ema);
    ++state.teacher_updates;
  }
  ++state.step;
  return rec;
}

// ---------------------------------------------------------------------------
// Training driver

void save_trainer_checkpoint(const fs::path& dir, const Trainer& trainer,
                             const TrainerState& state, int held_out_domain) {
  fs::create_directories(dir);
  const auto& cfg = trainer.config();
  save_checkpoint(dir / "student", state.student, cfg.backbone, state.step,
                  {{"network", "STUDENT"}});
  save_checkpoint(dir / "teacher", state.teacher, cfg.backbone, state.step,
                  {{"network", "TEACHER"}});
  std::ostringstream rng;
  rng << state.rng;
  write_json(dir / "trainer_state.json",
             {{"step", state.step},
              {"epoch", state.epoch},
              {"lr", state.lr},
              {"rng_state", rng.str()},
              {"teacher_updates", state.teacher_updates},
              {"eval_network", to_string(trainer.eval_network())},
              {"held_out_domain", held_out_domain},
              {"ablation_arm", cfg.ablation_arm.str()},
              {"seed", cfg.seed}});
}

namespace {

std::vector<std::vector<int>> make_batches(const std::vector<std::vector<int>>& by_domain,
                                           int batch_size, BatchMixing mixing,
                                           std::mt19937_64& rng) {
  std::vector<std::vector<int>> batches;
  auto chunk = [&](std::vector<int> ids) {
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t i = 0; i < ids.size(); i += static_cast<std::size_t>(batch_size)) {
      const auto end = std::min(ids.size(), i + static_cast<std::size_t>(batch_size));
      batches.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(i),
                           ids.begin() + static_cast<std::ptrdiff_t>(end));
    }
  };
  if (mixing == BatchMixing::kSingleDomain) {
    for (const auto& ids : by_domain) chunk(ids);
  } else {
    std::vector<int> all;
    for (const auto& ids : by_domain) all.insert(all.end(), ids.begin(), ids.end());
    chunk(all);
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& dataset,
                  int held_out_domain, const fs::path& out_dir,
                  const TrainHooks& hooks) {
  config.validate();
  if (!dataset.has_domain(held_out_domain)) {
    throw ConfigError("held-out domain " + std::to_string(held_out_domain) +
                      " is not present in dataset " + dataset.root().string());
  }
  if (dataset.shape() != config.backbone.in_shape) {
    throw ConfigError("dataset volume shape " + dataset.shape().str() +
                      " does not match backbone.in_shape " +
                      config.backbone.in_shape.str());
  }
  std::vector<int> train_domains;
  for (int k : dataset.domain_ids())
    if (k != held_out_domain) train_domains.push_back(k);
  require(!train_domains.empty(), "no training domains remain after holding one out");

  fs::create_directories(out_dir);
  write_json(out_dir / "manifest.json",
             {{"command", "train"},
              {"config", to_json(config)},
              {"dataset", {{"path", fs::absolute(dataset.root()).string()},
                           {"digest", dataset.content_digest()}}},
              {"held_out_domain", held_out_domain},
              {"train_domains", train_domains}});

  std::vector<DomainSample> samples;
  std::vector<std::vector<int>> by_domain;
  for (int k : train_domains) {
    std::vector<int> ids;
    for (auto& s : dataset.load_domain(k)) {
      ids.push_back(static_cast<int>(samples.size()));
      samples.push_back(std::move(s));
    }
    by_domain.push_back(std::move(ids));
  }

  Trainer trainer(config);
  TrainResult result;
  TrainerState& state = result.state;
  state = trainer.init_state();
  std::ofstream log(out_dir / "run_log.jsonl", std::ios::trunc);
  if (!log) throw ConfigError("cannot write run log under " + out_dir.string());

  bool stop = false;
  for (int epoch = 0; epoch < config.epochs && !stop; ++epoch) {
    state.epoch = epoch;
    state.lr = config.lr_for_epoch(epoch);
    for (const auto& ids : make_batches(by_domain, config.batch_size,
                                        config.batch_mixing, state.rng)) {
      if (config.max_steps > 0 && state.step >= config.max_steps) {
        stop = true;
        break;
      }
      std::vector<DomainSample> batch;
      for (int id : ids) batch.push_back(samples[static_cast<std::size_t>(id)]);
      std::optional<TrainerState> before;
      if (hooks.on_step) before = state;
      RunRecord rec;
      try {
        rec = trainer.train_step(batch, state);
      } catch (const TrainingAborted& e) {
        json j = to_json(e.record());
        j["aborted"] = true;
        j["error"] = e.what();
        log << j.dump() << '\n';
        log.flush();
        throw;
      }
      log << to_json(rec).dump() << '\n';
      if (hooks.on_step) hooks.on_step(rec, *before, state);
      result.records.push_back(std::move(rec));
    }
    log.flush();
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d", epoch);
    save_trainer_checkpoint(out_dir / "checkpoints" / name, trainer, state,
                            held_out_domain);
  }
  save_trainer_checkpoint(out_dir / "checkpoint", trainer, state, held_out_domain);
  return result;
}

}  // namespace dglab
