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

#include "dglab/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

#include "dglab/error.hpp"
#include "dglab/io.hpp"

namespace dglab {

namespace fs = std::filesystem;
using detail::require;
using nlohmann::json;

void write_manifest(const fs::path& dir, const std::string& command,
                    const json& args, const Dataset* dataset) {
  fs::create_directories(dir);
  json m{{"command", command}, {"version", kVersion}, {"args", args}};
  if (dataset) {
    m["dataset"] = {{"path", fs::absolute(dataset->root()).string()},
                    {"digest", dataset->content_digest()}};
  }
  write_json(dir / "manifest.json", m);
}

// ---------------------------------------------------------------------------
// Predictors

fs::path resolve_checkpoint(const fs::path& ref, std::optional<Network> network) {
  fs::path p = ref;
  if (fs::is_directory(p)) {
    if (fs::exists(p / "checkpoint" / "trainer_state.json")) p /= "checkpoint";
    if (!fs::exists(p / "trainer_state.json")) {
      throw ConfigError("no checkpoint found under " + ref.string());
    }
    Network n = Network::kTeacher;
    if (network) {
      n = *network;
    } else {
      const std::string e = read_json(p / "trainer_state.json").value("eval_network", "TEACHER");
      n = e == "STUDENT" ? Network::kStudent : Network::kTeacher;
    }
    return p / (n == Network::kStudent ? "student" : "teacher");
  }
  if (p.extension() == ".json" || p.extension() == ".params") p.replace_extension();
  fs::path sidecar = p;
  sidecar += ".json";
  if (!fs::exists(sidecar)) throw ConfigError("checkpoint not found: " + ref.string());
  return p;
}

void write_oracle_checkpoint(const fs::path& stem) {
  fs::path sidecar = stem;
  sidecar += ".json";
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  write_json(sidecar, {{"model", "ground_truth_oracle"}});
}

Predictor load_predictor(const fs::path& stem) {
  fs::path sidecar = stem;
  sidecar += ".json";
  if (!fs::exists(sidecar)) throw ConfigError("checkpoint not found: " + stem.string());
  if (read_json(sidecar).value("model", "") == "ground_truth_oracle") {
    return [](const DomainSample& s) {
      Prediction p;
      p.shape = s.mask.shape;
      p.probs.assign(s.mask.data.begin(), s.mask.data.end());
      return p;
    };
  }
  auto ckpt = std::make_shared<LoadedCheckpoint>(load_checkpoint(stem));
  auto net = std::make_shared<Backbone<float>>(ckpt->config);
  return [ckpt, net](const DomainSample& s) {
    if (s.image.shape != ckpt->config.in_shape) {
      throw ConfigError("sample shape " + s.image.shape.str() +
                        " does not match checkpoint input shape " +
                        ckpt->config.in_shape.str());
    }
    return forward(*net, ckpt->params, s.image).first;
  };
}

MetricsReport evaluate_domain(const Predictor& predict, const Dataset& dataset,
                              int domain) {
  require(dataset.has_domain(domain),
          "domain " + std::to_string(domain) + " is not in the dataset");
  MetricsReport report;
  const int n = dataset.samples_in_domain(domain);
  for (int i = 0; i < n; ++i) {
    const DomainSample s = dataset.load(domain, i);
    report.add("domain_" + std::to_string(domain) + "/sample_" + std::to_string(i),
               confusion(binarize(predict(s)), s.mask));
  }
  report.finalize();
  return report;
}

// ---------------------------------------------------------------------------
// Feature dumps

void FeatureDump::append(std::span<const double> features, FeatureLabel label) {
  if (labels.empty() && dim == 0) dim = features.size();
  require(features.size() == dim, "feature dump: row length mismatch");
  matrix.insert(matrix.end(), features.begin(), features.end());
  labels.push_back(std::move(label));
}

FeatureDump FeatureDump::filter(
    const std::function<bool(const FeatureLabel&)>& keep) const {
  FeatureDump out;
  out.dim = dim;
  for (std::size_t r = 0; r < rows(); ++r) {
    if (!keep(labels[r])) continue;
    const auto x = row(r);
    out.matrix.insert(out.matrix.end(), x.begin(), x.end());
    out.labels.push_back(labels[r]);
  }
  return out;
}

void FeatureDump::save(const fs::path& stem) const {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  fs::path data = stem, side = stem;
  data += ".f32";
  side += ".json";
  write_f32_le(data, matrix);
  json ls = json::array();
  for (const auto& l : labels) {
    ls.push_back({{"domain_id", l.domain_id},
                  {"variant", to_string(l.variant)},
                  {"network", to_string(l.network)},
                  {"sample_index", l.sample_index},
                  {"run", l.run}});
  }
  write_json(side, {{"rows", rows()}, {"dim", dim}, {"dtype", "float32-le"},
                    {"labels", ls}});
}

FeatureDump FeatureDump::load(const fs::path& stem) {
  fs::path base = stem;
  if (base.extension() == ".json" || base.extension() == ".f32") base.replace_extension();
  fs::path data = base, side = base;
  data += ".f32";
  side += ".json";
  if (!fs::exists(side) || !fs::exists(data)) {
    throw ConfigError("feature dump not found: " + stem.string());
  }
  const json j = read_json(side);
  FeatureDump d;
  d.dim = j.at("dim").get<std::size_t>();
  d.matrix = read_f32_le(data);
  for (const auto& l : j.at("labels")) {
    d.labels.push_back({l.at("domain_id").get<int>(),
                        variant_from_string(l.at("variant").get<std::string>()),
                        l.at("network").get<std::string>() == "STUDENT" ? Network::kStudent
                                                                         : Network::kTeacher,
                        l.at("sample_index").get<int>(), l.value("run", "")});
  }
  if (d.matrix.size() != d.dim * d.labels.size() ||
      j.at("rows").get<std::size_t>() != d.labels.size()) {
    throw ConfigError("feature dump " + base.string() + " is inconsistent");
  }
  return d;
}

FeatureDump export_features(const fs::path& checkpoint_dir, const Dataset& dataset,
                            const std::vector<int>& domains,
                            const std::vector<Network>& networks,
                            int samples_per_domain, const std::string& run) {
  require(!networks.empty(), "export_features: no network selected");
  for (int k : domains) {
    require(dataset.has_domain(k), "domain " + std::to_string(k) + " is not in the dataset");
  }
  FeatureDump dump;
  for (Network who : networks) {
    const auto ckpt = load_checkpoint(resolve_checkpoint(checkpoint_dir, who));
    const Backbone<float> net(ckpt.config);
    for (int k : domains) {
      int n = dataset.samples_in_domain(k);
      if (samples_per_domain > 0) n = std::min(n, samples_per_domain);
      for (int i = 0; i < n; ++i) {
        const DomainSample s = dataset.load(k, i);
        const auto z = forward(net, ckpt.params, s.image, who, s.variant).second;
        dump.append(z.data, {k, s.variant, who, i, run});
      }
    }
  }
  return dump;
}

double domain_overlap_score(const FeatureDump& dump) {
  std::map<int, std::vector<std::size_t>> by_domain;
  for (std::size_t r = 0; r < dump.rows(); ++r) by_domain[dump.labels[r].domain_id].push_back(r);
  if (by_domain.size() < 2) {
    throw DegenerateInputError("domain_overlap_score needs at least two domains");
  }
  for (const auto& [k, rows] : by_domain) {
    if (rows.size() < 3) {
      throw DegenerateInputError("domain_overlap_score needs at least three samples in domain " +
                                 std::to_string(k));
    }
  }
  const std::size_t dim = dump.dim;
  std::vector<int> ids;
  std::vector<std::vector<double>> sums;
  for (const auto& [k, rows] : by_domain) {
    ids.push_back(k);
    std::vector<double> s(dim, 0.0);
    for (auto r : rows) {
      const auto x = dump.row(r);
      for (std::size_t c = 0; c < dim; ++c) s[c] += x[c];
    }
    sums.push_back(std::move(s));
  }
  const std::size_t K = ids.size();
  double balanced = 0.0;
  for (std::size_t d = 0; d < K; ++d) {
    const auto& rows = by_domain[ids[d]];
    std::size_t correct = 0;
    for (auto r : rows) {
      const auto x = dump.row(r);
      std::size_t best = 0;
      double best_dist = std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < K; ++e) {
        // Leave the query row out of its own centroid.
        const bool own = e == d;
        const double n = static_cast<double>(by_domain[ids[e]].size() - (own ? 1 : 0));
        double dist = 0.0;
        for (std::size_t c = 0; c < dim; ++c) {
          const double mu = (sums[e][c] - (own ? x[c] : 0.0)) / n;
          const double diff = x[c] - mu;
          dist += diff * diff;
        }
        if (dist < best_dist) {
          best_dist = dist;
          best = e;
        }
      }
      if (best == d) ++correct;
    }
    balanced += static_cast<double>(correct) / static_cast<double>(rows.size());
  }
  balanced /= static_cast<double>(K);
  const double chance = 1.0 / static_cast<double>(K);
  const double excess = std::clamp((balanced - chance) / (1.0 - chance), 0.0, 1.0);
  return 1.0 - excess;
}

// ---------------------------------------------------------------------------
// Ablation

namespace {

std::string arm_slug(const AblationArm& arm) {
  return std::string(to_string(arm.ema)) + "-" + to_string(arm.bacl);
}

json entry_json(const MetricsEntry& m) {
  return {{"dsc", m.dsc}, {"sen", m.sen}, {"jac", m.jac}, {"vs", m.vs}};
}

MetricsEntry entry_from_json(const json& j) {
  return {j.at("dsc").get<double>(), j.at("sen").get<double>(),
          j.at("jac").get<double>(), j.at("vs").get<double>()};
}

bool arm_less(const AblationArm& a, const AblationArm& b) {
  return std::pair(static_cast<int>(a.ema), static_cast<int>(a.bacl)) <
         std::pair(static_cast<int>(b.ema), static_cast<int>(b.bacl));
}

}  // namespace

fs::path ablation_cell_dir(const fs::path& out, const AblationArm& arm,
                           std::uint64_t seed, int held_out) {
  return out / arm_slug(arm) / ("seed_" + std::to_string(seed)) /
         ("heldout_" + std::to_string(held_out));
}

AblationCell run_ablation_cell(const TrainConfig& config, const Dataset& dataset,
                               int held_out, const fs::path& dir) {
  const TrainResult tr = train(config, dataset, held_out, dir);
  const Trainer trainer(config);
  const Network who = trainer.eval_network();

  const MetricsReport report =
      evaluate_domain(load_predictor(resolve_checkpoint(dir, who)), dataset, held_out);
  write_json(dir / "eval.json", report.to_json());

  const FeatureDump dump = export_features(dir, dataset, dataset.domain_ids(), {who}, 0,
                                           config.ablation_arm.str());
  dump.save(dir / "features");
  const double overlap = domain_overlap_score(dump);

  AblationCell cell{config.ablation_arm, config.seed, held_out, report.mean, overlap, dir};
  write_json(dir / "result.json",
             {{"arm", config.ablation_arm.str()},
              {"seed", config.seed},
              {"held_out", held_out},
              {"eval_network", to_string(who)},
              {"steps", tr.state.step},
              {"teacher_updates", tr.state.teacher_updates},
              {"mean", entry_json(report.mean)},
              {"overlap", overlap},
              {"config", to_json(config)}});
  return cell;
}

AblationSummary run_ablation(const AblationOptions& opt, const Dataset& dataset,
                             const fs::path& out) {
  require(!opt.arms.empty(), "ablate: no arms given");
  require(!opt.seeds.empty(), "ablate: no seeds given");
  std::vector<int> folds = opt.held_out.empty() ? dataset.domain_ids() : opt.held_out;
  for (int k : folds) {
    require(dataset.has_domain(k), "held-out domain " + std::to_string(k) +
                                       " is not in the dataset");
  }
  json arms = json::array(), seeds = opt.seeds;
  for (const auto& a : opt.arms) arms.push_back(a.str());
  write_manifest(out, "ablate",
                 {{"base_config", to_json(opt.base)}, {"arms", arms},
                  {"seeds", seeds}, {"held_out", folds}},
                 &dataset);

  for (const auto& arm : opt.arms) {
    for (auto seed : opt.seeds) {
      for (int k : folds) {
        TrainConfig cfg = opt.base;
        cfg.ablation_arm = arm;
        cfg.seed = seed;
        const fs::path dir = ablation_cell_dir(out, arm, seed, k);
        const fs::path result = dir / "result.json";
        if (opt.skip_existing && fs::exists(result) &&
            read_json(result).value("config", json()) == to_json(cfg)) {
          if (opt.progress) opt.progress("reuse " + dir.string());
          continue;
        }
        if (fs::exists(dir)) fs::remove_all(dir);
        if (opt.progress) opt.progress("run " + arm.str() + " seed=" + std::to_string(seed) +
                                       " held_out=" + std::to_string(k));
        run_ablation_cell(cfg, dataset, k, dir);
      }
    }
  }
  AblationSummary summary = summarize_ablation(out);
  std::ofstream(out / "summary.tsv") << summary.to_tsv();
  std::ofstream(out / "cells.tsv") << summary.cells_tsv();
  return summary;
}

AblationSummary summarize_ablation(const fs::path& out) {
  if (!fs::is_directory(out)) throw ConfigError("no ablation directory at " + out.string());
  AblationSummary s;
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (!e.is_regular_file() || e.path().filename() != "result.json") continue;
    const json j = read_json(e.path());
    s.cells.push_back({AblationArm::parse(j.at("arm").get<std::string>()),
                       j.at("seed").get<std::uint64_t>(), j.at("held_out").get<int>(),
                       entry_from_json(j.at("mean")), j.at("overlap").get<double>(),
                       e.path().parent_path()});
  }
  std::sort(s.cells.begin(), s.cells.end(), [](const AblationCell& a, const AblationCell& b) {
    if (a.arm != b.arm) return arm_less(a.arm, b.arm);
    if (a.seed != b.seed) return a.seed < b.seed;
    return a.held_out < b.held_out;
  });

  for (std::size_t i = 0; i < s.cells.size();) {
    std::size_t j = i;
    AblationRow row;
    row.arm = s.cells[i].arm;
    std::map<std::uint64_t, std::pair<double, int>> dsc, ov;
    while (j < s.cells.size() && s.cells[j].arm == row.arm) {
      const auto& c = s.cells[j];
      row.mean.dsc += c.mean.dsc;
      row.mean.sen += c.mean.sen;
      row.mean.jac += c.mean.jac;
      row.mean.vs += c.mean.vs;
      row.overlap += c.overlap;
      dsc[c.seed].first += c.mean.dsc;
      dsc[c.seed].second += 1;
      ov[c.seed].first += c.overlap;
      ov[c.seed].second += 1;
      ++j;
    }
    row.runs = j - i;
    const double n = static_cast<double>(row.runs);
    row.mean.dsc /= n;
    row.mean.sen /= n;
    row.mean.jac /= n;
    row.mean.vs /= n;
    row.overlap /= n;
    for (const auto& [seed, v] : dsc) row.dsc_by_seed[seed] = v.first / v.second;
    for (const auto& [seed, v] : ov) row.overlap_by_seed[seed] = v.first / v.second;
    s.rows.push_back(std::move(row));
    i = j;
  }
  return s;
}

const AblationRow* AblationSummary::find(const AblationArm& arm) const {
  for (const auto& r : rows)
    if (r.arm == arm) return &r;
  return nullptr;
}

std::string AblationSummary::to_tsv() const {
  std::ostringstream os;
  os << "arm\truns\tDSC\tSen\tJac\tVS\toverlap\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s\t%zu\t%.2f\t%.2f\t%.2f\t%.2f\t%.4f\n",
                  r.arm.str().c_str(), r.runs, 100 * r.mean.dsc, 100 * r.mean.sen,
                  100 * r.mean.jac, 100 * r.mean.vs, r.overlap);
    os << buf;
  }
  return os.str();
}

std::string AblationSummary::cells_tsv() const {
  std::ostringstream os;
  os << "arm\tseed\theld_out\tDSC\tSen\tJac\tVS\toverlap\n";
  char buf[256];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%s\t%llu\t%d\t%.2f\t%.2f\t%.2f\t%.2f\t%.4f\n",
                  c.arm.str().c_str(), static_cast<unsigned long long>(c.seed),
                  c.held_out, 100 * c.mean.dsc, 100 * c.mean.sen, 100 * c.mean.jac,
                  100 * c.mean.vs, c.overlap);
    os << buf;
  }
  return os.str();
}

}  // namespace dglab
