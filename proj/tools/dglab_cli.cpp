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

// dglab: dataset generation, training, evaluation, ablation, feature export
// and plotting from the command line.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dglab/datagen.hpp"
#include "dglab/error.hpp"
#include "dglab/experiment.hpp"
#include "dglab/io.hpp"
#include "dglab/metrics.hpp"
#include "dglab/plot.hpp"
#include "dglab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dglab;

namespace {

json dataset_options_json(const DatasetOptions& o) {
  json ranges;
  to_json(ranges, o.domain_ranges);
  return {{"num_domains", o.num_domains},
          {"samples_per_domain", o.samples_per_domain},
          {"master_seed", o.master_seed},
          {"shape", {o.shape.d, o.shape.h, o.shape.w}},
          {"aneurysm_radius_range", {o.aneurysm_radius_range.first, o.aneurysm_radius_range.second}},
          {"domain_ranges", ranges}};
}

DatasetOptions dataset_options_from_json(const json& j) {
  static const std::set<std::string> known{"num_domains", "samples_per_domain", "master_seed",
                                           "shape", "aneurysm_radius_range", "domain_ranges"};
  if (!j.is_object()) throw ConfigError("dataset config: expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("config field '" + it.key() + "': unknown field");
  }
  DatasetOptions o;
  std::string field;
  try {
    field = "num_domains";
    if (j.contains(field)) o.num_domains = j.at(field).get<int>();
    field = "samples_per_domain";
    if (j.contains(field)) o.samples_per_domain = j.at(field).get<int>();
    field = "master_seed";
    if (j.contains(field)) o.master_seed = j.at(field).get<std::uint64_t>();
    field = "shape";
    if (j.contains(field)) {
      const auto s = j.at(field).get<std::vector<int>>();
      if (s.size() != 3) throw ConfigError("expected [D, H, W]");
      o.shape = {s[0], s[1], s[2]};
    }
    field = "aneurysm_radius_range";
    if (j.contains(field)) {
      const auto r = j.at(field).get<std::vector<double>>();
      if (r.size() != 2) throw ConfigError("expected [lo, hi]");
      o.aneurysm_radius_range = {r[0], r[1]};
    }
    field = "domain_ranges";
    if (j.contains(field)) o.domain_ranges = j.at(field).get<ShiftRanges>();
  } catch (const json::exception& e) {
    throw ConfigError("config field '" + field + "': " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError("config field '" + field + "': " + e.what());
  }
  return o;
}

Dataset open_dataset(const std::string& path) {
  if (path.empty()) throw ConfigError("--dataset is required");
  if (!fs::is_directory(path)) throw ConfigError("dataset not found: " + path);
  return Dataset::open(path);
}

TrainConfig load_config(const std::string& path) {
  if (path.empty()) return TrainConfig{};
  if (!fs::exists(path)) throw ConfigError("config not found: " + path);
  return load_train_config(path);
}

Network parse_network(const std::string& s) {
  if (s == "teacher" || s == "TEACHER") return Network::kTeacher;
  if (s == "student" || s == "STUDENT") return Network::kStudent;
  throw ConfigError("--network must be teacher or student, got '" + s + "'");
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw ConfigError("cannot write " + p.string());
  f << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dglab: gradient-gated teacher-student domain generalization lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // generate-data
  std::string gd_out, gd_config;
  std::optional<std::uint64_t> gd_seed;
  std::optional<int> gd_domains, gd_samples, gd_size;
  auto* gen = app.add_subcommand("generate-data", "Render a synthetic multi-domain dataset");
  gen->add_option("--out", gd_out, "Output dataset directory")->required();
  gen->add_option("--config", gd_config, "Dataset options JSON");
  gen->add_option("--seed", gd_seed, "Master seed");
  gen->add_option("--domains", gd_domains, "Number of domains");
  gen->add_option("--samples", gd_samples, "Samples per domain");
  gen->add_option("--size", gd_size, "Cubic volume edge length");

  // train
  std::string tr_config, tr_dataset, tr_out, tr_arm;
  int tr_held_out = 0;
  std::optional<std::uint64_t> tr_seed;
  std::optional<int> tr_epochs;
  std::optional<std::int64_t> tr_max_steps;
  bool tr_det = false;
  auto* trn = app.add_subcommand("train", "Leave-one-domain-out training run");
  trn->add_option("--config", tr_config, "TrainConfig JSON");
  trn->add_option("--dataset", tr_dataset, "Dataset directory")->required();
  trn->add_option("--held-out", tr_held_out, "Held-out domain id")->required();
  trn->add_option("--arm", tr_arm, "EMA_ARM,BACL_ARM (e.g. GS_EMA,BACL)");
  trn->add_option("--seed", tr_seed, "Run seed");
  trn->add_option("--epochs", tr_epochs, "Override epochs");
  trn->add_option("--max-steps", tr_max_steps, "Stop after this many steps");
  trn->add_option("--out", tr_out, "Run directory")->required();
  trn->add_flag("--deterministic", tr_det, "Deterministic mode");

  // evaluate
  std::string ev_ckpt, ev_dataset, ev_out, ev_network;
  int ev_held_out = 0;
  auto* evl = app.add_subcommand("evaluate", "Metrics of a checkpoint on a held-out domain");
  evl->add_option("--checkpoint", ev_ckpt, "Run dir, checkpoint dir or parameter stem")->required();
  evl->add_option("--dataset", ev_dataset, "Dataset directory")->required();
  evl->add_option("--held-out", ev_held_out, "Domain to evaluate")->required();
  evl->add_option("--network", ev_network, "teacher or student (default: the run's eval network)");
  evl->add_option("--out", ev_out, "Directory for metrics.json / metrics.txt");
  evl->add_option("--config", tr_config, "Ignored; accepted for symmetry");

  // ablate
  std::string ab_config, ab_dataset, ab_out;
  std::vector<std::string> ab_arms;
  std::vector<std::uint64_t> ab_seeds;
  std::vector<int> ab_held_out;
  std::optional<int> ab_epochs;
  bool ab_det = false, ab_fresh = false;
  auto* abl = app.add_subcommand("ablate", "Run the EMA x BACL ablation grid");
  abl->add_option("--config", ab_config, "Base TrainConfig JSON");
  abl->add_option("--dataset", ab_dataset, "Dataset directory")->required();
  abl->add_option("--arm", ab_arms, "Arm to run (repeatable); default is the 3x3 grid");
  abl->add_option("--seed", ab_seeds, "Seed (repeatable); default 0");
  abl->add_option("--held-out", ab_held_out, "Held-out domain (repeatable); default all");
  abl->add_option("--epochs", ab_epochs, "Override epochs");
  abl->add_option("--out", ab_out, "Ablation directory")->required();
  abl->add_flag("--deterministic", ab_det, "Deterministic mode");
  abl->add_flag("--fresh", ab_fresh, "Recompute cells that already have results");

  // export-features
  std::string ex_ckpt, ex_dataset, ex_out, ex_network = "teacher", ex_run;
  std::vector<int> ex_domains;
  int ex_samples = 0;
  auto* exf = app.add_subcommand("export-features", "Dump bottleneck features");
  exf->add_option("--checkpoint", ex_ckpt, "Run or checkpoint directory")->required();
  exf->add_option("--dataset", ex_dataset, "Dataset directory")->required();
  exf->add_option("--domains", ex_domains, "Domains to export (default all)");
  exf->add_option("--network", ex_network, "teacher, student or both");
  exf->add_option("--samples", ex_samples, "Samples per domain (default all)");
  exf->add_option("--run", ex_run, "Run label stored with each row");
  exf->add_option("--out", ex_out, "Output stem (<stem>.f32 + <stem>.json)")->required();

  // plot
  std::vector<std::string> pl_runs, pl_dumps;
  std::string pl_out;
  int pl_window = 20;
  auto* plt = app.add_subcommand("plot", "SVG figures from run logs and feature dumps");
  plt->add_option("--run", pl_runs, "Run directory (repeatable)");
  plt->add_option("--dump", pl_dumps, "Feature dump stem (repeatable)");
  plt->add_option("--window", pl_window, "Gate-rate window");
  plt->add_option("--out", pl_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      DatasetOptions o;
      if (!gd_config.empty()) {
        if (!fs::exists(gd_config)) throw ConfigError("config not found: " + gd_config);
        o = dataset_options_from_json(read_json(gd_config));
      }
      if (gd_seed) o.master_seed = *gd_seed;
      if (gd_domains) o.num_domains = *gd_domains;
      if (gd_samples) o.samples_per_domain = *gd_samples;
      if (gd_size) o.shape = {*gd_size, *gd_size, *gd_size};
      const Dataset ds = build_dataset(gd_out, o);
      std::printf("wrote %d samples in %zu domains to %s\n", ds.total_samples(),
                  ds.domain_ids().size(), gd_out.c_str());
      std::printf("digest %s\n", ds.content_digest().c_str());
      return 0;
    }

    if (*trn) {
      TrainConfig cfg = load_config(tr_config);
      if (!tr_arm.empty()) cfg.ablation_arm = AblationArm::parse(tr_arm);
      if (tr_seed) cfg.seed = *tr_seed;
      if (tr_epochs) cfg.epochs = *tr_epochs;
      if (tr_max_steps) cfg.max_steps = *tr_max_steps;
      if (tr_det) cfg.deterministic = true;
      cfg.validate();
      const Dataset ds = open_dataset(tr_dataset);
      const auto result = train(cfg, ds, tr_held_out, tr_out);
      std::printf("trained %lld steps (%lld teacher updates); checkpoint in %s/checkpoint\n",
                  static_cast<long long>(result.state.step),
                  static_cast<long long>(result.state.teacher_updates), tr_out.c_str());
      return 0;
    }

    if (*evl) {
      const Dataset ds = open_dataset(ev_dataset);
      std::optional<Network> who;
      if (!ev_network.empty()) who = parse_network(ev_network);
      const fs::path stem = resolve_checkpoint(ev_ckpt, who);
      const MetricsReport report = evaluate_domain(load_predictor(stem), ds, ev_held_out);
      const std::string table = report.to_table("mean (domain " + std::to_string(ev_held_out) + ")");
      std::cout << table;
      if (!ev_out.empty()) {
        write_manifest(ev_out, "evaluate",
                       {{"checkpoint", fs::absolute(stem).string()}, {"held_out", ev_held_out}},
                       &ds);
        write_json(fs::path(ev_out) / "metrics.json", report.to_json());
        write_text(fs::path(ev_out) / "metrics.txt", table);
      }
      return 0;
    }

    if (*abl) {
      AblationOptions opt;
      opt.base = load_config(ab_config);
      if (ab_epochs) opt.base.epochs = *ab_epochs;
      if (ab_det) opt.base.deterministic = true;
      opt.base.validate();
      if (ab_arms.empty()) {
        for (auto e : {EmaArm::kNoEma, EmaArm::kEma, EmaArm::kGsEma})
          for (auto b : {BaclArm::kBaclV, BaclArm::kBaclB, BaclArm::kBacl})
            opt.arms.push_back({e, b});
      }
      for (const auto& a : ab_arms) opt.arms.push_back(AblationArm::parse(a));
      opt.seeds = ab_seeds.empty() ? std::vector<std::uint64_t>{0} : ab_seeds;
      opt.held_out = ab_held_out;
      opt.skip_existing = !ab_fresh;
      opt.progress = [](const std::string& m) { std::fprintf(stderr, "[ablate] %s\n", m.c_str()); };
      const Dataset ds = open_dataset(ab_dataset);
      const auto summary = run_ablation(opt, ds, ab_out);
      std::cout << summary.to_tsv();
      return 0;
    }

    if (*exf) {
      const Dataset ds = open_dataset(ex_dataset);
      std::vector<Network> nets;
      if (ex_network == "both") nets = {Network::kStudent, Network::kTeacher};
      else nets = {parse_network(ex_network)};
      const auto domains = ex_domains.empty() ? ds.domain_ids() : ex_domains;
      const FeatureDump dump = export_features(ex_ckpt, ds, domains, nets, ex_samples, ex_run);
      dump.save(ex_out);
      const fs::path stem(ex_out);
      write_manifest(stem.has_parent_path() ? stem.parent_path() : fs::path("."),
                     "export-features",
                     {{"checkpoint", fs::absolute(ex_ckpt).string()}, {"domains", domains},
                      {"network", ex_network}, {"samples", ex_samples}, {"out", ex_out}},
                     &ds);
      std::printf("wrote %zu rows x %zu features to %s.f32\n", dump.rows(), dump.dim,
                  ex_out.c_str());
      if (dump.rows() > 0) {
        try {
          std::printf("domain_overlap_score %.6f\n", domain_overlap_score(dump));
        } catch (const DegenerateInputError&) {
        }
      }
      return 0;
    }

    if (*plt) {
      if (pl_runs.empty() && pl_dumps.empty()) throw ConfigError("plot needs --run or --dump");
      const fs::path out(pl_out);
      fs::create_directories(out);
      if (!pl_runs.empty()) {
        std::vector<NamedLog> logs;
        for (const auto& r : pl_runs) {
          const fs::path log = fs::path(r) / "run_log.jsonl";
          if (!fs::exists(log)) throw ConfigError("run log not found: " + log.string());
          std::string name = fs::path(r).filename().string();
          const fs::path manifest = fs::path(r) / "manifest.json";
          if (fs::exists(manifest)) {
            const json m = read_json(manifest);
            if (m.contains("config")) name = m["config"].value("ablation_arm", name);
          }
          logs.push_back({name, read_run_log(log)});
        }
        plot_loss_curves(logs, out / "loss_curves.svg");
        plot_gate_rate(logs, out / "gate_rate.svg", pl_window);
        std::printf("wrote %s and %s\n", (out / "loss_curves.svg").c_str(),
                    (out / "gate_rate.svg").c_str());
      }
      if (!pl_dumps.empty()) {
        FeatureDump merged;
        for (const auto& d : pl_dumps) {
          FeatureDump one = FeatureDump::load(d);
          for (std::size_t r = 0; r < one.rows(); ++r) {
            FeatureLabel l = one.labels[r];
            if (l.run.empty()) l.run = fs::path(d).filename().string();
            const auto row = one.row(r);
            merged.append(std::vector<double>(row.begin(), row.end()), l);
          }
        }
        plot_embedding(merged, out / "embedding.svg");
        std::printf("wrote %s\n", (out / "embedding.svg").c_str());
      }
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const TrainingAborted& e) {
    std::fprintf(stderr, "training aborted: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
