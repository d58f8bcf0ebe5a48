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

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dglab/datagen.hpp"
#include "dglab/error.hpp"
#include "dglab/experiment.hpp"
#include "dglab/gsema.hpp"
#include "dglab/losses.hpp"
#include "dglab/metrics.hpp"
#include "dglab/trainer.hpp"

namespace py = pybind11;
using namespace dglab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vec(const Array& a) {
  return {a.data(), a.data() + a.size()};
}

Array to_array(const std::vector<double>& v, std::vector<py::ssize_t> shape) {
  Array out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Shape3 shape_of(const py::array& a, int skip = 0) {
  if (a.ndim() != 3 + skip) throw ConfigError("expected a " + std::to_string(3 + skip) + "-D array");
  return {static_cast<int>(a.shape(skip)), static_cast<int>(a.shape(skip + 1)),
          static_cast<int>(a.shape(skip + 2))};
}

LabelMask mask_of(const py::array& a) {
  const auto m = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>::ensure(a);
  LabelMask out(shape_of(m));
  std::copy(m.data(), m.data() + m.size(), out.data.begin());
  return out;
}

py::array_t<float> volume_array(const Volume& v) {
  py::array_t<float> out({v.shape.d, v.shape.h, v.shape.w});
  std::copy(v.data.begin(), v.data.end(), out.mutable_data());
  return out;
}

py::array_t<std::uint8_t> mask_array(const LabelMask& m) {
  py::array_t<std::uint8_t> out({m.shape.d, m.shape.h, m.shape.w});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

py::dict metrics_dict(const MetricsEntry& m) {
  py::dict d;
  d["dsc"] = m.dsc;
  d["sen"] = m.sen;
  d["jac"] = m.jac;
  d["vs"] = m.vs;
  return d;
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json py_to_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_dglab, m) {
  m.doc() = "Gradient-gated teacher-student domain generalization core";
  m.attr("__version__") = kVersion;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", PyExc_ValueError);
  py::register_exception<InternalError>(m, "InternalError", PyExc_RuntimeError);
  py::register_exception<TrainingAborted>(m, "TrainingAborted", PyExc_RuntimeError);

  m.def(
      "gate",
      [](const Array& g_src, const Array& g_trg, const std::string& rule) {
        EMAConfig cfg;
        cfg.gate_rule = gate_rule_from_string(rule);
        const auto d = gate({to_vec(g_src), GradOrigin::kSrc}, {to_vec(g_trg), GradOrigin::kTrg}, cfg);
        return py::make_tuple(d.updated, d.inner_product, d.cos_angle);
      },
      py::arg("g_src"), py::arg("g_trg"), py::arg("rule") = "PROSE",
      "Gate decision: (updated, inner_product, cos_angle).");

  m.def(
      "ema_update",
      [](const Array& teacher, const Array& student, bool updated, double alpha) {
        EMAConfig cfg;
        cfg.alpha = alpha;
        const ParamVector<double> t{to_vec(teacher), nullptr}, s{to_vec(student), nullptr};
        const auto out = ema_update(t, s, GateDecision{0.0, 0.0, updated}, cfg);
        return to_array(out.values, {static_cast<py::ssize_t>(out.size())});
      },
      py::arg("teacher"), py::arg("student"), py::arg("updated") = true, py::arg("alpha") = 0.9999);

  m.def(
      "contrastive_loss",
      [](const std::vector<std::vector<double>>& pool, const std::vector<std::pair<int, int>>& pos,
         const std::vector<std::pair<int, int>>& neg, double temperature) {
        return contrastive_loss(PairSet{pool, pos, neg}, temperature);
      },
      py::arg("pool"), py::arg("positives"), py::arg("negatives"), py::arg("temperature") = 1.0);

  m.def(
      "boundary_extract",
      [](const Array& z, double cutoff) {
        const Shape3 s = shape_of(z, 1);
        MaskSpec mask;
        mask.cutoff_fraction = cutoff;
        const auto out = boundary_extract(to_vec(z), static_cast<int>(z.shape(0)), s, mask);
        return to_array(out, {z.shape(0), s.d, s.h, s.w});
      },
      py::arg("z"), py::arg("cutoff") = 0.25, "High-pass boundary map of a (C, D, H, W) tensor.");

  m.def(
      "dce_loss",
      [](const Array& p, const py::array& y) {
        return dce_loss(Prediction{shape_of(p), to_vec(p)}, mask_of(y));
      },
      py::arg("probs"), py::arg("mask"));

  m.def(
      "segmentation_metrics",
      [](const py::array& pred, const py::array& gt) {
        return metrics_dict(compute_metrics(confusion(mask_of(pred), mask_of(gt))));
      },
      py::arg("pred"), py::arg("gt"), "DSC, sensitivity, Jaccard and volume similarity.");

  m.def(
      "domain_overlap_score",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& x,
         const std::vector<int>& domains) {
        if (x.ndim() != 2 || static_cast<std::size_t>(x.shape(0)) != domains.size())
          throw ConfigError("features must be (rows, dim) with one domain per row");
        FeatureDump d;
        d.dim = x.shape(1);
        d.matrix.assign(x.data(), x.data() + x.size());
        for (int k : domains) d.labels.push_back(FeatureLabel{k});
        return domain_overlap_score(d);
      },
      py::arg("features"), py::arg("domains"));

  m.def(
      "generate_phantom",
      [](std::uint64_t seed, int size, double rmin, double rmax) {
        const auto s = generate_phantom(seed, {size, size, size}, {rmin, rmax});
        return py::make_tuple(volume_array(s.image), mask_array(s.mask));
      },
      py::arg("seed"), py::arg("size") = 32, py::arg("rmin") = 2.5, py::arg("rmax") = 4.5,
      "Vessel phantom: (image float32, mask uint8).");

  m.def(
      "build_dataset",
      [](const std::filesystem::path& root, int domains, int samples, std::uint64_t seed, int size,
         double rmin, double rmax) {
        DatasetOptions o;
        o.num_domains = domains;
        o.samples_per_domain = samples;
        o.master_seed = seed;
        o.shape = {size, size, size};
        o.aneurysm_radius_range = {rmin, rmax};
        return build_dataset(root, o).content_digest();
      },
      py::arg("root"), py::arg("domains") = 4, py::arg("samples") = 10, py::arg("seed") = 42,
      py::arg("size") = 32, py::arg("rmin") = 2.5, py::arg("rmax") = 4.5,
      "Writes a dataset and returns its content digest.");

  m.def(
      "train",
      [](const py::object& config, const std::filesystem::path& dataset, int held_out,
         const std::filesystem::path& out) {
        const TrainConfig c = train_config_from_json(py_to_json(config));
        const auto res = train(c, Dataset::open(dataset), held_out, out);
        py::list records;
        for (const auto& r : res.records) records.append(json_to_py(to_json(r)));
        return records;
      },
      py::arg("config"), py::arg("dataset"), py::arg("held_out"), py::arg("out"),
      "Leave-one-domain-out training; returns the per-step records.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
         int held_out) {
        const auto report = evaluate_domain(load_predictor(resolve_checkpoint(checkpoint)),
                                            Dataset::open(dataset), held_out);
        return json_to_py(report.to_json());
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("held_out"));
}
