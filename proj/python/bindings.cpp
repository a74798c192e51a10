#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "cnc/affinity.hpp"
#include "cnc/clustering.hpp"
#include "cnc/dataset.hpp"
#include "cnc/error.hpp"
#include "cnc/eval.hpp"
#include "cnc/heads.hpp"
#include "cnc/pipeline.hpp"

namespace py = pybind11;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U32Array = py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>;

cnc::Matrix to_matrix(const F64Array& a) {
  if (a.ndim() != 2) throw cnc::DimensionError("expected a 2-d array, got " + std::to_string(a.ndim()) + "-d");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return cnc::Matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

F64Array to_array(const cnc::Matrix& m) {
  F64Array out({m.rows(), m.cols()});
  if (!m.empty()) std::memcpy(out.mutable_data(), m.data().data(), m.size() * sizeof(double));
  return out;
}

std::vector<std::uint32_t> to_labels(const U32Array& a) {
  if (a.ndim() != 1) throw cnc::DimensionError("labels must be a 1-d array");
  return {a.data(), a.data() + a.shape(0)};
}

template <class T>
py::array_t<T> vector_array(const std::vector<T>& v) {
  py::array_t<T> out(static_cast<py::ssize_t>(v.size()));
  if (!v.empty()) std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(T));
  return out;
}

cnc::Dataset to_dataset(const F64Array& x, const U32Array& y, std::optional<std::uint32_t> num_labels) {
  cnc::Dataset d;
  d.features = to_matrix(x);
  d.labels = to_labels(y);
  if (num_labels) {
    d.num_labels = *num_labels;
  } else {
    for (auto l : d.labels) d.num_labels = std::max(d.num_labels, l + 1);
  }
  d.validate();
  return d;
}

std::optional<cnc::Dataset> optional_dataset(const std::optional<F64Array>& x, const std::optional<U32Array>& y,
                                             std::uint32_t num_labels) {
  if (x.has_value() != y.has_value()) throw cnc::ConfigError("test_x and test_y must be given together");
  if (!x) return std::nullopt;
  return to_dataset(*x, *y, num_labels);
}

py::list hierarchy_list(const cnc::Hierarchy& h) {
  py::list out;
  for (const auto& level : h.levels) out.append(level);
  return out;
}

py::dict stage_dict(const cnc::StageRecord& s) {
  py::dict d;
  d["name"] = s.name;
  d["stage"] = s.stage;
  d["round"] = s.round;
  d["num_outputs"] = s.num_outputs;
  d["epochs_run"] = s.epochs_run;
  d["best_epoch"] = s.best_epoch;
  d["best_val_loss"] = s.best_val_loss;
  d["param_count"] = s.param_count;
  d["flags"] = s.flags;
  py::list curve;
  for (const auto& e : s.curve) {
    py::dict r;
    r["epoch"] = e.epoch;
    r["train_loss"] = e.train_loss;
    r["train_top1"] = e.train_top1;
    r["val_loss"] = e.val_loss;
    r["val_top1"] = e.val_top1;
    curve.append(r);
  }
  d["curve"] = curve;
  return d;
}

py::dict report_dict(const cnc::RunReport& r) {
  py::dict d;
  d["seed"] = r.seed;
  py::list stages;
  for (const auto& s : r.stages) stages.append(stage_dict(s));
  d["stages"] = stages;
  d["flags"] = r.flags;
  d["total_epochs"] = r.total_epochs;
  d["final_param_count"] = r.final_param_count;
  d["final_val_top1"] = r.final_val_top1;
  d["final_test_top1"] = r.final_test_top1;
  return d;
}

cnc::AffinityMatrix to_affinity(const F64Array& mass, const std::optional<std::vector<std::size_t>>& counts) {
  if (!counts) return cnc::AffinityMatrix::from_mass(to_matrix(mass));
  cnc::AffinityMatrix a{to_matrix(mass), *counts};
  a.validate();
  return a;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Clustering-and-classification training core";

  auto base = py::register_exception<cnc::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<cnc::ConfigError>(m, "ConfigError", base);
  py::register_exception<cnc::InputError>(m, "InputError", base);
  py::register_exception<cnc::NumericError>(m, "NumericError", base);

  py::class_<cnc::StageConfig>(m, "StageConfig")
      .def(py::init<>())
      .def_readwrite("step1_epochs", &cnc::StageConfig::step1_epochs)
      .def_readwrite("max_epochs", &cnc::StageConfig::max_epochs)
      .def_readwrite("patience", &cnc::StageConfig::patience)
      .def_readwrite("min_delta", &cnc::StageConfig::min_delta)
      .def_readwrite("validation_fraction", &cnc::StageConfig::validation_fraction)
      .def_readwrite("level_trsd", &cnc::StageConfig::level_trsd)
      .def_readwrite("hidden_ratio", &cnc::StageConfig::hidden_ratio)
      .def_readwrite("levels", &cnc::StageConfig::levels)
      .def_readwrite("extractor_widths", &cnc::StageConfig::extractor_widths)
      .def_property(
          "lr", [](const cnc::StageConfig& c) { return c.optimizer.learning_rate; },
          [](cnc::StageConfig& c, double v) { c.optimizer.learning_rate = v; })
      .def_property(
          "momentum", [](const cnc::StageConfig& c) { return c.optimizer.momentum; },
          [](cnc::StageConfig& c, double v) { c.optimizer.momentum = v; })
      .def_property(
          "weight_decay", [](const cnc::StageConfig& c) { return c.optimizer.weight_decay; },
          [](cnc::StageConfig& c, double v) { c.optimizer.weight_decay = v; })
      .def_property(
          "batch_size", [](const cnc::StageConfig& c) { return c.optimizer.batch_size; },
          [](cnc::StageConfig& c, std::size_t v) { c.optimizer.batch_size = v; })
      .def_property(
          "strategy", [](const cnc::StageConfig& c) { return cnc::to_string(c.rule.strategy); },
          [](cnc::StageConfig& c, const std::string& v) { c.rule.strategy = cnc::parse_strategy(v); })
      .def_property(
          "trsd", [](const cnc::StageConfig& c) { return c.rule.trsd; },
          [](cnc::StageConfig& c, std::optional<double> v) { c.rule.trsd = v; })
      .def_property(
          "tau", [](const cnc::StageConfig& c) { return c.rule.tau; },
          [](cnc::StageConfig& c, double v) { c.rule.tau = v; })
      .def_property(
          "min_cluster_size", [](const cnc::StageConfig& c) { return c.rule.min_cluster_size; },
          [](cnc::StageConfig& c, std::size_t v) { c.rule.min_cluster_size = v; })
      .def_property(
          "all_above", [](const cnc::StageConfig& c) { return c.rule.all_above; },
          [](cnc::StageConfig& c, bool v) { c.rule.all_above = v; })
      .def("validate", &cnc::StageConfig::validate)
      .def("epoch_budget", &cnc::StageConfig::epoch_budget);

  py::class_<cnc::Clustering>(m, "Clustering")
      .def_static(
          "from_groups", [](const std::vector<std::size_t>& g) { return cnc::Clustering::from_groups(g); },
          py::arg("groups"))
      .def_static("singletons", &cnc::Clustering::singletons, py::arg("num_labels"))
      .def_property_readonly("assign", [](const cnc::Clustering& c) { return c.assign(); })
      .def_property_readonly("members", [](const cnc::Clustering& c) { return c.members(); })
      .def_property_readonly("num_labels", &cnc::Clustering::num_labels)
      .def_property_readonly("num_clusters", &cnc::Clustering::num_clusters)
      .def_property_readonly("has_merges", &cnc::Clustering::has_merges)
      .def("__eq__", [](const cnc::Clustering& a, const cnc::Clustering& b) { return a == b; })
      .def("__repr__", [](const cnc::Clustering& c) {
        return "Clustering(" + std::to_string(c.num_labels()) + " labels, " + std::to_string(c.num_clusters()) +
               " clusters)";
      });

  py::class_<cnc::CncModel>(m, "Model")
      .def_property_readonly("stage", &cnc::CncModel::stage)
      .def_property_readonly("num_labels", &cnc::CncModel::num_labels)
      .def_property_readonly("num_outputs", &cnc::CncModel::num_outputs)
      .def_property_readonly("param_count", &cnc::CncModel::param_count)
      .def("logits", [](const cnc::CncModel& mdl, const F64Array& x) { return to_array(mdl.logits(to_matrix(x))); })
      .def("predict_proba",
           [](const cnc::CncModel& mdl, const F64Array& x) { return to_array(mdl.predict_proba(to_matrix(x))); })
      .def("save", [](const cnc::CncModel& mdl, const std::filesystem::path& p) { cnc::save_checkpoint(mdl, p); });

  m.def("load_checkpoint", &cnc::load_checkpoint, py::arg("path"));

  m.def(
      "gen_planted",
      [](std::vector<std::size_t> tiers, std::size_t dim, std::size_t per_class, double inter_spread,
         double intra_spread, double noise_sigma, std::uint64_t seed, std::size_t holdout_per_class) {
        cnc::PlantedSpec spec;
        spec.tiers = std::move(tiers);
        spec.dim = dim;
        spec.per_class = per_class;
        spec.inter_spread = inter_spread;
        spec.intra_spread = intra_spread;
        spec.noise_sigma = noise_sigma;
        spec.seed = seed;
        const cnc::Dataset d = cnc::gen_planted(spec);
        py::dict out;
        out["x"] = to_array(d.features);
        out["y"] = vector_array(d.labels);
        out["num_labels"] = d.num_labels;
        out["hierarchy"] = hierarchy_list(*d.planted);
        if (holdout_per_class > 0) {
          const cnc::Dataset t = cnc::gen_planted_holdout(spec, holdout_per_class);
          out["test_x"] = to_array(t.features);
          out["test_y"] = vector_array(t.labels);
        }
        return out;
      },
      py::arg("tiers") = std::vector<std::size_t>{4, 4}, py::arg("dim") = 16, py::arg("per_class") = 50,
      py::arg("inter_spread") = 10.0, py::arg("intra_spread") = 1.0, py::arg("noise_sigma") = 1.0,
      py::arg("seed") = 0, py::arg("holdout_per_class") = 0,
      "Gaussian blobs arranged as a label tree. Returns a dict with x, y, num_labels, hierarchy "
      "and, when holdout_per_class > 0, test_x and test_y.");

  m.def(
      "accumulate_affinity",
      [](const F64Array& probs, const U32Array& labels, std::size_t num_labels) {
        const auto a = cnc::accumulate_affinity(to_matrix(probs), to_labels(labels), num_labels);
        return py::make_tuple(to_array(a.mass), a.counts);
      },
      py::arg("probs"), py::arg("labels"), py::arg("num_labels"),
      "Per-label mean of softmax rows. Returns (mass, counts).");

  m.def(
      "cluster",
      [](const F64Array& mass, std::optional<std::vector<std::size_t>> counts, const std::string& strategy,
         std::optional<double> trsd, double tau, std::size_t min_cluster_size, bool all_above) {
        cnc::ClusterRule rule;
        rule.strategy = cnc::parse_strategy(strategy);
        rule.trsd = trsd;
        rule.tau = tau;
        rule.min_cluster_size = min_cluster_size;
        rule.all_above = all_above;
        return cnc::cluster(to_affinity(mass, counts), rule);
      },
      py::arg("mass"), py::arg("counts") = py::none(), py::arg("strategy") = "threshold-argmax",
      py::arg("trsd") = py::none(), py::arg("tau") = 0.5, py::arg("min_cluster_size") = 1,
      py::arg("all_above") = false);

  m.def(
      "masks",
      [](const cnc::Clustering& c) {
        const auto ms = cnc::masks(c);
        py::array_t<std::uint8_t> out({ms.size(), c.num_labels()});
        auto v = out.mutable_unchecked<2>();
        for (std::size_t k = 0; k < ms.size(); ++k) {
          for (std::size_t i = 0; i < c.num_labels(); ++i) v(k, i) = ms[k].bits[i];
        }
        return out;
      },
      py::arg("clustering"), "K x C array; row k is 1 exactly on the members of cluster k.");

  m.def(
      "relabel",
      [](const U32Array& labels, const cnc::Clustering& c) { return vector_array(cnc::relabel(to_labels(labels), c)); },
      py::arg("labels"), py::arg("clustering"));

  m.def(
      "run_cnc",
      [](const cnc::StageConfig& config, const F64Array& x, const U32Array& y, std::optional<std::uint32_t> num_labels,
         std::uint64_t seed, std::optional<F64Array> test_x, std::optional<U32Array> test_y) {
        const cnc::Dataset data = to_dataset(x, y, num_labels);
        const auto test = optional_dataset(test_x, test_y, data.num_labels);
        std::optional<cnc::CncRun> run;
        {
          py::gil_scoped_release nogil;
          run.emplace(cnc::run_cnc(config, data, test ? &*test : nullptr, seed));
        }
        py::dict out;
        out["model"] = std::move(run->model);
        out["hierarchy"] = hierarchy_list(run->hierarchy);
        py::list affinities;
        for (const auto& a : run->affinities) affinities.append(to_array(a.mass));
        out["affinities"] = affinities;
        out["report"] = report_dict(run->report);
        return out;
      },
      py::arg("config"), py::arg("x"), py::arg("y"), py::arg("num_labels") = py::none(), py::arg("seed") = 0,
      py::arg("test_x") = py::none(), py::arg("test_y") = py::none(),
      "Full run. Returns a dict with model, hierarchy, affinities and report.");

  m.def(
      "run_flat",
      [](const cnc::StageConfig& config, const F64Array& x, const U32Array& y, std::optional<std::uint32_t> num_labels,
         std::uint64_t seed, std::optional<std::size_t> max_epochs, std::optional<F64Array> test_x,
         std::optional<U32Array> test_y) {
        const cnc::Dataset data = to_dataset(x, y, num_labels);
        const auto test = optional_dataset(test_x, test_y, data.num_labels);
        std::optional<cnc::FlatRun> run;
        {
          py::gil_scoped_release nogil;
          run.emplace(cnc::run_flat(config, data, test ? &*test : nullptr, seed,
                                    max_epochs.value_or(config.epoch_budget())));
        }
        py::dict out;
        out["model"] = std::move(run->model);
        out["report"] = report_dict(run->report);
        return out;
      },
      py::arg("config"), py::arg("x"), py::arg("y"), py::arg("num_labels") = py::none(), py::arg("seed") = 0,
      py::arg("max_epochs") = py::none(), py::arg("test_x") = py::none(), py::arg("test_y") = py::none());

  m.def(
      "evaluate",
      [](const cnc::CncModel& model, const F64Array& x, const U32Array& y) {
        const cnc::Dataset data = to_dataset(x, y, static_cast<std::uint32_t>(model.num_labels()));
        const auto r = cnc::evaluate(model, data);
        py::dict out;
        out["top1_error"] = r.top1_error;
        out["per_class_error"] = r.per_class_error;
        out["confusion"] = to_array(r.confusion);
        out["n"] = r.n;
        return out;
      },
      py::arg("model"), py::arg("x"), py::arg("y"));

  m.def(
      "label_count_ablation",
      [](const cnc::StageConfig& config, const F64Array& x, const U32Array& y, std::vector<std::size_t> counts,
         std::vector<std::uint64_t> seeds, std::optional<F64Array> test_x, std::optional<U32Array> test_y,
         std::size_t jobs) {
        const cnc::Dataset data = to_dataset(x, y, std::nullopt);
        const auto test = optional_dataset(test_x, test_y, data.num_labels);
        std::optional<cnc::AblationResult> r;
        {
          py::gil_scoped_release nogil;
          r.emplace(cnc::label_count_ablation(data, test ? &*test : nullptr, counts, config, seeds, jobs));
        }
        py::dict out;
        out["label_counts"] = r->label_counts;
        out["errors"] = r->errors;
        return out;
      },
      py::arg("config"), py::arg("x"), py::arg("y"), py::arg("counts"), py::arg("seeds"),
      py::arg("test_x") = py::none(), py::arg("test_y") = py::none(), py::arg("jobs") = 1);

  m.def(
      "compare",
      [](const cnc::StageConfig& config, const F64Array& x, const U32Array& y, std::vector<std::uint64_t> seeds,
         std::optional<F64Array> test_x, std::optional<U32Array> test_y, std::size_t jobs) {
        const cnc::Dataset data = to_dataset(x, y, std::nullopt);
        const auto test = optional_dataset(test_x, test_y, data.num_labels);
        std::optional<cnc::CompareResult> r;
        {
          py::gil_scoped_release nogil;
          r.emplace(cnc::compare_cnc_vs_flat(data, test ? &*test : nullptr, config, seeds, jobs));
        }
        py::list rows;
        for (const auto& row : r->rows) {
          py::dict d;
          d["seed"] = row.seed;
          d["arm"] = row.arm;
          d["top1"] = row.top1;
          d["params"] = row.params;
          d["epochs"] = row.epochs;
          d["flags"] = row.flags;
          rows.append(d);
        }
        py::dict out;
        out["rows"] = rows;
        out["mean_flat"] = r->mean_flat;
        out["mean_cnc"] = r->mean_cnc;
        return out;
      },
      py::arg("config"), py::arg("x"), py::arg("y"), py::arg("seeds"), py::arg("test_x") = py::none(),
      py::arg("test_y") = py::none(), py::arg("jobs") = 1, "Flat baseline vs CnC per seed under one epoch cap.");
}
