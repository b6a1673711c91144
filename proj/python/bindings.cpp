#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "extrap/adapt.hpp"
#include "extrap/harness.hpp"
#include "extrap/metrics.hpp"
#include "extrap/oracle.hpp"
#include "extrap/synthgen.hpp"

namespace py = pybind11;
using namespace extrap;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.storage().begin(), t.storage().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  ndgrad::Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

// nlohmann <-> Python through the json module keeps the binding small.
py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::dict run_to_dict(const RunResult& r) {
  py::dict d;
  d["mode"] = to_string(r.mode);
  d["task"] = to_string(r.task);
  d["distance"] = r.distance;
  d["seed"] = r.seed;
  d["method"] = r.method;
  d["correct"] = r.correct;
  d["sq_error"] = r.sq_error;
  d["block_id"] = r.block_id;
  d["degenerate"] = r.degenerate;
  d["failed"] = r.failed;
  d["error"] = r.error;
  return d;
}

}  // namespace

PYBIND11_MODULE(_extrap, m) {
  m.doc() = "Latent-variable extrapolation: generators, estimator and experiment harness";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<MetricsError>(m, "MetricsError", PyExc_ValueError);

  py::class_<Generator>(m, "Generator")
      .def_property_readonly("d_x", [](const Generator& g) { return g.spec().d_x; })
      .def_property_readonly("d_z", [](const Generator& g) { return g.spec().d_z(); })
      .def_property_readonly("mode", [](const Generator& g) { return to_string(g.spec().mode); })
      .def("__call__", [](const Generator& g, const py::array_t<double>& z) { return to_numpy(g.apply(from_numpy(z))); },
           py::arg("z"))
      .def(
          "jacobian",
          [](const Generator& g, const std::vector<double>& z) { return to_numpy(oracle::jacobian(g, z)); },
          py::arg("z"));

  m.def(
      "build_generator",
      [](const std::string& mode, const std::string& task, std::uint64_t seed) {
        GeneratorSpec spec;
        spec.mode = parse_shift_mode(mode);
        spec.task = parse_task(task);
        spec.seed = seed;
        return build_generator(spec);
      },
      py::arg("mode") = "dense", py::arg("task") = "classification", py::arg("seed") = 0);

  m.def(
      "sample_source",
      [](const Generator& g, std::size_t n, std::uint64_t seed) {
        Rng rng(seed);
        const Dataset d = sample_source(g, n, rng);
        py::dict out;
        out["x"] = to_numpy(d.xs);
        if (d.task == Task::BinaryClassification)
          out["y"] = py::array_t<int>(static_cast<py::ssize_t>(d.classes.size()), d.classes.data());
        else
          out["y"] = py::array_t<double>(static_cast<py::ssize_t>(d.values.size()), d.values.data());
        return out;
      },
      py::arg("generator"), py::arg("n"), py::arg("seed") = 0);

  m.def(
      "influenced_indices",
      [](const py::array_t<double>& J, std::size_t d_c, double tol) {
        const auto sets = oracle::influenced_indices(from_numpy(J), d_c, tol);
        return py::make_tuple(sets.I_s, sets.I_c, sets.I_c_minus_s);
      },
      py::arg("jacobian"), py::arg("d_c"), py::arg("tol") = 1e-6);

  m.def(
      "entropy", [](const std::vector<double>& logits) { return entropy(logits); }, py::arg("logits"));
  m.def(
      "mask_sparsity_loss",
      [](const std::vector<double>& logits, double w) { return mask_sparsity_loss(std::span<const double>(logits), w); },
      py::arg("mask_logits"), py::arg("l1_weight"));

  m.def(
      "default_config", [](const std::string& mode, const std::string& method) {
        return to_py(ExperimentConfig::table1(parse_shift_mode(mode), parse_method(method)).to_json());
      },
      py::arg("mode") = "dense", py::arg("method") = "ours");

  m.def(
      "validate_config", [](const py::object& cfg) { return to_py(ExperimentConfig::from_json(from_py(cfg)).to_json()); },
      py::arg("config"), "Fill defaults, check the config and return it.");

  m.def(
      "run_matrix",
      [](const py::object& cfg) {
        const ExperimentConfig c = ExperimentConfig::from_json(from_py(cfg));
        MatrixResult r;
        {
          py::gil_scoped_release release;
          r = run_matrix(c);
        }
        py::list rows;
        for (const auto& row : r.rows) rows.append(run_to_dict(row));
        py::list cells;
        for (const auto& s : r.cells) {
          py::dict d;
          d["distance"] = s.distance;
          d["n_runs"] = s.n_runs;
          d["failed"] = s.failed;
          d["mean"] = s.mean;
          d["std_error"] = s.std_error;
          d["block_id"] = s.block_id;
          d["kl"] = s.kl;
          cells.append(d);
        }
        return py::make_tuple(rows, cells);
      },
      py::arg("config"));

  m.def(
      "assumption_report",
      [](const py::object& cfg, double distance) {
        return to_py(assumption_report(ExperimentConfig::from_json(from_py(cfg)), distance));
      },
      py::arg("config"), py::arg("distance"));

  m.def(
      "emit_plot",
      [](const std::vector<std::tuple<int, double, double, std::size_t>>& cells) {
        std::vector<GridCell> grid;
        for (const auto& [scope, severity, err, n] : cells) grid.push_back({scope, severity, err, n});
        return emit_plot(grid);
      },
      py::arg("cells"), "cells: (scope, severity, mean_error, n_runs) tuples");
}
