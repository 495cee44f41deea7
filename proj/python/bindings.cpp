#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "iap/errors.hpp"
#include "iap/report.hpp"

namespace py = pybind11;
using namespace iap;

namespace {

std::vector<double> row_of(const Eigen::Ref<const Eigen::VectorXd>& x) { return {x.data(), x.data() + x.size()}; }

py::dict metrics_dict(const MetricsReport& m) {
  py::dict d;
  py::list transfer;
  for (const auto& t : m.transfer) transfer.append(t ? py::cast(*t) : py::none());
  d["transfer"] = transfer;
  d["average"] = m.average;
  d["last"] = m.last;
  d["zero_shot"] = m.zero_shot;
  d["mean_open_layers"] = m.mean_open_layers;
  d["transfer_mean"] = m.transfer_mean ? py::cast(*m.transfer_mean) : py::none();
  d["average_mean"] = m.average_mean;
  d["last_mean"] = m.last_mean;
  d["zero_shot_mean"] = m.zero_shot_mean;
  return d;
}

py::dict decision_dict(const RoutingDecision& r) {
  py::dict d;
  d["task"] = r.task;
  d["stage"] = to_string(r.stage);
  d["weight"] = r.weight;
  d["e_max"] = r.e_max;
  d["scores"] = r.scores;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Instance-aware prompting for multi-domain task-incremental learning";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("default_config", [] { return config_to_json(RunConfig{}).dump(); },
        "Default run config as a JSON string.");
  m.def("normalize_config", [](const std::string& text) { return config_to_json(config_from_json(json::parse(text))).dump(); },
        py::arg("config_json"), "Validates a JSON config and returns it with every default filled in.");

  m.def(
      "run",
      [](const std::string& text, const std::string& out_dir) {
        const auto config = config_from_json(json::parse(text));
        std::unique_ptr<ModelState> state;
        RunResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(config, {}, &state);
        }
        if (!out_dir.empty()) {
          auto c = config;
          c.output_dir = out_dir;
          write_run_directory(out_dir, c, r, *state);
        }
        py::dict d = metrics_dict(r.metrics);
        d["task_names"] = r.task_names;
        std::vector<std::vector<double>> grid;
        for (int s = 0; s < r.accuracy.tasks(); ++s) {
          grid.emplace_back();
          for (int t = 0; t < r.accuracy.tasks(); ++t) grid.back().push_back(r.accuracy.at(s, t));
        }
        d["accuracy"] = grid;
        return d;
      },
      py::arg("config_json"), py::arg("out_dir") = "",
      "Runs the full stream; writes a run directory when out_dir is given. Returns the metrics.");

  m.def(
      "compute_metrics",
      [](const std::vector<std::vector<double>>& rows, const std::vector<double>& zero_shot) {
        return metrics_dict(compute_metrics(AccuracyMatrix::from_rows(rows), zero_shot));
      },
      py::arg("accuracy"), py::arg("zero_shot") = std::vector<double>{});

  m.def("report", [](const std::string& dir) { return format_report(read_run_directory(dir)); }, py::arg("run_dir"));

  m.def(
      "load_checkpoint",
      [](const std::string& path) {
        const auto ckpt = load_checkpoint(path);
        py::dict out;
        for (const auto& e : ckpt.entries) {
          std::vector<py::ssize_t> shape(e.shape.begin(), e.shape.end());
          py::array_t<float> a(shape);
          std::copy(e.values.begin(), e.values.end(), a.mutable_data());
          out[py::str(e.name)] = a;
        }
        return out;
      },
      py::arg("path"), "Checkpoint tensors by name.");

  py::class_<GaussianStats>(m, "GaussianStats")
      .def_static("fit", &GaussianStats::fit, py::arg("features"), py::arg("reg"))
      .def("log_pdf", [](const GaussianStats& g, const Eigen::VectorXd& x) { return g.log_pdf(row_of(x)); })
      .def_property_readonly("mean", &GaussianStats::mean)
      .def_property_readonly("covariance", &GaussianStats::covariance)
      .def_property_readonly("log_det", &GaussianStats::log_det);

  py::class_<RoutingConfig>(m, "RoutingConfig")
      .def(py::init<>())
      .def_readwrite("lower", &RoutingConfig::lower)
      .def_readwrite("upper", &RoutingConfig::upper)
      .def_readwrite("top_k", &RoutingConfig::top_k)
      .def_readwrite("task_reg", &RoutingConfig::task_reg)
      .def_readwrite("class_reg", &RoutingConfig::class_reg)
      .def_readwrite("score_offset", &RoutingConfig::score_offset)
      .def_readwrite("two_stage", &RoutingConfig::two_stage);

  py::class_<DistributionLibrary>(m, "DistributionLibrary")
      .def(py::init<>())
      .def(
          "add_task",
          [](DistributionLibrary& lib, int task_id, const FeatureMatrix& features, const std::vector<int>& labels,
             const RoutingConfig& config) { lib.add_task(task_id, features, labels, config); },
          py::arg("task_id"), py::arg("features"), py::arg("labels"), py::arg("config"))
      .def(
          "route",
          [](const DistributionLibrary& lib, const Eigen::VectorXd& x, const RoutingConfig& config) {
            return decision_dict(route_instance(row_of(x), lib, config));
          },
          py::arg("x"), py::arg("config"))
      .def_property_readonly("task_count", [](const DistributionLibrary& lib) { return lib.tasks().size(); });
}
