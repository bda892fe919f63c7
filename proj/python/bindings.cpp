#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mhese/baddata.hpp"
#include "mhese/config.hpp"
#include "mhese/errors.hpp"
#include "mhese/genmodel.hpp"
#include "mhese/pipeline.hpp"

namespace py = pybind11;
using namespace mhese;

namespace {

/// Rows = instants, columns = nodes.
Eigen::MatrixXd stack_network(const std::vector<NetworkState>& s, bool angles) {
  if (s.empty()) return Eigen::MatrixXd(0, 0);
  Eigen::MatrixXd out(s.size(), s.front().size());
  for (std::size_t k = 0; k < s.size(); ++k) out.row(k) = (angles ? s[k].theta : s[k].v).transpose();
  return out;
}

/// Shape (instants, machines * 9), machine-major.
Eigen::MatrixXd stack_generators(const std::vector<std::vector<GeneratorState>>& g) {
  if (g.empty() || g.front().empty()) return Eigen::MatrixXd(g.size(), 0);
  const auto m = static_cast<Eigen::Index>(g.front().size());
  Eigen::MatrixXd out(g.size(), m * kGenStates);
  for (std::size_t k = 0; k < g.size(); ++k)
    for (Eigen::Index j = 0; j < m; ++j) out.row(k).segment(j * kGenStates, kGenStates) = g[k][j].as_vector();
  return out;
}

std::vector<double> record_times(const std::vector<WindowRecord>& r) {
  std::vector<double> t;
  for (const WindowRecord& w : r) t.push_back(w.t);
  return t;
}

py::dict window_series(const std::vector<WindowRecord>& recs) {
  std::vector<NetworkState> net;
  std::vector<std::vector<GeneratorState>> gens;
  std::vector<int> iters;
  for (const WindowRecord& w : recs) {
    net.push_back(w.network);
    gens.push_back(w.generators);
    iters.push_back(w.iterations);
  }
  py::dict d;
  d["t"] = record_times(recs);
  d["v"] = stack_network(net, false);
  d["theta"] = stack_network(net, true);
  d["generators"] = stack_generators(gens);
  d["iterations"] = iters;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Moving-horizon power-system state estimation";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<InvalidParameters>(m, "InvalidParameters", base.ptr());
  py::register_exception<OutOfRange>(m, "OutOfRange", base.ptr());
  py::register_exception<ConvergenceError>(m, "ConvergenceError", base.ptr());
  py::register_exception<SingularKkt>(m, "SingularKkt", base.ptr());
  py::register_exception<Unobservable>(m, "Unobservable", base.ptr());
  py::register_exception<DataMismatch>(m, "DataMismatch", base.ptr());

  py::class_<GeneratorParams>(m, "GeneratorParams")
      .def(py::init<>())
      .def_readwrite("H", &GeneratorParams::H)
      .def_readwrite("D", &GeneratorParams::D)
      .def_readwrite("x_d", &GeneratorParams::x_d)
      .def_readwrite("x_q", &GeneratorParams::x_q)
      .def_readwrite("x_d_t", &GeneratorParams::x_d_t)
      .def_readwrite("x_q_t", &GeneratorParams::x_q_t)
      .def_readwrite("T_d0_t", &GeneratorParams::T_d0_t)
      .def_readwrite("T_q0_t", &GeneratorParams::T_q0_t)
      .def_readwrite("r_s", &GeneratorParams::r_s)
      .def_readwrite("S_n", &GeneratorParams::S_n)
      .def_readwrite("R_droop", &GeneratorParams::R_droop)
      .def("validate", &GeneratorParams::validate);

  py::class_<GeneratorState>(m, "GeneratorState")
      .def(py::init<>())
      .def(py::init([](const GenVector& x) { return GeneratorState::from_vector(x); }), py::arg("x"))
      .def_readwrite("delta", &GeneratorState::delta)
      .def_readwrite("d_omega", &GeneratorState::d_omega)
      .def_readwrite("e_d_t", &GeneratorState::e_d_t)
      .def_readwrite("e_q_t", &GeneratorState::e_q_t)
      .def_readwrite("p_sv", &GeneratorState::p_sv)
      .def_readwrite("p_m", &GeneratorState::p_m)
      .def_readwrite("E_fd", &GeneratorState::E_fd)
      .def_readwrite("R_f", &GeneratorState::R_f)
      .def_readwrite("V_R", &GeneratorState::V_R)
      .def("as_vector", &GeneratorState::as_vector);

  m.def(
      "dq_current",
      [](const GeneratorState& x, double v, double theta, const GeneratorParams& p) {
        const DqCurrent c = dq_current(x, v, theta, p);
        return py::make_tuple(c.i_d, c.i_q);
      },
      py::arg("state"), py::arg("v"), py::arg("theta"), py::arg("params"),
      "Stator currents (i_d, i_q) in machine base.");
  m.def("wrap_angle", &wrap_angle, py::arg("angle"));

  m.def(
      "gauss_newton_step",
      [](const Eigen::VectorXd& h, const Eigen::VectorXd& c, const Eigen::MatrixXd& H, const Eigen::MatrixXd& C,
         const Eigen::VectorXd& w, double damping) {
        const KKTSolution s = gauss_newton_step(h, c, H, C, w, damping);
        return py::make_tuple(s.dx, s.lambda);
      },
      py::arg("h"), py::arg("c"), py::arg("H"), py::arg("C"), py::arg("w"), py::arg("damping") = 0.0,
      "One constrained Gauss-Newton step; returns (dx, lambda).");
  m.def("residual_covariance", &residual_covariance, py::arg("H"), py::arg("C"), py::arg("w"),
        "Diagonal of the residual covariance; +inf on zero-weight rows.");

  py::class_<RunConfig>(m, "RunConfig")
      .def_readonly("config_path", &RunConfig::config_path)
      .def_readonly("system_path", &RunConfig::system_path)
      .def_property(
          "seed", [](const RunConfig& c) { return c.scenario.noise_seed; },
          [](RunConfig& c, std::uint64_t s) { c.scenario.noise_seed = s; })
      .def_property(
          "estimator", [](const RunConfig& c) { return to_string(c.estimator); },
          [](RunConfig& c, const std::string& s) { c.estimator = parse_estimator_choice(s); })
      .def_property(
          "horizon", [](const RunConfig& c) { return c.mhe.horizon; },
          [](RunConfig& c, int L) {
            MHEConfig m = c.mhe;
            m.horizon = L;
            m.validate();
            c.mhe = m;
          })
      .def_readwrite("lnr", &RunConfig::lnr)
      .def_readwrite("lnr_threshold", &RunConfig::lnr_threshold)
      .def_readwrite("output_dir", &RunConfig::output_dir)
      .def_property_readonly("duration", [](const RunConfig& c) { return c.scenario.duration; })
      .def_property_readonly("nodes", [](const RunConfig& c) { return c.system.network.size(); })
      .def_property_readonly("channels", [](const RunConfig& c) {
        std::vector<std::string> out;
        for (int i = 0; i < 2 * static_cast<int>(c.pmus.size()); ++i) out.push_back(scalar_channel_label(c.pmus, i));
        return out;
      });

  m.def("load_run_config", &load_run_config, py::arg("path"));
  m.def("parse_run_config",
        [](const std::string& text, const std::filesystem::path& path) { return parse_run_config(text, path); },
        py::arg("text"), py::arg("path"), "Parses TOML text; `system` resolves relative to `path`.");

  py::class_<ExperimentResult>(m, "ExperimentResult")
      .def_readonly("state_dim", &ExperimentResult::state_dim)
      .def_readonly("unconverged", &ExperimentResult::unconverged)
      .def_readonly("sse_error", &ExperimentResult::sse_error)
      .def_readonly("mse_mhe", &ExperimentResult::mse_mhe)
      .def_readonly("mse_sse", &ExperimentResult::mse_sse)
      .def_readonly("residual_labels", &ExperimentResult::residual_labels)
      .def_property_readonly("mean_iterations_mhe", [](const ExperimentResult& r) { return mean_iterations(r.mhe); })
      .def_property_readonly("mean_iterations_sse", [](const ExperimentResult& r) { return mean_iterations(r.sse); })
      .def_property_readonly("truth",
                             [](const ExperimentResult& r) {
                               py::dict d;
                               d["t"] = r.truth.times;
                               d["v"] = stack_network(r.truth.network, false);
                               d["theta"] = stack_network(r.truth.network, true);
                               d["generators"] = stack_generators(r.truth.generators);
                               return d;
                             })
      .def_property_readonly("measurements",
                             [](const ExperimentResult& r) {
                               std::vector<double> t;
                               Eigen::MatrixXd z(r.frames.size(), r.frames.empty() ? 0 : r.frames.front().values.size());
                               for (std::size_t k = 0; k < r.frames.size(); ++k) {
                                 t.push_back(r.frames[k].t);
                                 z.row(k) = r.frames[k].values.transpose();
                               }
                               py::dict d;
                               d["t"] = t;
                               d["values"] = z;
                               return d;
                             })
      .def_property_readonly("mhe", [](const ExperimentResult& r) { return window_series(r.mhe); })
      .def_property_readonly("sse", [](const ExperimentResult& r) { return window_series(r.sse); })
      .def_property_readonly("baddata", [](const ExperimentResult& r) {
        py::list out;
        for (const BadDataRecord& b : r.baddata) {
          py::dict d;
          d["t"] = b.t;
          d["estimator"] = b.estimator;
          d["channel"] = b.channel;
          d["instant"] = b.instant;
          d["r_norm"] = b.r_norm;
          d["omega"] = b.omega;
          d["action"] = b.action;
          out.append(d);
        }
        return out;
      });

  m.def("run_experiment", &run_experiment, py::arg("config"), py::call_guard<py::gil_scoped_release>());
  m.def("write_outputs", &write_outputs, py::arg("result"), py::arg("config"), py::arg("dir"));
  m.def("format_report", &format_report, py::arg("dir"));
}
