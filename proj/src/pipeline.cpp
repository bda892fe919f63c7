#include "mhese/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mhese/baddata.hpp"
#include "mhese/errors.hpp"

namespace mhese {

namespace {

constexpr const char* kStateColumns[kGenStates] = {"delta", "d_omega", "e_d_t", "e_q_t", "p_sv",
                                                   "p_m",   "E_fd",    "R_f",   "V_R"};

std::string fmt_time(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", t);
  return buf;
}

std::string fmt_num(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12e", x);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

void write_state_header(std::ostream& os, int n, int G) {
  os << "t";
  for (int i = 0; i < n; ++i) os << ",v" << i + 1;
  for (int i = 0; i < n; ++i) os << ",theta" << i + 1;
  for (int g = 0; g < G; ++g) {
    for (const char* s : kStateColumns) os << ",G" << g + 1 << "_" << s;
  }
  os << "\n";
}

void write_state_row(std::ostream& os, double t, const NetworkState& y,
                     const std::vector<GeneratorState>& x) {
  os << fmt_time(t);
  for (int i = 0; i < y.size(); ++i) os << "," << fmt_num(y.v(i));
  for (int i = 0; i < y.size(); ++i) os << "," << fmt_num(y.theta(i));
  for (const GeneratorState& g : x) {
    const GenVector v = g.as_vector();
    for (int s = 0; s < kGenStates; ++s) os << "," << fmt_num(v(s));
  }
  os << "\n";
}

WindowRecord record_from(const Estimate& e, int removals) {
  WindowRecord r;
  r.t = e.times.back();
  r.network = e.latest_network();
  r.generators = e.latest_generators();
  r.iterations = e.iterations;
  r.converged = e.converged;
  r.cost = e.cost;
  r.constraint_violation = e.constraint_violation;
  r.lnr_removals = removals;
  return r;
}

void log_lnr(std::vector<BadDataRecord>& log, const LnrResult& res, double t,
             const std::string& name, const std::vector<MeasurementSpec>& specs,
             const ProblemLayout& lay) {
  for (const LnrEvent& ev : res.events) {
    log.push_back({t, name, scalar_channel_label(specs, ev.channel), ev.instant, ev.r_norm,
                   ev.omega, "removed"});
  }
  const ResidualDiagnostics& d = res.diagnostics;
  if (res.events.empty()) {
    BadDataRecord rec{t, name, "-", -1, 0.0, 0.0, "pass"};
    if (d.worst >= 0) {
      const ProblemLayout::RowInfo info = lay.describe(d.worst);
      rec.channel = scalar_channel_label(specs, info.index);
      rec.instant = info.instant;
      rec.r_norm = d.worst_value;
      rec.omega = d.omega_diag(d.worst);
    }
    log.push_back(rec);
  }
}

}  // namespace

double mean_iterations(const std::vector<WindowRecord>& recs) {
  if (recs.empty()) return 0.0;
  double s = 0.0;
  for (const WindowRecord& r : recs) s += r.iterations;
  return s / static_cast<double>(recs.size());
}

PreparedSystem prepare(const RunConfig& cfg) {
  const SystemDescription& sys = cfg.system;
  const NetworkModel& base = sys.network;
  const double s_b = base.base_power();
  PreparedSystem ps;
  ps.y0 = power_flow(base, sys.schedule);
  const Eigen::MatrixX2d S = nodal_power(ps.y0, base);

  ps.truth_network = base;
  std::vector<double> load_p(base.size(), 0.0), load_q(base.size(), 0.0);
  for (const LoadSpec& ld : sys.loads) {
    const double v2 = ps.y0.v(ld.node) * ps.y0.v(ld.node);
    ps.truth_network = ps.truth_network.with_shunt_change(ld.node, ld.p / v2, -ld.q / v2);
    load_p[ld.node] += ld.p;
    load_q[ld.node] += ld.q;
  }

  std::vector<int> used(base.size(), 0);
  for (const Generator& g : sys.generators) {
    if (used[g.node]++) {
      throw InvalidParameters("more than one generator at node " + std::to_string(g.node + 1));
    }
    const double P = S(g.node, 0) + load_p[g.node];
    const double Q = S(g.node, 1) + load_q[g.node];
    const double v = ps.y0.v(g.node);
    const double th = ps.y0.theta(g.node);

    Generator truth = g;
    if (cfg.scenario.mismatch) truth.params = cfg.scenario.mismatch->apply(g.params);
    const Equilibrium eq_truth = init_generator(truth.params, v, th, P, Q, s_b);
    truth.setpoints = eq_truth.setpoints;
    ps.truth_generators.push_back(truth);
    ps.x0.push_back(eq_truth.state);

    Generator model = g;
    model.setpoints = eq_truth.setpoints;
    ps.model_generators.push_back(model);
    ps.model_x0.push_back(init_generator(g.params, v, th, P, Q, s_b).state);
  }

  ps.scenario = cfg.scenario;
  for (const LoadStepSpec& ls : cfg.load_steps) {
    const double v2 = ps.y0.v(ls.node) * ps.y0.v(ls.node);
    ps.scenario.disturbances.push_back({ls.time, LoadStep{ls.node, ls.dp / v2, -ls.dq / v2}});
  }
  return ps;
}

ExperimentResult run_experiment(const RunConfig& cfg) {
  const PreparedSystem ps = prepare(cfg);
  ExperimentResult res;
  res.truth = simulate(ps.truth_network, ps.truth_generators, ps.x0, ps.y0, ps.scenario);
  res.frames = synthesize_pmu(res.truth, ps.truth_network, cfg.pmus, ps.scenario.noise_seed);
  if (cfg.bad_data) {
    res.frames = inject_bad_data(std::move(res.frames),
                                 scalar_channel_index(cfg.pmus, cfg.bad_data->channel),
                                 cfg.bad_data->value, cfg.bad_data->t_start);
  }

  const int L = cfg.mhe.horizon;
  const int N = static_cast<int>(res.frames.size());
  if (N < L) throw DataMismatch("scenario yields fewer frames than the horizon");

  MovingHorizonEstimator mhe(ps.truth_network, ps.model_generators, cfg.pmus, cfg.mhe);
  res.state_dim = mhe.layout().state_dim();
  for (int r = 0; r < mhe.layout().residual_dim(); ++r) {
    res.residual_labels.push_back(mhe.layout().row_label(r, cfg.pmus, ps.model_generators));
  }

  if (cfg.estimator != EstimatorChoice::Sse) {
    std::vector<std::pair<double, SetpointStep>> sp_events;
    for (const Disturbance& d : ps.scenario.disturbances) {
      if (const auto* s = std::get_if<SetpointStep>(&d.action)) sp_events.emplace_back(d.time, *s);
    }
    std::size_t next_sp = 0;

    std::vector<MeasurementFrame> window(res.frames.begin(), res.frames.begin() + L);
    Prior prior = mhe.make_prior(ps.model_x0);
    Eigen::VectorXd X0 = mhe.replicate(ps.model_x0, ps.y0);
    for (int j = L - 1; j < N; ++j) {
      while (next_sp < sp_events.size() && sp_events[next_sp].first <= window.back().t + 1e-9) {
        const SetpointStep& s = sp_events[next_sp].second;
        GeneratorSetpoints sp = mhe.generators()[s.generator].setpoints;
        sp.p_ref += s.dp_ref;
        sp.v_ref += s.dv_ref;
        mhe.set_setpoints(s.generator, sp);
        ++next_sp;
      }
      Estimate est;
      int removals = 0;
      if (cfg.lnr) {
        try {
          LnrResult lr = lnr_loop(mhe, window, prior, X0, cfg.lnr_threshold);
          log_lnr(res.baddata, lr, window.back().t, "mhe", cfg.pmus, mhe.layout());
          removals = static_cast<int>(lr.events.size());
          est = std::move(lr.estimate);
        } catch (const Unobservable&) {
          res.baddata.push_back({window.back().t, "mhe", "-", -1, 0.0, 0.0, "unobservable"});
          est = mhe.solve(window, prior, X0);
        }
      } else {
        est = mhe.solve(window, prior, X0);
      }
      if (!est.converged) ++res.unconverged;
      res.mhe.push_back(record_from(est, removals));
      if (j + 1 < N) {
        MovingHorizonEstimator::Shifted sh = mhe.slide(est, window, res.frames[j + 1]);
        window = std::move(sh.window);
        prior = std::move(sh.prior);
        X0 = std::move(sh.X0);
      }
    }
  }

  if (cfg.estimator != EstimatorChoice::Mhe) {
    const NetworkModel sse_net = ps.truth_network.with_node_sets({}, ps.truth_network.zero_nodes());
    MHEConfig sse_cfg = cfg.mhe;
    sse_cfg.horizon = 1;
    const MovingHorizonEstimator sse(sse_net, {}, cfg.pmus, sse_cfg);
    NetworkState prev = ps.y0;
    try {
      for (int j = L - 1; j < N; ++j) {
        const std::span<const MeasurementFrame> one(&res.frames[j], 1);
        Estimate est;
        int removals = 0;
        if (cfg.lnr) {
          LnrResult lr;
          try {
            lr = lnr_loop(sse, one, Prior{Eigen::VectorXd(0)}, sse.replicate({}, prev),
                          cfg.lnr_threshold, /*allow_damping=*/false);
          } catch (const SingularKkt& e) {
            throw Unobservable(std::string("static estimation is unobservable (") + e.what() + ")");
          }
          log_lnr(res.baddata, lr, res.frames[j].t, "sse", cfg.pmus, sse.layout());
          removals = static_cast<int>(lr.events.size());
          est = std::move(lr.estimate);
        } else {
          solve_sse(res.frames[j], sse_net, cfg.pmus, cfg.mhe, prev, &est);
        }
        if (!est.converged) ++res.unconverged;
        prev = est.latest_network();
        res.sse.push_back(record_from(est, removals));
      }
    } catch (const Unobservable& e) {
      res.sse_error = e.what();
      res.sse.clear();
    }
  }

  std::vector<double> truth_t = res.truth.times;
  auto series_mse = [&](const std::vector<WindowRecord>& recs) {
    std::vector<double> t;
    std::vector<NetworkState> y;
    for (const WindowRecord& r : recs) {
      t.push_back(r.t);
      y.push_back(r.network);
    }
    return mse(t, y, truth_t, res.truth.network);
  };
  if (!res.mhe.empty()) res.mse_mhe = series_mse(res.mhe);
  if (!res.sse.empty()) res.mse_sse = series_mse(res.sse);
  return res;
}

void write_outputs(const ExperimentResult& res, const RunConfig& cfg,
                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const int n = cfg.system.network.size();
  const int G = static_cast<int>(cfg.system.generators.size());

  {
    std::ofstream os = open_out(dir / "truth.csv");
    write_state_header(os, n, G);
    for (int k = 0; k < res.truth.size(); ++k) {
      write_state_row(os, res.truth.times[k], res.truth.network[k], res.truth.generators[k]);
    }
  }
  {
    std::ofstream os = open_out(dir / "measurements.csv");
    os << "t";
    for (int c = 0; c < 2 * static_cast<int>(cfg.pmus.size()); ++c) {
      os << "," << scalar_channel_label(cfg.pmus, c);
    }
    os << "\n";
    for (const MeasurementFrame& f : res.frames) {
      os << fmt_time(f.t);
      for (int c = 0; c < f.values.size(); ++c) {
        const bool ok = f.valid.empty() || f.valid[c];
        os << "," << (ok ? fmt_num(f.values(c)) : std::string("nan"));
      }
      os << "\n";
    }
  }
  if (!res.mhe.empty()) {
    std::ofstream os = open_out(dir / "estimates_mhe.csv");
    write_state_header(os, n, G);
    for (const WindowRecord& r : res.mhe) write_state_row(os, r.t, r.network, r.generators);
  }
  if (!res.sse.empty()) {
    std::ofstream os = open_out(dir / "estimates_sse.csv");
    write_state_header(os, n, 0);
    for (const WindowRecord& r : res.sse) write_state_row(os, r.t, r.network, {});
  }
  {
    std::ofstream os = open_out(dir / "mse.csv");
    os << "node,mse_mhe,mse_sse\n";
    for (int i = 0; i < n; ++i) {
      os << i + 1 << "," << (res.mse_mhe ? fmt_num((*res.mse_mhe)(i)) : "") << ","
         << (res.mse_sse ? fmt_num((*res.mse_sse)(i)) : "") << "\n";
    }
  }
  {
    std::ofstream os = open_out(dir / "iterations.csv");
    os << "t,estimator,iterations,converged,cost,constraint_violation,lnr_removals\n";
    auto rows = [&](const std::vector<WindowRecord>& recs, const char* name) {
      for (const WindowRecord& r : recs) {
        os << fmt_time(r.t) << "," << name << "," << r.iterations << "," << (r.converged ? 1 : 0)
           << "," << fmt_num(r.cost) << "," << fmt_num(r.constraint_violation) << ","
           << r.lnr_removals << "\n";
      }
    };
    rows(res.mhe, "mhe");
    rows(res.sse, "sse");
  }
  {
    std::ofstream os = open_out(dir / "baddata_log.csv");
    os << "t,estimator,channel,instant,r_norm,omega,action\n";
    for (const BadDataRecord& b : res.baddata) {
      os << fmt_time(b.t) << "," << b.estimator << "," << b.channel << "," << b.instant << ","
         << fmt_num(b.r_norm) << "," << fmt_num(b.omega) << "," << b.action << "\n";
    }
  }
  {
    std::ofstream os = open_out(dir / "residual_index.csv");
    os << "row,label\n";
    for (std::size_t r = 0; r < res.residual_labels.size(); ++r) {
      os << r << "," << res.residual_labels[r] << "\n";
    }
  }

  nlohmann::ordered_json j;
  j["config"] = cfg.config_path.filename().string();
  j["system"] = cfg.system.name;
  j["seed"] = cfg.scenario.noise_seed;
  j["estimator"] = to_string(cfg.estimator);
  j["horizon"] = cfg.mhe.horizon;
  j["state_dim"] = res.state_dim;
  j["lnr"] = cfg.lnr;
  j["nodes"] = n;
  auto vec = [](const std::optional<Eigen::VectorXd>& v) {
    nlohmann::json a = nlohmann::json::array();
    if (v) {
      for (int i = 0; i < v->size(); ++i) a.push_back((*v)(i));
    }
    return a;
  };
  j["mse_mhe"] = vec(res.mse_mhe);
  j["mse_sse"] = vec(res.mse_sse);
  j["sse_error"] = res.sse_error ? nlohmann::json(*res.sse_error) : nlohmann::json(nullptr);
  j["windows_mhe"] = res.mhe.size();
  j["windows_sse"] = res.sse.size();
  j["mean_iterations_mhe"] = mean_iterations(res.mhe);
  j["mean_iterations_sse"] = mean_iterations(res.sse);
  j["unconverged"] = res.unconverged;
  std::map<std::string, int> removed;
  for (const BadDataRecord& b : res.baddata) {
    if (b.action == "removed") ++removed[b.estimator + ":" + b.channel];
  }
  nlohmann::json rem = nlohmann::json::array();
  for (const auto& [key, count] : removed) {
    const auto colon = key.find(':');
    rem.push_back({{"estimator", key.substr(0, colon)},
                   {"channel", key.substr(colon + 1)},
                   {"count", count}});
  }
  j["removals"] = rem;
  std::ofstream os = open_out(dir / "summary.json");
  os << j.dump(2) << "\n";
}

std::string format_report(const std::filesystem::path& dir) {
  const std::filesystem::path p = dir / "summary.json";
  std::ifstream in(p);
  if (!in) throw Error("missing " + p.string() + " (run the scenario first)");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(p.string() + ": " + e.what());
  }

  std::ostringstream os;
  char buf[160];
  os << "config: " << j.value("config", "?") << "  system: " << j.value("system", "?")
     << "  seed: " << j.value("seed", 0) << "  horizon: " << j.value("horizon", 0)
     << "  dim(X): " << j.value("state_dim", 0) << "\n\n";
  const auto& a = j["mse_mhe"];
  const auto& b = j["mse_sse"];
  const int n = j.value("nodes", 0);
  std::snprintf(buf, sizeof buf, "%-6s %14s %14s %8s\n", "node", "MSE mhe", "MSE sse", "ratio");
  os << buf;
  for (int i = 0; i < n; ++i) {
    const bool ha = i < static_cast<int>(a.size());
    const bool hb = i < static_cast<int>(b.size());
    std::string sa = "-", sb = "-", sr = "-";
    if (ha) {
      std::snprintf(buf, sizeof buf, "%.4e", a[i].get<double>());
      sa = buf;
    }
    if (hb) {
      std::snprintf(buf, sizeof buf, "%.4e", b[i].get<double>());
      sb = buf;
    }
    if (ha && hb && b[i].get<double>() > 0.0) {
      std::snprintf(buf, sizeof buf, "%.3f", a[i].get<double>() / b[i].get<double>());
      sr = buf;
    }
    std::snprintf(buf, sizeof buf, "%-6d %14s %14s %8s\n", i + 1, sa.c_str(), sb.c_str(),
                  sr.c_str());
    os << buf;
  }
  os << "\n";
  if (j.value("windows_mhe", 0) > 0) {
    std::snprintf(buf, sizeof buf, "mean Gauss-Newton iterations (mhe): %.3f over %d windows\n",
                  j.value("mean_iterations_mhe", 0.0), j.value("windows_mhe", 0));
    os << buf;
  }
  if (j.value("windows_sse", 0) > 0) {
    std::snprintf(buf, sizeof buf, "mean Gauss-Newton iterations (sse): %.3f over %d windows\n",
                  j.value("mean_iterations_sse", 0.0), j.value("windows_sse", 0));
    os << buf;
  }
  if (j.contains("sse_error") && !j["sse_error"].is_null()) {
    os << "sse: " << j["sse_error"].get<std::string>() << "\n";
  }
  os << "unconverged windows: " << j.value("unconverged", 0) << "\n";
  os << "removals:";
  if (j["removals"].empty()) os << " none";
  os << "\n";
  for (const auto& r : j["removals"]) {
    os << "  " << r.value("estimator", "?") << " " << r.value("channel", "?") << " x"
       << r.value("count", 0) << "\n";
  }
  return os.str();
}

}  // namespace mhese
