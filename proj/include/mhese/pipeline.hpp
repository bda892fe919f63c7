#pragma once

// End-to-end experiment: initialize, simulate, synthesize PMU data, estimate,
// and write the result files.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mhese/config.hpp"

namespace mhese {

/// Truth model and the estimator's nominal view of it after initialization.
struct PreparedSystem {
  NetworkModel truth_network;             // with load shunts at the initial voltages
  std::vector<Generator> truth_generators;  // mismatched constants, equilibrium set points
  std::vector<GeneratorState> x0;         // truth equilibrium
  NetworkState y0;                        // power-flow solution
  std::vector<Generator> model_generators;  // nominal constants, truth set points
  std::vector<GeneratorState> model_x0;     // nominal-model equilibrium (cold start)
  Scenario scenario;  // load steps converted to shunt steps at the initial voltage
};

PreparedSystem prepare(const RunConfig& cfg);

struct WindowRecord {
  double t = 0.0;
  NetworkState network;
  std::vector<GeneratorState> generators;  // empty for SSE
  int iterations = 0;
  bool converged = false;
  double cost = 0.0;
  double constraint_violation = 0.0;
  int lnr_removals = 0;
};

struct BadDataRecord {
  double t = 0.0;
  std::string estimator;
  std::string channel;  // "-" when no candidate
  int instant = -1;
  double r_norm = 0.0;
  double omega = 0.0;
  std::string action;   // removed | pass | unobservable
};

struct ExperimentResult {
  Trajectory truth;
  std::vector<MeasurementFrame> frames;
  std::vector<WindowRecord> mhe;
  std::vector<WindowRecord> sse;
  std::optional<std::string> sse_error;
  std::vector<BadDataRecord> baddata;
  std::optional<Eigen::VectorXd> mse_mhe;
  std::optional<Eigen::VectorXd> mse_sse;
  int state_dim = 0;
  int unconverged = 0;
  std::vector<std::string> residual_labels;  // MHE row order
};

/// Runs every requested estimator over the whole scenario. SSE
/// unobservability is recorded in `sse_error` rather than thrown.
ExperimentResult run_experiment(const RunConfig& cfg);

/// Writes truth.csv, measurements.csv, estimates_*.csv, mse.csv,
/// iterations.csv, baddata_log.csv, residual_index.csv and summary.json.
void write_outputs(const ExperimentResult& res, const RunConfig& cfg,
                   const std::filesystem::path& dir);

/// Table read back from summary.json.
std::string format_report(const std::filesystem::path& dir);

double mean_iterations(const std::vector<WindowRecord>& recs);

}  // namespace mhese
