#pragma once

// TOML system descriptions and run configurations.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mhese/estimator.hpp"
#include "mhese/network.hpp"
#include "mhese/simulator.hpp"

namespace mhese {

/// Constant-power consumption at a node (system base).
struct LoadSpec {
  int node = 0;
  double p = 0.0;
  double q = 0.0;
};

struct SystemDescription {
  std::string name;
  double frequency = 50.0;
  /// Branches and line-charging shunts only; loads are added by the caller
  /// once voltages are known.
  NetworkModel network;
  std::vector<BusSchedule> schedule;  // net injections including loads
  std::vector<Generator> generators;  // set points filled in at initialization
  std::vector<LoadSpec> loads;
};

enum class EstimatorChoice { Mhe, Sse, Both };

/// Load step expressed as a power change at the pre-disturbance voltage.
struct LoadStepSpec {
  double time = 0.0;
  int node = 0;
  double dp = 0.0;
  double dq = 0.0;
};

struct BadDataConfig {
  std::string channel;  // e.g. "V3.mag"
  double value = 0.0;
  double t_start = 0.0;
};

struct RunConfig {
  std::filesystem::path config_path;
  std::filesystem::path system_path;
  SystemDescription system;
  Scenario scenario;  // set point steps resolved; load steps kept in load_steps
  std::vector<LoadStepSpec> load_steps;
  std::vector<MeasurementSpec> pmus;
  std::optional<BadDataConfig> bad_data;
  MHEConfig mhe;
  EstimatorChoice estimator = EstimatorChoice::Both;
  bool lnr = false;
  double lnr_threshold = 3.0;
  std::filesystem::path output_dir;
};

/// Throws ConfigError with "file:line: field: message" diagnostics.
SystemDescription parse_system(std::string_view text, const std::string& source);
SystemDescription load_system(const std::filesystem::path& path);

/// `system = "..."` inside the file is resolved relative to the file.
RunConfig parse_run_config(std::string_view text, const std::filesystem::path& path);
RunConfig load_run_config(const std::filesystem::path& path);

std::string to_string(EstimatorChoice e);
EstimatorChoice parse_estimator_choice(const std::string& s);

}  // namespace mhese
