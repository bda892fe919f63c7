#pragma once

// Ground-truth generation: steady-state initialization, DAE time-domain
// simulation with disturbances, and synthetic PMU streams.

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "mhese/genmodel.hpp"
#include "mhese/network.hpp"

namespace mhese {

enum class BusType { Slack, PV, PQ };

/// Power-flow specification of one node. p and q are net injections
/// (generation minus load) on the system base.
struct BusSchedule {
  BusType type = BusType::PQ;
  double p = 0.0;
  double q = 0.0;
  double v = 1.0;
  double theta = 0.0;
};

/// Newton-Raphson power flow in polar coordinates. Throws ConvergenceError
/// after 50 iterations.
NetworkState power_flow(const NetworkModel& net, std::span<const BusSchedule> schedule,
                        double tol = 1e-10, int max_iter = 50);

/// Complex power S = V conj(I) injected at every node, as (P, Q) columns.
Eigen::MatrixX2d nodal_power(const NetworkState& s, const NetworkModel& net);

struct Equilibrium {
  GeneratorState state;
  GeneratorSetpoints setpoints;
};

/// Steady state delivering (P, Q) (system base) at the terminal phasor
/// v∠theta, with set points chosen so every derivative vanishes.
Equilibrium init_generator(const GeneratorParams& p, double v, double theta,
                           double P, double Q, double s_b);

/// A machine connected to a network node.
struct Generator {
  int node = 0;
  GeneratorParams params;
  GeneratorSetpoints setpoints;
};

struct LoadStep {
  int node = 0;
  double dg = 0.0;
  double db = 0.0;
};

struct SetpointStep {
  int generator = 0;  // index into the generator list
  double dp_ref = 0.0;
  double dv_ref = 0.0;
};

struct Disturbance {
  double time = 0.0;
  std::variant<LoadStep, SetpointStep> action;
};

struct BadDataSpec {
  int channel = 0;  // scalar channel index (2*spec + {0: magnitude, 1: phase})
  double value = 0.0;
  double t_start = 0.0;
};

/// Relative perturbations applied to the truth-model machine constants.
struct Mismatch {
  double x_d_t = 0.05;
  double x_q_t = -0.05;
  double H = 0.05;

  GeneratorParams apply(GeneratorParams p) const;
};

struct Scenario {
  double duration = 6.0;
  double dt_sim = 1e-3;
  double reporting_rate = 100.0;
  std::vector<Disturbance> disturbances;
  std::uint64_t noise_seed = 1;
  std::optional<BadDataSpec> bad_data;
  std::optional<Mismatch> mismatch;

  /// Steps of dt_sim per reporting interval.
  int substeps() const;
  int frame_count() const;
  void validate() const;
};

/// States stored on the reporting grid.
struct Trajectory {
  std::vector<double> times;
  std::vector<std::vector<GeneratorState>> generators;  // [instant][generator]
  std::vector<NetworkState> network;                    // [instant]

  int size() const { return static_cast<int>(times.size()); }
};

/// Integrates the coupled machine/network DAE with the implicit trapezoidal
/// rule, solving differential and algebraic unknowns jointly by Newton.
/// Events at time t take effect from t on (stored samples are right-continuous).
/// `gens` must be at equilibrium together with `x0`/`y0` for a quiet start.
Trajectory simulate(const NetworkModel& net, std::vector<Generator> gens,
                    const std::vector<GeneratorState>& x0, const NetworkState& y0,
                    const Scenario& sc);

/// Residual of the algebraic equations (generator current = network
/// injection at machine nodes, zero injection elsewhere), stacked per node.
Eigen::VectorXd algebraic_residual(const NetworkModel& net,
                                   std::span<const Generator> gens,
                                   std::span<const GeneratorState> x,
                                   const NetworkState& y);

/// Timestamped PMU data: magnitude/phase pairs in spec order.
struct MeasurementFrame {
  double t = 0.0;
  Eigen::VectorXd values;
  std::vector<std::uint8_t> valid;  // per scalar channel; 0 = degenerate phase
};

std::vector<MeasurementFrame> synthesize_pmu(const Trajectory& tr,
                                             const NetworkModel& net,
                                             const std::vector<MeasurementSpec>& specs,
                                             std::uint64_t seed);

/// Overwrites one scalar channel with a constant from t_start on.
std::vector<MeasurementFrame> inject_bad_data(std::vector<MeasurementFrame> frames,
                                              int channel, double value,
                                              double t_start);

}  // namespace mhese
