#pragma once

// Moving-horizon estimation of generator states and nodal voltages.
//
// Each window of L consecutive PMU frames yields the equality-constrained
// weighted least-squares problem
//
//   min_X  h(X)' W h(X)   s.t.  c(X) = 0
//
// with h stacking, in this order,
//   1. arrival residuals   x_0 - x_bar                        (9 per machine)
//   2. PMU residuals       y_k - h_pmu(v_k, theta_k)           (2 per channel, per instant)
//   3. process residuals   x_{k+1} - euler_step(x_k, v_k, theta_k)   (9 per machine, k < L-1)
//   4. coupling residuals  g_net,i(v_k, theta_k) - g_gen(x_k, v_i, theta_i)  (2 per machine, per instant)
// and c stacking the zero-injection currents (2 per zero node, per instant).
// Phase residuals are wrapped to (-pi, pi]. All weights are inverse-variance
// like: larger means more trusted.
//
// X groups variables by instant: [x_{k,0} .. x_{k,G-1}, v_k, theta_k] for
// k = 0..L-1, so dim(X) = L (9 G + 2 n).

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mhese/genmodel.hpp"
#include "mhese/network.hpp"
#include "mhese/simulator.hpp"

namespace mhese {

struct MHEConfig {
  int horizon = 3;
  double dt = 0.01;
  GenVector arrival_weights = GenVector::Constant(1e2);
  GenVector process_weights = process_weight_profile(1e6, 1e4);
  double coupling_weight = 1e4;
  /// PMU weight for every scalar channel; unset means 1 / variance.
  std::optional<double> measurement_weight;
  int max_iter = 20;
  double tol = 1e-8;

  /// Machine states (delta, d_omega, e'_d, e'_q) get `fast`, governor and
  /// exciter states get `slow`.
  static GenVector process_weight_profile(double fast, double slow);
  void validate() const;
};

struct Prior {
  Eigen::VectorXd x_bar;  // 9 G entries, machines in model order
};

/// Index bookkeeping for X, h and c.
class ProblemLayout {
 public:
  enum class Block { Arrival, Pmu, Process, Coupling };

  struct RowInfo {
    Block block;
    int instant;    // window instant (first instant for process rows)
    int index;      // machine index, or scalar PMU channel
    int component;  // state index, or 0/1 for D/Q
  };

  ProblemLayout() = default;
  ProblemLayout(int horizon, int generators, int nodes, int scalar_channels,
                int zero_nodes);

  int horizon() const { return L_; }
  int generators() const { return G_; }
  int nodes() const { return n_; }
  int scalar_channels() const { return m_; }

  int instant_dim() const { return kGenStates * G_ + 2 * n_; }
  int state_dim() const { return L_ * instant_dim(); }
  int gen_col(int k, int g, int s = 0) const {
    return k * instant_dim() + kGenStates * g + s;
  }
  int v_col(int k, int i) const { return k * instant_dim() + kGenStates * G_ + i; }
  int theta_col(int k, int i) const { return v_col(k, i) + n_; }

  int arrival_rows() const { return kGenStates * G_; }
  int pmu_offset() const { return arrival_rows(); }
  int pmu_row(int k, int channel) const { return pmu_offset() + k * m_ + channel; }
  int process_offset() const { return pmu_offset() + L_ * m_; }
  int process_row(int k, int g, int s) const {
    return process_offset() + (k * G_ + g) * kGenStates + s;
  }
  int coupling_offset() const {
    return process_offset() + (L_ - 1) * G_ * kGenStates;
  }
  int coupling_row(int k, int g, int axis) const {
    return coupling_offset() + (k * G_ + g) * 2 + axis;
  }
  int residual_dim() const { return coupling_offset() + L_ * G_ * 2; }
  int constraint_row(int k, int z, int axis) const { return (k * Z_ + z) * 2 + axis; }
  int constraint_dim() const { return L_ * Z_ * 2; }

  RowInfo describe(int row) const;
  /// Human-readable row name, e.g. "pmu[k=2] V3.mag" or "process[k=0] G1.delta".
  std::string row_label(int row, const std::vector<MeasurementSpec>& specs,
                        const std::vector<Generator>& gens) const;

 private:
  int L_ = 0;
  int G_ = 0;
  int n_ = 0;
  int m_ = 0;
  int Z_ = 0;
};

/// Residuals, constraints, their Jacobians and weights at one iterate.
struct EstimationProblem {
  ProblemLayout layout;
  Eigen::VectorXd h;
  Eigen::VectorXd c;
  Eigen::MatrixXd H;  // dh/dX
  Eigen::MatrixXd C;  // dc/dX
  Eigen::VectorXd w;  // diagonal of W

  double cost() const;
};

/// Equilibrated LU factorization of the Gauss-Newton KKT matrix
///   [H'WH + mu I   C'; C   0].
/// Throws SingularKkt when the reciprocal condition estimate is below
/// kKktRcondFloor.
class KktFactorization {
 public:
  KktFactorization(const Eigen::MatrixXd& H, const Eigen::MatrixXd& C,
                   const Eigen::VectorXd& w, double damping = 0.0);

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const;
  double rcond() const { return rcond_; }
  int state_dim() const { return nx_; }
  /// Trace of H'WH, used to size Levenberg damping.
  double normal_trace() const { return trace_; }

 private:
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
  Eigen::VectorXd scale_;
  double rcond_ = 0.0;
  double trace_ = 0.0;
  int nx_ = 0;
};

inline constexpr double kKktRcondFloor = 1e-13;

struct KKTSolution {
  Eigen::VectorXd dx;
  Eigen::VectorXd lambda;
  double rcond = 0.0;
  double damping = 0.0;
};

/// Solves [H'WH + mu I, C'; C, 0] [dx; -lambda] = [-H'W h; -c].
///
/// H is the Jacobian of the residual h itself, so dx is a descent step for
/// h'Wh. Written with the data-minus-model Jacobian (-H) this is the
/// textbook system [H'WH, C'; C, 0][dx; -lambda] = [H'W h; -c].
KKTSolution gauss_newton_step(const Eigen::VectorXd& h, const Eigen::VectorXd& c,
                              const Eigen::MatrixXd& H, const Eigen::MatrixXd& C,
                              const Eigen::VectorXd& w, double damping = 0.0);

struct Estimate {
  std::vector<double> times;
  std::vector<std::vector<GeneratorState>> generators;  // [instant][machine]
  std::vector<NetworkState> network;                    // [instant]
  Eigen::VectorXd X;
  Eigen::VectorXd lambda;
  bool converged = false;
  int iterations = 0;
  double cost = 0.0;
  double constraint_violation = 0.0;
  double last_step = 0.0;
  /// Merit (0.5 h'Wh + nu |c|_1) before and after every accepted step,
  /// evaluated with the same penalty nu.
  std::vector<std::pair<double, double>> merit_steps;

  const NetworkState& latest_network() const { return network.back(); }
  const std::vector<GeneratorState>& latest_generators() const {
    return generators.back();
  }
};

/// Per-scalar PMU channel removal flags for one window, indexed like the PMU
/// block of h (instant * channels + channel). Empty means nothing removed.
using ChannelMask = std::vector<std::uint8_t>;

class MovingHorizonEstimator {
 public:
  /// `gens` lists the machines whose models are known; their nodes receive
  /// coupling equations. Every zero node of `net` is constrained. All other
  /// node equations are omitted.
  MovingHorizonEstimator(NetworkModel net, std::vector<Generator> gens,
                         std::vector<MeasurementSpec> specs, MHEConfig cfg);

  const ProblemLayout& layout() const { return layout_; }
  const MHEConfig& config() const { return cfg_; }
  const NetworkModel& network() const { return net_; }
  const std::vector<Generator>& generators() const { return gens_; }
  const std::vector<MeasurementSpec>& specs() const { return specs_; }

  /// Replaces a machine's set points (known operator actions).
  void set_setpoints(int generator, const GeneratorSetpoints& sp);

  EstimationProblem assemble(std::span<const MeasurementFrame> window,
                             const Prior& prior, const Eigen::VectorXd& X,
                             const ChannelMask& removed = {}) const;

  /// Constrained Gauss-Newton from X0. Singular KKT systems are retried with
  /// Levenberg damping when `allow_damping`; otherwise SingularKkt propagates.
  Estimate solve(std::span<const MeasurementFrame> window, const Prior& prior,
                 const Eigen::VectorXd& X0, const ChannelMask& removed = {},
                 bool allow_damping = true) const;

  struct Shifted {
    std::vector<MeasurementFrame> window;
    Prior prior;
    Eigen::VectorXd X0;
  };

  /// Drops the oldest instant and appends `next`. The prior becomes the
  /// previous estimate at the new first instant; X0 is the shifted estimate
  /// with the newest instant predicted by one Euler step.
  Shifted slide(const Estimate& prev, std::span<const MeasurementFrame> prev_window,
                const MeasurementFrame& next) const;

  /// X with every instant equal to (x, y).
  Eigen::VectorXd replicate(const std::vector<GeneratorState>& x,
                            const NetworkState& y) const;
  Prior make_prior(const std::vector<GeneratorState>& x) const;

  Estimate unpack(const Eigen::VectorXd& X,
                  std::span<const MeasurementFrame> window) const;

 private:
  NetworkModel net_;
  std::vector<Generator> gens_;
  std::vector<MeasurementSpec> specs_;
  MHEConfig cfg_;
  ProblemLayout layout_;
  Eigen::VectorXd channel_weights_;
};

/// Static estimate from one frame: the L = 1 problem with no machine models.
/// Throws Unobservable if the frame and zero-injection constraints do not
/// determine the network state.
NetworkState solve_sse(const MeasurementFrame& frame, const NetworkModel& net,
                       const std::vector<MeasurementSpec>& specs,
                       const MHEConfig& cfg,
                       const std::optional<NetworkState>& initial = std::nullopt,
                       Estimate* details = nullptr);

/// Per-node (1/2K) sum_k [(v_hat - v)^2 + wrap(theta_hat - theta)^2].
/// Throws DataMismatch when the time stamps differ.
Eigen::VectorXd mse(std::span<const double> est_times,
                    std::span<const NetworkState> estimates,
                    std::span<const double> truth_times,
                    std::span<const NetworkState> truth);

}  // namespace mhese
