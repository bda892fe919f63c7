#pragma once

// Largest-normalized-residual (LNR) bad-data detection for the constrained
// estimator.

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <vector>

#include "mhese/estimator.hpp"

namespace mhese {

/// Below this Omega_jj a residual is structurally zero (critical channel).
inline constexpr double kCriticalOmega = 1e-10;

struct ResidualDiagnostics {
  Eigen::VectorXd r;           // residual rows at the solution
  Eigen::VectorXd omega_diag;  // +inf on zero-weight rows
  Eigen::VectorXd r_norm;      // |r| / sqrt(omega); 0 where omega <= kCriticalOmega
  std::vector<std::uint8_t> candidate;  // rows eligible for identification; empty = all
  int worst = -1;              // candidate row with the largest r_norm
  double worst_value = 0.0;
  std::vector<int> removed;    // residual rows removed so far
};

/// diag(W^-1 - H E_ul H') with E_ul the upper-left block of the inverse KKT
/// matrix. Throws SingularKkt.
Eigen::VectorXd residual_covariance(const Eigen::MatrixXd& H, const Eigen::MatrixXd& C,
                                    const Eigen::VectorXd& w);

/// Diagnostics at a solved problem. Only PMU rows are candidates.
ResidualDiagnostics diagnose(const EstimationProblem& p, std::vector<int> removed = {});

/// Builds diagnostics directly from residuals and Omega (all rows candidates).
ResidualDiagnostics make_diagnostics(const Eigen::VectorXd& r, const Eigen::VectorXd& omega_diag,
                                     std::vector<std::uint8_t> candidate = {});

/// 0-based row of the largest normalized residual above `threshold`,
/// skipping critical rows.
std::optional<int> lnr_identify(const ResidualDiagnostics& diag, double threshold);

struct LnrEvent {
  int row = 0;          // residual row
  int instant = 0;      // window instant
  int channel = 0;      // scalar PMU channel
  double r_norm = 0.0;
  double omega = 0.0;
};

struct LnrResult {
  Estimate estimate;
  ChannelMask removed;             // per instant and scalar channel
  std::vector<LnrEvent> events;    // in removal order
  ResidualDiagnostics diagnostics; // at the final estimate
};

/// Solve, test, remove the flagged scalar channel by zeroing its weight at
/// every instant of the window, and repeat until no candidate exceeds
/// `threshold`. Throws Unobservable
/// (listing removed rows) if a removal leaves the KKT system singular.
LnrResult lnr_loop(const MovingHorizonEstimator& est, std::span<const MeasurementFrame> window,
                   const Prior& prior, const Eigen::VectorXd& X0, double threshold = 3.0,
                   bool allow_damping = true);

}  // namespace mhese
