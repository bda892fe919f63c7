#include "mhese/baddata.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "mhese/errors.hpp"

namespace mhese {

Eigen::VectorXd residual_covariance(const Eigen::MatrixXd& H, const Eigen::MatrixXd& C,
                                    const Eigen::VectorXd& w) {
  if (H.rows() != w.size() || (C.size() > 0 && C.cols() != H.cols())) {
    throw DataMismatch("residual_covariance: dimension mismatch");
  }
  const KktFactorization kkt(H, C, w);
  const Eigen::Index nx = H.cols();
  const Eigen::Index nc = C.rows();
  const Eigen::Index m = H.rows();

  // Columns of E_ul H' from KKT solves against [H_j'; 0].
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(nx + nc, m);
  rhs.topRows(nx) = H.transpose();
  Eigen::MatrixXd sol(nx + nc, m);
  for (Eigen::Index j = 0; j < m; ++j) sol.col(j) = kkt.solve(rhs.col(j));

  Eigen::VectorXd omega(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    if (w(j) <= 0.0) {
      omega(j) = std::numeric_limits<double>::infinity();
      continue;
    }
    omega(j) = 1.0 / w(j) - H.row(j).dot(sol.col(j).head(nx));
  }
  return omega;
}

ResidualDiagnostics make_diagnostics(const Eigen::VectorXd& r, const Eigen::VectorXd& omega_diag,
                                     std::vector<std::uint8_t> candidate) {
  if (r.size() != omega_diag.size() ||
      (!candidate.empty() && static_cast<Eigen::Index>(candidate.size()) != r.size())) {
    throw DataMismatch("diagnostics: dimension mismatch");
  }
  ResidualDiagnostics d;
  d.r = r;
  d.omega_diag = omega_diag;
  d.candidate = std::move(candidate);
  d.r_norm = Eigen::VectorXd::Zero(r.size());
  for (Eigen::Index j = 0; j < r.size(); ++j) {
    const double om = omega_diag(j);
    if (om > kCriticalOmega && std::isfinite(om)) d.r_norm(j) = std::abs(r(j)) / std::sqrt(om);
    const bool eligible = d.candidate.empty() || d.candidate[j];
    if (eligible && d.r_norm(j) > d.worst_value) {
      d.worst_value = d.r_norm(j);
      d.worst = static_cast<int>(j);
    }
  }
  return d;
}

ResidualDiagnostics diagnose(const EstimationProblem& p, std::vector<int> removed) {
  const ProblemLayout& lay = p.layout;
  std::vector<std::uint8_t> candidate(p.h.size(), 0);
  for (int j = lay.pmu_offset(); j < lay.process_offset(); ++j) candidate[j] = 1;
  ResidualDiagnostics d =
      make_diagnostics(p.h, residual_covariance(p.H, p.C, p.w), std::move(candidate));
  d.removed = std::move(removed);
  return d;
}

std::optional<int> lnr_identify(const ResidualDiagnostics& diag, double threshold) {
  if (diag.worst < 0 || !(diag.worst_value > threshold)) return std::nullopt;
  return diag.worst;
}

LnrResult lnr_loop(const MovingHorizonEstimator& est, std::span<const MeasurementFrame> window,
                   const Prior& prior, const Eigen::VectorXd& X0, double threshold,
                   bool allow_damping) {
  const ProblemLayout& lay = est.layout();
  const int m = lay.scalar_channels();
  LnrResult out;
  out.removed.assign(static_cast<std::size_t>(lay.horizon() * m), 0);
  std::vector<int> removed_rows;

  auto unobservable = [&](const std::string& why) {
    std::string list;
    for (int r : removed_rows) list += (list.empty() ? "" : ", ") + std::to_string(r);
    return Unobservable("bad-data removal left the window unobservable (" + why +
                            "); removed rows: " + list,
                        removed_rows);
  };

  Eigen::VectorXd X = X0;
  for (int pass = 0; pass <= m; ++pass) {
    try {
      out.estimate = est.solve(window, prior, X, out.removed, allow_damping);
      out.diagnostics = diagnose(est.assemble(window, prior, out.estimate.X, out.removed),
                                 removed_rows);
    } catch (const SingularKkt& e) {
      if (removed_rows.empty()) throw;
      throw unobservable(e.what());
    }
    const std::optional<int> row = lnr_identify(out.diagnostics, threshold);
    if (!row) return out;
    const ProblemLayout::RowInfo info = lay.describe(*row);
    out.events.push_back({*row, info.instant, info.index, out.diagnostics.r_norm(*row),
                          out.diagnostics.omega_diag(*row)});
    for (int k = 0; k < lay.horizon(); ++k) {
      out.removed[static_cast<std::size_t>(k * m + info.index)] = 1;
      removed_rows.push_back(lay.pmu_row(k, info.index));
    }
    X = out.estimate.X;
  }
  return out;
}

}  // namespace mhese
