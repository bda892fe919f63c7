#include "mhese/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>

#include "mhese/errors.hpp"

namespace mhese {

namespace {

constexpr const char* kStateNames[kGenStates] = {"delta", "d_omega", "e_d_t", "e_q_t", "p_sv",
                                                 "p_m",   "E_fd",    "R_f",   "V_R"};

NetworkState network_at(const ProblemLayout& lay, const Eigen::VectorXd& X, int k) {
  const int n = lay.nodes();
  return {X.segment(lay.v_col(k, 0), n), X.segment(lay.theta_col(k, 0), n)};
}

GeneratorState generator_at(const ProblemLayout& lay, const Eigen::VectorXd& X, int k,
                            int g) {
  return GeneratorState::from_vector(X.segment<kGenStates>(lay.gen_col(k, g)));
}

// Places a 2 x 2n network Jacobian into the columns of instant k.
void put_network_block(Eigen::MatrixXd& M, int row, const ProblemLayout& lay, int k,
                       const NetworkJacobian& d, double sign) {
  const int n = lay.nodes();
  M.block(row, lay.v_col(k, 0), 2, n) += sign * d.leftCols(n);
  M.block(row, lay.theta_col(k, 0), 2, n) += sign * d.rightCols(n);
}

}  // namespace

GenVector MHEConfig::process_weight_profile(double fast, double slow) {
  GenVector w;
  w << fast, fast, fast, fast, slow, slow, slow, slow, slow;
  return w;
}

void MHEConfig::validate() const {
  if (horizon < 1) throw InvalidParameters("horizon must be at least 1");
  if (!(dt > 0.0)) throw InvalidParameters("estimation step must be positive");
  if (!(arrival_weights.array() > 0.0).all() || !(process_weights.array() > 0.0).all() ||
      !(coupling_weight > 0.0)) {
    throw InvalidParameters("all weights must be strictly positive");
  }
  if (measurement_weight && !(*measurement_weight > 0.0)) {
    throw InvalidParameters("measurement weight must be strictly positive");
  }
  if (!(tol > 0.0)) throw InvalidParameters("tolerance must be positive");
  if (max_iter < 1) throw InvalidParameters("max_iter must be at least 1");
}

ProblemLayout::ProblemLayout(int horizon, int generators, int nodes, int scalar_channels,
                             int zero_nodes)
    : L_(horizon), G_(generators), n_(nodes), m_(scalar_channels), Z_(zero_nodes) {}

ProblemLayout::RowInfo ProblemLayout::describe(int row) const {
  if (row < 0 || row >= residual_dim()) throw OutOfRange("residual row out of range");
  if (row < pmu_offset()) return {Block::Arrival, 0, row / kGenStates, row % kGenStates};
  if (row < process_offset()) {
    const int r = row - pmu_offset();
    return {Block::Pmu, r / m_, r % m_, r % 2};
  }
  if (row < coupling_offset()) {
    const int r = row - process_offset();
    const int kg = r / kGenStates;
    return {Block::Process, kg / G_, kg % G_, r % kGenStates};
  }
  const int r = row - coupling_offset();
  const int kg = r / 2;
  return {Block::Coupling, kg / G_, kg % G_, r % 2};
}

std::string ProblemLayout::row_label(int row, const std::vector<MeasurementSpec>& specs,
                                     const std::vector<Generator>& gens) const {
  const RowInfo info = describe(row);
  const std::string k = "[k=" + std::to_string(info.instant) + "] ";
  auto gen_name = [&](int g) {
    return "G" + std::to_string(g + 1) + "@" + std::to_string(gens.at(g).node + 1);
  };
  switch (info.block) {
    case Block::Arrival:
      return "arrival" + k + gen_name(info.index) + "." + kStateNames[info.component];
    case Block::Pmu:
      return "pmu" + k + scalar_channel_label(specs, info.index);
    case Block::Process:
      return "process" + k + gen_name(info.index) + "." + kStateNames[info.component];
    case Block::Coupling:
      return "coupling" + k + gen_name(info.index) + (info.component == 0 ? ".D" : ".Q");
  }
  return {};
}

double EstimationProblem::cost() const {
  return (w.array() * h.array().square()).sum();
}

KktFactorization::KktFactorization(const Eigen::MatrixXd& H, const Eigen::MatrixXd& C,
                                   const Eigen::VectorXd& w, double damping)
    : nx_(static_cast<int>(H.cols())) {
  const int nc = static_cast<int>(C.rows());
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(nx_ + nc, nx_ + nc);
  K.topLeftCorner(nx_, nx_) = H.transpose() * w.asDiagonal() * H;
  trace_ = K.topLeftCorner(nx_, nx_).trace();
  K.topLeftCorner(nx_, nx_).diagonal().array() += damping;
  if (nc > 0) {
    K.topRightCorner(nx_, nc) = C.transpose();
    K.bottomLeftCorner(nc, nx_) = C;
  }
  // Symmetric equilibration so that the condition estimate reflects rank
  // deficiency rather than the spread of the weights.
  scale_.resize(nx_ + nc);
  for (int i = 0; i < nx_ + nc; ++i) {
    const double m = K.row(i).cwiseAbs().maxCoeff();
    scale_(i) = m > 0.0 ? 1.0 / std::sqrt(m) : 1.0;
  }
  K = scale_.asDiagonal() * K * scale_.asDiagonal();
  lu_.compute(K);
  // Eigen's estimate does not see exact zero pivots; bound it by the pivot
  // spread of U as well.
  const Eigen::VectorXd piv = lu_.matrixLU().diagonal().cwiseAbs();
  const double spread = piv.size() > 0 ? piv.minCoeff() / piv.maxCoeff() : 1.0;
  rcond_ = std::min(lu_.rcond(), spread);
  if (!std::isfinite(rcond_)) rcond_ = 0.0;
  if (rcond_ < kKktRcondFloor) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2e", rcond_);
    throw SingularKkt(std::string("KKT matrix is singular (rcond ") + buf + ")", rcond_);
  }
}

Eigen::VectorXd KktFactorization::solve(const Eigen::VectorXd& rhs) const {
  return scale_.asDiagonal() * lu_.solve(scale_.asDiagonal() * rhs);
}

KKTSolution gauss_newton_step(const Eigen::VectorXd& h, const Eigen::VectorXd& c,
                              const Eigen::MatrixXd& H, const Eigen::MatrixXd& C,
                              const Eigen::VectorXd& w, double damping) {
  const KktFactorization kkt(H, C, w, damping);
  const int nx = static_cast<int>(H.cols());
  const int nc = static_cast<int>(C.rows());
  Eigen::VectorXd rhs(nx + nc);
  rhs.head(nx) = -(H.transpose() * w.cwiseProduct(h));
  rhs.tail(nc) = -c;
  const Eigen::VectorXd sol = kkt.solve(rhs);
  if (!sol.allFinite()) throw SingularKkt("KKT solve produced non-finite values", 0.0);
  return {sol.head(nx), -sol.tail(nc), kkt.rcond(), damping};
}

MovingHorizonEstimator::MovingHorizonEstimator(NetworkModel net, std::vector<Generator> gens,
                                               std::vector<MeasurementSpec> specs,
                                               MHEConfig cfg)
    : net_(std::move(net)), gens_(std::move(gens)), specs_(std::move(specs)), cfg_(cfg) {
  cfg_.validate();
  for (const Generator& g : gens_) {
    g.params.validate();
    net_.check_node(g.node);
  }
  for (const MeasurementSpec& s : specs_) s.validate(net_);
  const int m = 2 * static_cast<int>(specs_.size());
  layout_ = ProblemLayout(cfg_.horizon, static_cast<int>(gens_.size()), net_.size(), m,
                          static_cast<int>(net_.zero_nodes().size()));
  channel_weights_.resize(m);
  for (std::size_t c = 0; c < specs_.size(); ++c) {
    double w = 0.0;
    if (cfg_.measurement_weight) {
      w = *cfg_.measurement_weight;
    } else if (specs_[c].variance > 0.0) {
      w = 1.0 / specs_[c].variance;
    } else {
      throw InvalidParameters("channel " + specs_[c].label() +
                              " has zero variance and no explicit weight");
    }
    channel_weights_(2 * c) = w;
    channel_weights_(2 * c + 1) = w;
  }
}

void MovingHorizonEstimator::set_setpoints(int generator, const GeneratorSetpoints& sp) {
  gens_.at(generator).setpoints = sp;
}

EstimationProblem MovingHorizonEstimator::assemble(std::span<const MeasurementFrame> window,
                                                   const Prior& prior,
                                                   const Eigen::VectorXd& X,
                                                   const ChannelMask& removed) const {
  const ProblemLayout& lay = layout_;
  const int L = lay.horizon();
  const int G = lay.generators();
  const int m = lay.scalar_channels();
  const double s_b = net_.base_power();

  if (static_cast<int>(window.size()) != L) {
    throw DataMismatch("window holds " + std::to_string(window.size()) +
                       " frames, horizon is " + std::to_string(L));
  }
  if (X.size() != lay.state_dim()) throw DataMismatch("decision vector has wrong dimension");
  if (prior.x_bar.size() != kGenStates * G) throw DataMismatch("prior has wrong dimension");
  if (!removed.empty() && static_cast<int>(removed.size()) != L * m) {
    throw DataMismatch("channel mask has wrong length");
  }
  for (int k = 0; k < L; ++k) {
    if (window[k].values.size() != m) {
      throw DataMismatch("frame at t=" + std::to_string(window[k].t) +
                         " does not match the measurement configuration");
    }
    if (k > 0 && std::abs(window[k].t - window[k - 1].t - cfg_.dt) > 1e-6) {
      throw DataMismatch("gap in window time stamps at t=" + std::to_string(window[k].t));
    }
  }

  EstimationProblem p;
  p.layout = lay;
  p.h = Eigen::VectorXd::Zero(lay.residual_dim());
  p.w = Eigen::VectorXd::Zero(lay.residual_dim());
  p.H = Eigen::MatrixXd::Zero(lay.residual_dim(), lay.state_dim());
  p.c = Eigen::VectorXd::Zero(lay.constraint_dim());
  p.C = Eigen::MatrixXd::Zero(lay.constraint_dim(), lay.state_dim());

  std::vector<NetworkState> y(L);
  std::vector<std::vector<GeneratorState>> x(L, std::vector<GeneratorState>(G));
  for (int k = 0; k < L; ++k) {
    y[k] = network_at(lay, X, k);
    for (int g = 0; g < G; ++g) x[k][g] = generator_at(lay, X, k, g);
  }

  // Arrival cost.
  for (int g = 0; g < G; ++g) {
    for (int s = 0; s < kGenStates; ++s) {
      const int row = kGenStates * g + s;
      p.h(row) = X(lay.gen_col(0, g, s)) - prior.x_bar(row);
      p.H(row, lay.gen_col(0, g, s)) = 1.0;
      p.w(row) = cfg_.arrival_weights(s);
    }
  }

  // PMU residuals.
  for (int k = 0; k < L; ++k) {
    for (std::size_t c = 0; c < specs_.size(); ++c) {
      const int ch = 2 * static_cast<int>(c);
      const int row = lay.pmu_row(k, ch);
      const Phasor ph = measure(y[k], net_, specs_[c]);
      p.h(row) = window[k].values(ch) - ph.magnitude;
      p.h(row + 1) = wrap_angle(window[k].values(ch + 1) - ph.phase);
      put_network_block(p.H, row, lay, k, measure_jacobian(y[k], net_, specs_[c]), -1.0);
      for (int a = 0; a < 2; ++a) {
        double w = channel_weights_(ch + a);
        if (!window[k].valid.empty() && !window[k].valid[ch + a]) w = 0.0;
        if (!removed.empty() && removed[k * m + ch + a]) w = 0.0;
        p.w(row + a) = w;
      }
      if (ph.degenerate) p.w(row + 1) = 0.0;
    }
  }

  // Process model residuals.
  for (int k = 0; k + 1 < L; ++k) {
    for (int g = 0; g < G; ++g) {
      const Generator& gen = gens_[g];
      const int i = gen.node;
      const double v = y[k].v(i);
      const double th = y[k].theta(i);
      const int row = lay.process_row(k, g, 0);
      const GeneratorState pred = euler_step(x[k][g], v, th, gen.params, gen.setpoints, cfg_.dt);
      p.h.segment<kGenStates>(row) = x[k + 1][g].as_vector() - pred.as_vector();
      const DerivativeJacobian df =
          sg_derivatives_jacobian(x[k][g], v, th, gen.params, gen.setpoints);
      p.H.block<kGenStates, kGenStates>(row, lay.gen_col(k + 1, g)) = GenMatrix::Identity();
      p.H.block<kGenStates, kGenStates>(row, lay.gen_col(k, g)) =
          -(GenMatrix::Identity() + cfg_.dt * df.d_state);
      p.H.block(row, lay.v_col(k, i), kGenStates, 1) = -cfg_.dt * df.d_vt.col(0);
      p.H.block(row, lay.theta_col(k, i), kGenStates, 1) = -cfg_.dt * df.d_vt.col(1);
      p.w.segment<kGenStates>(row) = cfg_.process_weights;
    }
  }

  // Machine / network current coupling.
  for (int k = 0; k < L; ++k) {
    for (int g = 0; g < G; ++g) {
      const Generator& gen = gens_[g];
      const int i = gen.node;
      const double v = y[k].v(i);
      const double th = y[k].theta(i);
      const int row = lay.coupling_row(k, g, 0);
      const GridCurrent inj = nodal_injection(y[k], net_, i);
      const GridCurrent ig = generator_injection(x[k][g], v, th, gen.params, s_b);
      p.h(row) = inj.i_D - ig.i_D;
      p.h(row + 1) = inj.i_Q - ig.i_Q;
      put_network_block(p.H, row, lay, k, nodal_injection_jacobian(y[k], net_, i), 1.0);
      const InjectionJacobian dg = generator_injection_jacobian(x[k][g], v, th, gen.params, s_b);
      p.H.block<2, kGenStates>(row, lay.gen_col(k, g)) -= dg.d_state;
      p.H.block(row, lay.v_col(k, i), 2, 1) -= dg.d_vt.col(0);
      p.H.block(row, lay.theta_col(k, i), 2, 1) -= dg.d_vt.col(1);
      p.w(row) = cfg_.coupling_weight;
      p.w(row + 1) = cfg_.coupling_weight;
    }
  }

  // Zero-injection constraints.
  const auto& zeros = net_.zero_nodes();
  for (int k = 0; k < L; ++k) {
    for (std::size_t z = 0; z < zeros.size(); ++z) {
      const int row = lay.constraint_row(k, static_cast<int>(z), 0);
      const GridCurrent inj = nodal_injection(y[k], net_, zeros[z]);
      p.c(row) = inj.i_D;
      p.c(row + 1) = inj.i_Q;
      put_network_block(p.C, row, lay, k, nodal_injection_jacobian(y[k], net_, zeros[z]), 1.0);
    }
  }
  return p;
}

Estimate MovingHorizonEstimator::unpack(const Eigen::VectorXd& X,
                                        std::span<const MeasurementFrame> window) const {
  Estimate e;
  e.X = X;
  for (int k = 0; k < layout_.horizon(); ++k) {
    e.times.push_back(k < static_cast<int>(window.size()) ? window[k].t : 0.0);
    e.network.push_back(network_at(layout_, X, k));
    std::vector<GeneratorState> xs;
    for (int g = 0; g < layout_.generators(); ++g) xs.push_back(generator_at(layout_, X, k, g));
    e.generators.push_back(std::move(xs));
  }
  return e;
}

Estimate MovingHorizonEstimator::solve(std::span<const MeasurementFrame> window,
                                       const Prior& prior, const Eigen::VectorXd& X0,
                                       const ChannelMask& removed, bool allow_damping) const {
  Eigen::VectorXd X = X0;
  EstimationProblem prob = assemble(window, prior, X, removed);

  auto merit = [](const EstimationProblem& p, double nu) {
    return 0.5 * p.cost() + nu * p.c.lpNorm<1>();
  };

  double mu = 0.0;
  double nu = 0.0;
  int iterations = 0;
  bool converged = false;
  double last_step = std::numeric_limits<double>::infinity();
  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(prob.c.size());
  std::vector<std::pair<double, double>> merit_steps;

  auto base_damping = [&](const EstimationProblem& p) {
    const double tr = (p.H.transpose() * p.w.asDiagonal() * p.H).trace();
    return std::max(1e-8 * tr / std::max<Eigen::Index>(1, X.size()), 1e-12);
  };

  while (iterations < cfg_.max_iter) {
    ++iterations;
    KKTSolution step;
    try {
      step = gauss_newton_step(prob.h, prob.c, prob.H, prob.C, prob.w, mu);
    } catch (const SingularKkt&) {
      if (!allow_damping) throw;
      mu = mu == 0.0 ? base_damping(prob) : mu * 10.0;
      continue;
    }
    nu = std::max(nu, 2.0 * step.lambda.lpNorm<Eigen::Infinity>() + 1.0);
    const Eigen::VectorXd X_new = X + step.dx;
    EstimationProblem trial = assemble(window, prior, X_new, removed);
    const double step_norm = step.dx.lpNorm<Eigen::Infinity>();
    const double m_old = merit(prob, nu);
    const double m_new = merit(trial, nu);
    const bool small = step_norm <= cfg_.tol;
    if (small || m_new <= m_old * (1.0 + 1e-10) + 1e-14) {
      merit_steps.emplace_back(m_old, m_new);
      X = X_new;
      prob = std::move(trial);
      lambda = step.lambda;
      last_step = step_norm;
      mu = 0.0;
      if (small) {
        converged = true;
        break;
      }
    } else if (allow_damping) {
      mu = mu == 0.0 ? base_damping(prob) : mu * 10.0;
    } else {
      // Plain Gauss-Newton: take the step regardless.
      X = X_new;
      prob = std::move(trial);
      lambda = step.lambda;
      last_step = step_norm;
    }
  }

  Estimate e = unpack(X, window);
  e.lambda = lambda;
  e.converged = converged;
  e.iterations = iterations;
  e.cost = prob.cost();
  e.constraint_violation = prob.c.size() ? prob.c.lpNorm<Eigen::Infinity>() : 0.0;
  e.last_step = last_step;
  e.merit_steps = std::move(merit_steps);
  return e;
}

MovingHorizonEstimator::Shifted MovingHorizonEstimator::slide(
    const Estimate& prev, std::span<const MeasurementFrame> prev_window,
    const MeasurementFrame& next) const {
  const ProblemLayout& lay = layout_;
  const int L = lay.horizon();
  const int d = lay.instant_dim();
  if (static_cast<int>(prev_window.size()) != L || prev.X.size() != lay.state_dim()) {
    throw DataMismatch("slide: previous window does not match the layout");
  }

  Shifted out;
  out.window.assign(prev_window.begin() + 1, prev_window.end());
  out.window.push_back(next);

  out.X0.resize(lay.state_dim());
  if (L > 1) out.X0.head((L - 1) * d) = prev.X.tail((L - 1) * d);

  // Newest instant: Euler prediction of the machines, voltages copied.
  const Eigen::VectorXd last = prev.X.tail(d);
  out.X0.tail(d) = last;
  const NetworkState y = network_at(lay, prev.X, L - 1);
  for (int g = 0; g < lay.generators(); ++g) {
    const Generator& gen = gens_[g];
    const GeneratorState xg = generator_at(lay, prev.X, L - 1, g);
    const GeneratorState pred = euler_step(xg, y.v(gen.node), y.theta(gen.node), gen.params,
                                           gen.setpoints, cfg_.dt);
    out.X0.segment<kGenStates>(lay.gen_col(L - 1, g)) = pred.as_vector();
  }

  // Prior for the new first instant, taken from the previous solution.
  const int first = L > 1 ? 1 : 0;
  const Eigen::VectorXd& src = L > 1 ? prev.X : out.X0;
  out.prior.x_bar.resize(kGenStates * lay.generators());
  for (int g = 0; g < lay.generators(); ++g) {
    out.prior.x_bar.segment<kGenStates>(kGenStates * g) =
        src.segment<kGenStates>(lay.gen_col(first, g));
  }
  return out;
}

Eigen::VectorXd MovingHorizonEstimator::replicate(const std::vector<GeneratorState>& x,
                                                  const NetworkState& y) const {
  const ProblemLayout& lay = layout_;
  if (static_cast<int>(x.size()) != lay.generators() || y.size() != lay.nodes()) {
    throw DataMismatch("replicate: state does not match the layout");
  }
  Eigen::VectorXd X(lay.state_dim());
  for (int k = 0; k < lay.horizon(); ++k) {
    for (int g = 0; g < lay.generators(); ++g) {
      X.segment<kGenStates>(lay.gen_col(k, g)) = x[g].as_vector();
    }
    X.segment(lay.v_col(k, 0), lay.nodes()) = y.v;
    X.segment(lay.theta_col(k, 0), lay.nodes()) = y.theta;
  }
  return X;
}

Prior MovingHorizonEstimator::make_prior(const std::vector<GeneratorState>& x) const {
  if (static_cast<int>(x.size()) != layout_.generators()) {
    throw DataMismatch("prior: machine count mismatch");
  }
  Prior p;
  p.x_bar.resize(kGenStates * layout_.generators());
  for (std::size_t g = 0; g < x.size(); ++g) {
    p.x_bar.segment<kGenStates>(kGenStates * static_cast<int>(g)) = x[g].as_vector();
  }
  return p;
}

NetworkState solve_sse(const MeasurementFrame& frame, const NetworkModel& net,
                       const std::vector<MeasurementSpec>& specs, const MHEConfig& cfg,
                       const std::optional<NetworkState>& initial, Estimate* details) {
  MHEConfig sse_cfg = cfg;
  sse_cfg.horizon = 1;
  const MovingHorizonEstimator est(net, {}, specs, sse_cfg);
  const NetworkState y0 = initial ? *initial : NetworkState::flat(net.size());
  const std::span<const MeasurementFrame> window(&frame, 1);
  try {
    Estimate e = est.solve(window, Prior{Eigen::VectorXd(0)}, est.replicate({}, y0), {},
                           /*allow_damping=*/false);
    NetworkState out = e.network.front();
    if (details) *details = std::move(e);
    return out;
  } catch (const SingularKkt& err) {
    throw Unobservable("static estimation is unobservable with this measurement set (" +
                       std::string(err.what()) + ")");
  }
}

Eigen::VectorXd mse(std::span<const double> est_times, std::span<const NetworkState> estimates,
                    std::span<const double> truth_times, std::span<const NetworkState> truth) {
  if (est_times.size() != estimates.size() || truth_times.size() != truth.size()) {
    throw DataMismatch("mse: time and state series lengths differ");
  }
  if (estimates.empty()) throw DataMismatch("mse: no estimates");
  const int n = estimates.front().size();
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(n);
  std::size_t j = 0;
  for (std::size_t k = 0; k < estimates.size(); ++k) {
    while (j < truth_times.size() && truth_times[j] < est_times[k] - 1e-9) ++j;
    if (j == truth_times.size() || std::abs(truth_times[j] - est_times[k]) > 1e-9) {
      throw DataMismatch("mse: no truth instant at t=" + std::to_string(est_times[k]));
    }
    const NetworkState& e = estimates[k];
    const NetworkState& t = truth[j];
    if (e.size() != n || t.size() != n) throw DataMismatch("mse: node count differs");
    for (int i = 0; i < n; ++i) {
      const double dv = e.v(i) - t.v(i);
      const double dth = wrap_angle(e.theta(i) - t.theta(i));
      acc(i) += dv * dv + dth * dth;
    }
  }
  return acc / (2.0 * static_cast<double>(estimates.size()));
}

}  // namespace mhese
