#include "mhese/genmodel.hpp"

#include <cmath>
#include <string>

#include "mhese/errors.hpp"

namespace mhese {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw InvalidParameters(std::string("generator parameters: ") + what);
}

double stator_det(const GeneratorParams& p) {
  return p.r_s * p.r_s + p.x_d_t * p.x_q_t;
}

// Stator currents together with their sensitivities to the five quantities
// they depend on: delta, e'_d, e'_q, v, theta.
struct StatorSolution {
  DqCurrent i;
  Eigen::Matrix<double, 2, 5> d;  // rows (i_d, i_q)
};

enum StatorArg { kArgDelta = 0, kArgEd = 1, kArgEq = 2, kArgV = 3, kArgTheta = 4 };

StatorSolution solve_stator(const GeneratorState& x, double v, double theta,
                            const GeneratorParams& p) {
  const double det = stator_det(p);
  if (!(det > 0.0) || !std::isfinite(det)) {
    throw InvalidParameters("generator parameters: stator matrix is singular");
  }
  Eigen::Matrix2d a_inv;
  a_inv << p.r_s, p.x_q_t, -p.x_d_t, p.r_s;
  a_inv /= det;

  const double s = std::sin(theta - x.delta);
  const double c = std::cos(theta - x.delta);
  const Eigen::Vector2d rhs(x.e_d_t + v * s, x.e_q_t - v * c);

  Eigen::Matrix<double, 2, 5> d_rhs;
  d_rhs.col(kArgDelta) << -v * c, -v * s;
  d_rhs.col(kArgEd) << 1.0, 0.0;
  d_rhs.col(kArgEq) << 0.0, 1.0;
  d_rhs.col(kArgV) << s, -c;
  d_rhs.col(kArgTheta) << v * c, v * s;

  const Eigen::Vector2d i = a_inv * rhs;
  return {{i(0), i(1)}, a_inv * d_rhs};
}

Eigen::Matrix2d rotation(double delta) {
  Eigen::Matrix2d r;
  r << std::sin(delta), std::cos(delta), -std::cos(delta), std::sin(delta);
  return r;
}

Eigen::Matrix2d rotation_derivative(double delta) {
  Eigen::Matrix2d r;
  r << std::cos(delta), -std::sin(delta), std::sin(delta), std::cos(delta);
  return r;
}

}  // namespace

void GeneratorParams::validate() const {
  require(H > 0.0, "H must be positive");
  require(T_d0_t > 0.0, "T'_d0 must be positive");
  require(T_q0_t > 0.0, "T'_q0 must be positive");
  require(T_E > 0.0, "T_E must be positive");
  require(T_F > 0.0, "T_F must be positive");
  require(T_A > 0.0, "T_A must be positive");
  require(T_1 > 0.0, "T_1 must be positive");
  require(T_3 > 0.0, "T_3 must be positive");
  require(R_droop > 0.0, "droop must be positive");
  require(S_n > 0.0, "S_n must be positive");
  require(x_d_t > 0.0 && x_d >= x_d_t, "need x_d >= x'_d > 0");
  require(x_q_t > 0.0 && x_q >= x_q_t, "need x_q >= x'_q > 0");
  require(r_s >= 0.0, "r_s must be non-negative");
  require(stator_det(*this) > 0.0, "stator matrix is singular");
  require(omega_n > 0.0, "omega_n must be positive");
}

GenVector GeneratorState::as_vector() const {
  GenVector x;
  x << delta, d_omega, e_d_t, e_q_t, p_sv, p_m, E_fd, R_f, V_R;
  return x;
}

GeneratorState GeneratorState::from_vector(const GenVector& x) {
  return {x(kDelta), x(kDOmega), x(kEdT), x(kEqT), x(kPsv),
          x(kPm),    x(kEfd),    x(kRf),  x(kVr)};
}

DqCurrent dq_current(const GeneratorState& x, double v, double theta,
                     const GeneratorParams& p) {
  return solve_stator(x, v, theta, p).i;
}

double electric_power(const GeneratorState& x, const DqCurrent& c,
                      const GeneratorParams& p) {
  return x.e_q_t * c.i_q + x.e_d_t * c.i_d + (p.x_q_t - p.x_d_t) * c.i_d * c.i_q;
}

GridCurrent machine_to_network(const DqCurrent& c, double delta, double s_n,
                               double s_b) {
  if (!(s_n > 0.0) || !(s_b > 0.0)) {
    throw InvalidParameters("base powers must be positive");
  }
  const double scale = s_n / s_b;
  const double sd = std::sin(delta);
  const double cd = std::cos(delta);
  return {scale * (sd * c.i_d + cd * c.i_q), scale * (-cd * c.i_d + sd * c.i_q)};
}

GridCurrent generator_injection(const GeneratorState& x, double v, double theta,
                                const GeneratorParams& p, double s_b) {
  return machine_to_network(dq_current(x, v, theta, p), x.delta, p.S_n, s_b);
}

GenVector sg_derivatives(const GeneratorState& x, double v, double theta,
                         const GeneratorParams& p, const GeneratorSetpoints& sp) {
  const DqCurrent i = dq_current(x, v, theta, p);
  const double p_e = electric_power(x, i, p);
  const double gov_in = sp.p_ref - x.d_omega / p.R_droop - x.p_sv;

  GenVector f;
  f(kDelta) = p.omega_n * x.d_omega;
  f(kDOmega) = (x.p_m - p_e - p.D * x.d_omega) / (2.0 * p.H);
  f(kEdT) = (-x.e_d_t + (p.x_q - p.x_q_t) * i.i_q) / p.T_q0_t;
  f(kEqT) = (x.E_fd - x.e_q_t - (p.x_d - p.x_d_t) * i.i_d) / p.T_d0_t;
  f(kPsv) = gov_in / p.T_1;
  f(kPm) = ((p.T_2 / p.T_1) * gov_in + x.p_sv - x.p_m) / p.T_3;
  f(kEfd) = (-p.K_E * x.E_fd + x.V_R) / p.T_E;
  f(kRf) = (-x.R_f + (p.K_F / p.T_F) * x.E_fd) / p.T_F;
  f(kVr) = (-x.V_R + p.K_A * x.R_f - (p.K_A * p.K_F / p.T_F) * x.E_fd +
            p.K_A * (sp.v_ref - v)) /
           p.T_A;
  return f;
}

GeneratorState euler_step(const GeneratorState& x, double v, double theta,
                          const GeneratorParams& p, const GeneratorSetpoints& sp,
                          double dt) {
  if (!(dt > 0.0)) throw InvalidParameters("euler_step: dt must be positive");
  return GeneratorState::from_vector(x.as_vector() +
                                     dt * sg_derivatives(x, v, theta, p, sp));
}

DerivativeJacobian sg_derivatives_jacobian(const GeneratorState& x, double v,
                                           double theta,
                                           const GeneratorParams& p,
                                           const GeneratorSetpoints& /*sp*/) {
  const StatorSolution st = solve_stator(x, v, theta, p);
  const double id = st.i.i_d;
  const double iq = st.i.i_q;
  const double kappa = p.x_q_t - p.x_d_t;

  // d p_e / d (delta, e'_d, e'_q, v, theta)
  Eigen::Matrix<double, 1, 5> dpe =
      (x.e_d_t + kappa * iq) * st.d.row(0) + (x.e_q_t + kappa * id) * st.d.row(1);
  dpe(kArgEd) += id;
  dpe(kArgEq) += iq;

  // Maps the five stator arguments onto state columns / (v, theta) columns.
  constexpr int kStateCol[3] = {kDelta, kEdT, kEqT};

  DerivativeJacobian jac;
  jac.d_state.setZero();
  jac.d_vt.setZero();

  auto scatter = [&](int row, const Eigen::Matrix<double, 1, 5>& g, double scale) {
    for (int a = 0; a < 3; ++a) jac.d_state(row, kStateCol[a]) += scale * g(a);
    jac.d_vt(row, 0) += scale * g(kArgV);
    jac.d_vt(row, 1) += scale * g(kArgTheta);
  };

  jac.d_state(kDelta, kDOmega) = p.omega_n;

  const double inv2h = 1.0 / (2.0 * p.H);
  jac.d_state(kDOmega, kPm) = inv2h;
  jac.d_state(kDOmega, kDOmega) = -p.D * inv2h;
  scatter(kDOmega, dpe, -inv2h);

  jac.d_state(kEdT, kEdT) = -1.0 / p.T_q0_t;
  scatter(kEdT, st.d.row(1), (p.x_q - p.x_q_t) / p.T_q0_t);

  jac.d_state(kEqT, kEfd) = 1.0 / p.T_d0_t;
  jac.d_state(kEqT, kEqT) = -1.0 / p.T_d0_t;
  scatter(kEqT, st.d.row(0), -(p.x_d - p.x_d_t) / p.T_d0_t);

  jac.d_state(kPsv, kDOmega) = -1.0 / (p.R_droop * p.T_1);
  jac.d_state(kPsv, kPsv) = -1.0 / p.T_1;

  const double lead = p.T_2 / p.T_1;
  jac.d_state(kPm, kDOmega) = -lead / (p.R_droop * p.T_3);
  jac.d_state(kPm, kPsv) = (1.0 - lead) / p.T_3;
  jac.d_state(kPm, kPm) = -1.0 / p.T_3;

  jac.d_state(kEfd, kEfd) = -p.K_E / p.T_E;
  jac.d_state(kEfd, kVr) = 1.0 / p.T_E;

  jac.d_state(kRf, kRf) = -1.0 / p.T_F;
  jac.d_state(kRf, kEfd) = p.K_F / (p.T_F * p.T_F);

  jac.d_state(kVr, kVr) = -1.0 / p.T_A;
  jac.d_state(kVr, kRf) = p.K_A / p.T_A;
  jac.d_state(kVr, kEfd) = -p.K_A * p.K_F / (p.T_F * p.T_A);
  jac.d_vt(kVr, 0) = -p.K_A / p.T_A;

  return jac;
}

InjectionJacobian generator_injection_jacobian(const GeneratorState& x, double v,
                                               double theta,
                                               const GeneratorParams& p,
                                               double s_b) {
  if (!(s_b > 0.0)) throw InvalidParameters("base powers must be positive");
  const StatorSolution st = solve_stator(x, v, theta, p);
  const double scale = p.S_n / s_b;
  const Eigen::Matrix2d rot = rotation(x.delta);
  const Eigen::Matrix<double, 2, 5> d = scale * rot * st.d;

  InjectionJacobian jac;
  jac.d_state.setZero();
  jac.d_state.col(kDelta) =
      d.col(kArgDelta) +
      scale * rotation_derivative(x.delta) * Eigen::Vector2d(st.i.i_d, st.i.i_q);
  jac.d_state.col(kEdT) = d.col(kArgEd);
  jac.d_state.col(kEqT) = d.col(kArgEq);
  jac.d_vt.col(0) = d.col(kArgV);
  jac.d_vt.col(1) = d.col(kArgTheta);
  return jac;
}

}  // namespace mhese
