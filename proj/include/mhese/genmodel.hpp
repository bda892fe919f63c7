#pragma once

// Fourth-order synchronous machine with IEEE DC1A excitation and TGOV1
// turbine-governor, written in the machine dq frame and coupled to the grid
// through the stator algebraic equations.

#include <Eigen/Dense>

namespace mhese {

inline constexpr int kGenStates = 9;

using GenVector = Eigen::Matrix<double, kGenStates, 1>;
using GenMatrix = Eigen::Matrix<double, kGenStates, kGenStates>;

/// Position of each differential state in GenVector.
enum GenIndex : int {
  kDelta = 0,
  kDOmega = 1,
  kEdT = 2,
  kEqT = 3,
  kPsv = 4,
  kPm = 5,
  kEfd = 6,
  kRf = 7,
  kVr = 8,
};

/// Machine, exciter and governor constants. Reactances and powers are on the
/// machine base S_n; time constants in seconds.
struct GeneratorParams {
  double H = 3.0;
  double D = 1.0;
  double x_d = 1.8;
  double x_q = 1.7;
  double x_d_t = 0.3;
  double x_q_t = 0.55;
  double T_d0_t = 8.0;
  double T_q0_t = 0.4;
  double r_s = 0.0;
  double S_n = 1.0;
  double K_E = 1.0;
  double T_E = 0.314;
  double K_F = 0.063;
  double T_F = 0.35;
  double K_A = 20.0;
  double T_A = 0.2;
  double T_1 = 0.5;
  double T_2 = 2.0;
  double T_3 = 6.0;
  double R_droop = 0.05;
  double omega_n = 100.0 * 3.14159265358979323846;

  /// Throws InvalidParameters naming the first violated invariant.
  void validate() const;
};

struct GeneratorSetpoints {
  double p_ref = 0.0;
  double v_ref = 1.0;
};

/// Differential state (delta, d_omega, e'_d, e'_q, p_sv, p_m, E_fd, R_f, V_R).
struct GeneratorState {
  double delta = 0.0;
  double d_omega = 0.0;
  double e_d_t = 0.0;
  double e_q_t = 0.0;
  double p_sv = 0.0;
  double p_m = 0.0;
  double E_fd = 0.0;
  double R_f = 0.0;
  double V_R = 0.0;

  GenVector as_vector() const;
  static GeneratorState from_vector(const GenVector& x);
};

/// Stator current in the machine dq frame, machine base.
struct DqCurrent {
  double i_d = 0.0;
  double i_q = 0.0;
};

/// Current in the common network DQ frame, system base. Also used for nodal
/// and branch currents.
struct GridCurrent {
  double i_D = 0.0;
  double i_Q = 0.0;
};

/// Solves the stator equations
///   [r_s  -x'_q; x'_d  r_s] [i_d; i_q] = [e'_d + v sin(theta - delta); e'_q - v cos(theta - delta)]
/// (generator convention: positive current leaves the machine).
DqCurrent dq_current(const GeneratorState& x, double v, double theta,
                     const GeneratorParams& p);

/// Air-gap power e'_q i_q + e'_d i_d + (x'_q - x'_d) i_d i_q.
double electric_power(const GeneratorState& x, const DqCurrent& c,
                      const GeneratorParams& p);

/// Rotates a machine-frame current into the network frame and rescales it to
/// the system base.
GridCurrent machine_to_network(const DqCurrent& c, double delta, double s_n,
                               double s_b);

/// Current injected by the machine into its terminal node, system base.
GridCurrent generator_injection(const GeneratorState& x, double v, double theta,
                                const GeneratorParams& p, double s_b);

/// Time derivatives of all nine states.
GenVector sg_derivatives(const GeneratorState& x, double v, double theta,
                         const GeneratorParams& p, const GeneratorSetpoints& sp);

/// One forward-Euler step with the terminal voltage held fixed.
GeneratorState euler_step(const GeneratorState& x, double v, double theta,
                          const GeneratorParams& p, const GeneratorSetpoints& sp,
                          double dt);

/// Partial derivatives of sg_derivatives.
struct DerivativeJacobian {
  GenMatrix d_state;                          // d f / d x
  Eigen::Matrix<double, kGenStates, 2> d_vt;  // d f / d (v, theta)
};

DerivativeJacobian sg_derivatives_jacobian(const GeneratorState& x, double v,
                                           double theta,
                                           const GeneratorParams& p,
                                           const GeneratorSetpoints& sp);

/// Partial derivatives of generator_injection; rows are (i_D, i_Q).
struct InjectionJacobian {
  Eigen::Matrix<double, 2, kGenStates> d_state;
  Eigen::Matrix2d d_vt;  // columns (v, theta)
};

InjectionJacobian generator_injection_jacobian(const GeneratorState& x, double v,
                                               double theta,
                                               const GeneratorParams& p,
                                               double s_b);

}  // namespace mhese
