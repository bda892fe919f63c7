#include "mhese/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <string>

#include "mhese/errors.hpp"

namespace mhese {

namespace {

using cplx = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;

CMatrix admittance_matrix(const NetworkModel& net) {
  const int n = net.size();
  CMatrix y = CMatrix::Zero(n, n);
  for (const Branch& br : net.branches()) {
    const cplx yb(br.g, br.b);
    y(br.from, br.from) += yb;
    y(br.to, br.to) += yb;
    y(br.from, br.to) -= yb;
    y(br.to, br.from) -= yb;
  }
  for (int i = 0; i < n; ++i) y(i, i) += cplx(net.shunts()[i].g, net.shunts()[i].b);
  return y;
}

CVector phasors(const NetworkState& s) {
  CVector v(s.size());
  for (int i = 0; i < s.size(); ++i) v(i) = std::polar(s.v(i), s.theta(i));
  return v;
}

}  // namespace

Eigen::MatrixX2d nodal_power(const NetworkState& s, const NetworkModel& net) {
  const CVector v = phasors(s);
  const CVector i = admittance_matrix(net) * v;
  Eigen::MatrixX2d pq(s.size(), 2);
  for (int k = 0; k < s.size(); ++k) {
    const cplx sk = v(k) * std::conj(i(k));
    pq(k, 0) = sk.real();
    pq(k, 1) = sk.imag();
  }
  return pq;
}

NetworkState power_flow(const NetworkModel& net, std::span<const BusSchedule> schedule,
                        double tol, int max_iter) {
  const int n = net.size();
  if (static_cast<int>(schedule.size()) != n) {
    throw InvalidParameters("power flow schedule length differs from node count");
  }
  const auto slack_count = std::count_if(schedule.begin(), schedule.end(),
                                         [](const BusSchedule& b) { return b.type == BusType::Slack; });
  if (slack_count != 1) throw InvalidParameters("power flow needs exactly one slack node");

  NetworkState s = NetworkState::flat(n);
  double theta_ref = 0.0;
  for (int i = 0; i < n; ++i) {
    if (schedule[i].type != BusType::PQ) s.v(i) = schedule[i].v;
    if (schedule[i].type == BusType::Slack) theta_ref = schedule[i].theta;
  }
  s.theta.setConstant(theta_ref);

  std::vector<int> ang_idx;  // non-slack nodes
  std::vector<int> mag_idx;  // PQ nodes
  for (int i = 0; i < n; ++i) {
    if (schedule[i].type != BusType::Slack) ang_idx.push_back(i);
    if (schedule[i].type == BusType::PQ) mag_idx.push_back(i);
  }
  const int na = static_cast<int>(ang_idx.size());
  const int nm = static_cast<int>(mag_idx.size());
  if (na + nm == 0) return s;

  const CMatrix ybus = admittance_matrix(net);
  double mismatch = 0.0;
  for (int iter = 0; iter <= max_iter; ++iter) {
    const CVector v = phasors(s);
    const CVector ibus = ybus * v;
    Eigen::VectorXd f(na + nm);
    for (int a = 0; a < na; ++a) {
      const int i = ang_idx[a];
      f(a) = (v(i) * std::conj(ibus(i))).real() - schedule[i].p;
    }
    for (int m = 0; m < nm; ++m) {
      const int i = mag_idx[m];
      f(na + m) = (v(i) * std::conj(ibus(i))).imag() - schedule[i].q;
    }
    mismatch = f.lpNorm<Eigen::Infinity>();
    if (mismatch <= tol) return s;
    if (iter == max_iter) break;

    // dS/dtheta = j diag(V) conj(diag(I) - Y diag(V))
    // dS/dv     = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
    const CVector vnorm = v.array() / s.v.array().cast<cplx>();
    CMatrix ds_dth = -(ybus * v.asDiagonal()).conjugate();
    ds_dth.diagonal() += ibus.conjugate();
    ds_dth = cplx(0.0, 1.0) * v.asDiagonal() * ds_dth;
    CMatrix ds_dv = v.asDiagonal() * (ybus * vnorm.asDiagonal()).conjugate();
    ds_dv.diagonal() += ibus.conjugate().cwiseProduct(vnorm);

    Eigen::MatrixXd jac(na + nm, na + nm);
    for (int r = 0; r < na + nm; ++r) {
      const bool p_row = r < na;
      const int i = p_row ? ang_idx[r] : mag_idx[r - na];
      for (int c = 0; c < na + nm; ++c) {
        const cplx d = c < na ? ds_dth(i, ang_idx[c]) : ds_dv(i, mag_idx[c - na]);
        jac(r, c) = p_row ? d.real() : d.imag();
      }
    }
    const Eigen::VectorXd dx = jac.partialPivLu().solve(-f);
    if (!dx.allFinite()) break;
    for (int a = 0; a < na; ++a) s.theta(ang_idx[a]) += dx(a);
    for (int m = 0; m < nm; ++m) s.v(mag_idx[m]) += dx(na + m);
  }
  throw ConvergenceError("power flow did not converge; final mismatch " +
                             std::to_string(mismatch),
                         mismatch);
}

Equilibrium init_generator(const GeneratorParams& p, double v, double theta,
                           double P, double Q, double s_b) {
  p.validate();
  if (!(s_b > 0.0)) throw InvalidParameters("base power must be positive");
  if (!(v > 0.0)) throw InvalidParameters("terminal voltage must be positive");

  const cplx V = std::polar(v, theta);
  const cplx I = std::conj(cplx(P, Q) / V) * (s_b / p.S_n);
  const cplx E = V + cplx(p.r_s, p.x_q) * I;
  if (std::abs(E) < 1e-9) {
    throw InvalidParameters("init_generator: singular back-solve (|E_q| = 0)");
  }
  const double delta = std::arg(E);
  // Rotation into the machine frame: multiply by exp(-j(delta - pi/2)).
  const cplx to_dq = std::polar(1.0, -(delta - std::numbers::pi / 2.0));
  const cplx idq = I * to_dq;
  const cplx vdq = V * to_dq;
  const double id = idq.real();
  const double iq = idq.imag();

  GeneratorState x;
  x.delta = delta;
  x.d_omega = 0.0;
  x.e_d_t = vdq.real() + p.r_s * id - p.x_q_t * iq;
  x.e_q_t = vdq.imag() + p.r_s * iq + p.x_d_t * id;
  x.E_fd = x.e_q_t + (p.x_d - p.x_d_t) * id;
  x.p_m = electric_power(x, {id, iq}, p);
  x.p_sv = x.p_m;
  x.V_R = p.K_E * x.E_fd;
  x.R_f = (p.K_F / p.T_F) * x.E_fd;

  GeneratorSetpoints sp;
  sp.p_ref = x.p_sv;
  sp.v_ref = v + x.V_R / p.K_A;
  return {x, sp};
}

GeneratorParams Mismatch::apply(GeneratorParams p) const {
  p.x_d_t *= 1.0 + x_d_t;
  p.x_q_t *= 1.0 + x_q_t;
  p.H *= 1.0 + H;
  return p;
}

int Scenario::substeps() const {
  return static_cast<int>(std::lround(1.0 / (reporting_rate * dt_sim)));
}

int Scenario::frame_count() const {
  return static_cast<int>(std::floor(duration * reporting_rate + 1e-9)) + 1;
}

void Scenario::validate() const {
  if (!(duration > 0.0)) throw InvalidParameters("scenario duration must be positive");
  if (!(dt_sim > 0.0)) throw InvalidParameters("dt_sim must be positive");
  if (!(reporting_rate > 0.0)) throw InvalidParameters("reporting rate must be positive");
  const double ratio = 1.0 / (reporting_rate * dt_sim);
  if (std::abs(ratio - std::round(ratio)) > 1e-9 * ratio || std::round(ratio) < 1.0) {
    throw InvalidParameters("reporting interval must be an integer multiple of dt_sim");
  }
  for (const Disturbance& d : disturbances) {
    if (d.time < 0.0 || d.time > duration) {
      throw InvalidParameters("disturbance time outside [0, duration]");
    }
  }
}

Eigen::VectorXd algebraic_residual(const NetworkModel& net,
                                   std::span<const Generator> gens,
                                   std::span<const GeneratorState> x,
                                   const NetworkState& y) {
  const int n = net.size();
  Eigen::VectorXd r(2 * n);
  for (int i = 0; i < n; ++i) {
    const GridCurrent inj = nodal_injection(y, net, i);
    r(2 * i) = inj.i_D;
    r(2 * i + 1) = inj.i_Q;
  }
  for (std::size_t g = 0; g < gens.size(); ++g) {
    const int i = gens[g].node;
    const GridCurrent ig =
        generator_injection(x[g], y.v(i), y.theta(i), gens[g].params, net.base_power());
    r(2 * i) -= ig.i_D;
    r(2 * i + 1) -= ig.i_Q;
  }
  return r;
}

namespace {

// Joint Newton solver for the trapezoidal DAE step. Unknowns are stacked as
// [x_0 .. x_{G-1}, v, theta].
class DaeStepper {
 public:
  DaeStepper(const NetworkModel& net, const std::vector<Generator>& gens, double dt)
      : net_(net), gens_(gens), dt_(dt),
        ng_(static_cast<int>(gens.size())), n_(net.size()),
        dim_(kGenStates * ng_ + 2 * n_) {}

  void set_network(const NetworkModel& net) { net_ = net; }
  std::vector<Generator>& generators() { return gens_; }

  Eigen::VectorXd pack(const std::vector<GeneratorState>& x, const NetworkState& y) const {
    Eigen::VectorXd z(dim_);
    for (int g = 0; g < ng_; ++g) z.segment<kGenStates>(kGenStates * g) = x[g].as_vector();
    z.segment(kGenStates * ng_, n_) = y.v;
    z.segment(kGenStates * ng_ + n_, n_) = y.theta;
    return z;
  }

  void unpack(const Eigen::VectorXd& z, std::vector<GeneratorState>& x,
              NetworkState& y) const {
    x.resize(ng_);
    for (int g = 0; g < ng_; ++g) {
      x[g] = GeneratorState::from_vector(z.segment<kGenStates>(kGenStates * g));
    }
    y.v = z.segment(kGenStates * ng_, n_);
    y.theta = z.segment(kGenStates * ng_ + n_, n_);
  }

  Eigen::VectorXd derivatives(const Eigen::VectorXd& z) const {
    std::vector<GeneratorState> x;
    NetworkState y;
    unpack(z, x, y);
    Eigen::VectorXd f(kGenStates * ng_);
    for (int g = 0; g < ng_; ++g) {
      const int i = gens_[g].node;
      f.segment<kGenStates>(kGenStates * g) =
          sg_derivatives(x[g], y.v(i), y.theta(i), gens_[g].params, gens_[g].setpoints);
    }
    return f;
  }

  // Solves the algebraic equations for the network state with x frozen.
  void solve_algebraic(Eigen::VectorXd& z, int step) const {
    newton(z, nullptr, step);
  }

  // Advances z by one trapezoidal step.
  void step(Eigen::VectorXd& z, int step_index) const {
    const Eigen::VectorXd f_old = derivatives(z);
    const Eigen::VectorXd x_old = z.head(kGenStates * ng_);
    const Carry carry{&x_old, &f_old};
    newton(z, &carry, step_index);
  }

 private:
  struct Carry {
    const Eigen::VectorXd* x_old;
    const Eigen::VectorXd* f_old;
  };

  void newton(Eigen::VectorXd& z, const Carry* carry, int step_index) const {
    const int nd = kGenStates * ng_;
    const int rows = carry ? dim_ : 2 * n_;
    const int col0 = carry ? 0 : nd;
    double norm = 0.0;
    for (int iter = 0; iter < 25; ++iter) {
      Eigen::VectorXd res;
      Eigen::MatrixXd jac;
      residual(z, carry, res, jac);
      norm = res.lpNorm<Eigen::Infinity>();
      if (!std::isfinite(norm)) break;
      if (norm <= 1e-12) return;
      const Eigen::MatrixXd j = jac.block(carry ? 0 : nd, col0, rows, dim_ - col0);
      const Eigen::VectorXd r = res.segment(carry ? 0 : nd, rows);
      const Eigen::VectorXd dz = j.partialPivLu().solve(-r);
      if (!dz.allFinite()) break;
      z.segment(col0, dim_ - col0) += dz;
      if (dz.lpNorm<Eigen::Infinity>() <= 1e-14) return;
    }
    throw ConvergenceError("DAE corrector diverged at step " + std::to_string(step_index),
                           norm);
  }

  // Rows: [differential (nd) ; algebraic (2n)]. The differential block is
  // only meaningful when `carry` is set.
  void residual(const Eigen::VectorXd& z, const Carry* carry, Eigen::VectorXd& res,
                Eigen::MatrixXd& jac) const {
    const int nd = kGenStates * ng_;
    std::vector<GeneratorState> x;
    NetworkState y;
    unpack(z, x, y);
    res = Eigen::VectorXd::Zero(dim_);
    jac = Eigen::MatrixXd::Zero(dim_, dim_);
    const double s_b = net_.base_power();

    for (int i = 0; i < n_; ++i) {
      const GridCurrent inj = nodal_injection(y, net_, i);
      res(nd + 2 * i) = inj.i_D;
      res(nd + 2 * i + 1) = inj.i_Q;
      const NetworkJacobian d = nodal_injection_jacobian(y, net_, i);
      jac.block(nd + 2 * i, nd, 2, 2 * n_) = d;
    }

    for (int g = 0; g < ng_; ++g) {
      const Generator& gen = gens_[g];
      const int i = gen.node;
      const double v = y.v(i);
      const double th = y.theta(i);
      const GridCurrent ig = generator_injection(x[g], v, th, gen.params, s_b);
      res(nd + 2 * i) -= ig.i_D;
      res(nd + 2 * i + 1) -= ig.i_Q;
      const InjectionJacobian dj = generator_injection_jacobian(x[g], v, th, gen.params, s_b);
      jac.block(nd + 2 * i, kGenStates * g, 2, kGenStates) -= dj.d_state;
      jac.block(nd + 2 * i, nd + i, 2, 1) -= dj.d_vt.col(0);
      jac.block(nd + 2 * i, nd + n_ + i, 2, 1) -= dj.d_vt.col(1);

      if (carry) {
        const GenVector f = sg_derivatives(x[g], v, th, gen.params, gen.setpoints);
        const DerivativeJacobian df =
            sg_derivatives_jacobian(x[g], v, th, gen.params, gen.setpoints);
        const int r0 = kGenStates * g;
        res.segment<kGenStates>(r0) =
            x[g].as_vector() - carry->x_old->segment<kGenStates>(r0) -
            0.5 * dt_ * (carry->f_old->segment<kGenStates>(r0) + f);
        jac.block<kGenStates, kGenStates>(r0, r0) =
            GenMatrix::Identity() - 0.5 * dt_ * df.d_state;
        jac.block(r0, nd + i, kGenStates, 1) = -0.5 * dt_ * df.d_vt.col(0);
        jac.block(r0, nd + n_ + i, kGenStates, 1) = -0.5 * dt_ * df.d_vt.col(1);
      }
    }
  }

  NetworkModel net_;
  std::vector<Generator> gens_;
  double dt_;
  int ng_;
  int n_;
  int dim_;
};

}  // namespace

Trajectory simulate(const NetworkModel& net, std::vector<Generator> gens,
                    const std::vector<GeneratorState>& x0, const NetworkState& y0,
                    const Scenario& sc) {
  sc.validate();
  if (x0.size() != gens.size()) {
    throw InvalidParameters("initial state count differs from generator count");
  }
  if (y0.size() != net.size()) {
    throw InvalidParameters("initial network state has wrong dimension");
  }
  for (const Generator& g : gens) {
    g.params.validate();
    net.check_node(g.node);
  }

  const int steps = static_cast<int>(std::lround(sc.duration / sc.dt_sim));
  const int sub = sc.substeps();

  std::vector<std::pair<int, const Disturbance*>> events;
  for (const Disturbance& d : sc.disturbances) {
    events.emplace_back(static_cast<int>(std::lround(d.time / sc.dt_sim)), &d);
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  NetworkModel current = net;
  DaeStepper stepper(current, gens, sc.dt_sim);
  Eigen::VectorXd z = stepper.pack(x0, y0);
  stepper.solve_algebraic(z, 0);

  Trajectory tr;
  std::size_t next_event = 0;
  for (int k = 0; k <= steps; ++k) {
    bool changed = false;
    while (next_event < events.size() && events[next_event].first == k) {
      const Disturbance& d = *events[next_event].second;
      if (const auto* ls = std::get_if<LoadStep>(&d.action)) {
        current = current.with_shunt_change(ls->node, ls->dg, ls->db);
        stepper.set_network(current);
      } else if (const auto* ss = std::get_if<SetpointStep>(&d.action)) {
        if (ss->generator < 0 || ss->generator >= static_cast<int>(gens.size())) {
          throw OutOfRange("setpoint step refers to an unknown generator");
        }
        auto& sp = stepper.generators()[ss->generator].setpoints;
        sp.p_ref += ss->dp_ref;
        sp.v_ref += ss->dv_ref;
      }
      changed = true;
      ++next_event;
    }
    if (changed) stepper.solve_algebraic(z, k);

    if (k % sub == 0) {
      std::vector<GeneratorState> x;
      NetworkState y;
      stepper.unpack(z, x, y);
      tr.times.push_back(static_cast<double>(k / sub) / sc.reporting_rate);
      tr.generators.push_back(std::move(x));
      tr.network.push_back(std::move(y));
    }
    if (k < steps) stepper.step(z, k + 1);
  }
  return tr;
}

std::vector<MeasurementFrame> synthesize_pmu(const Trajectory& tr,
                                             const NetworkModel& net,
                                             const std::vector<MeasurementSpec>& specs,
                                             std::uint64_t seed) {
  for (const MeasurementSpec& s : specs) s.validate(net);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  std::vector<MeasurementFrame> frames;
  frames.reserve(tr.size());
  for (int k = 0; k < tr.size(); ++k) {
    MeasurementFrame f;
    f.t = tr.times[k];
    f.values.resize(2 * static_cast<Eigen::Index>(specs.size()));
    f.valid.assign(2 * specs.size(), 1);
    for (std::size_t c = 0; c < specs.size(); ++c) {
      const Phasor ph = measure(tr.network[k], net, specs[c]);
      const double sigma = std::sqrt(specs[c].variance);
      const double e_mag = unit(rng);
      const double e_ang = unit(rng);
      f.values(2 * c) = ph.magnitude + sigma * e_mag;
      f.values(2 * c + 1) = ph.phase + sigma * e_ang;
      if (ph.degenerate) f.valid[2 * c + 1] = 0;
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

std::vector<MeasurementFrame> inject_bad_data(std::vector<MeasurementFrame> frames,
                                              int channel, double value,
                                              double t_start) {
  for (MeasurementFrame& f : frames) {
    if (channel < 0 || channel >= f.values.size()) {
      throw OutOfRange("bad data channel " + std::to_string(channel) + " out of range");
    }
    if (f.t >= t_start - 1e-9) f.values(channel) = value;
  }
  return frames;
}

}  // namespace mhese
