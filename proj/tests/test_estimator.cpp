#include <doctest.h>

#include <cmath>

#include "mhese/errors.hpp"
#include "mhese/estimator.hpp"
#include "mhese/simulator.hpp"
#include "support.hpp"

using namespace mhese;

namespace {

struct Fixture {
  RunConfig cfg;
  PreparedSystem ps;
  MovingHorizonEstimator est;

  explicit Fixture(int tc, int horizon = 3)
      : cfg(with_horizon(testing::testcase(tc), horizon)),
        ps(prepare(cfg)),
        est(ps.truth_network, ps.model_generators, cfg.pmus, cfg.mhe) {}

  static RunConfig with_horizon(RunConfig c, int L) {
    c.mhe.horizon = L;
    return c;
  }

  // Frames measuring a fixed network state, with optional noise.
  std::vector<MeasurementFrame> frames(const NetworkState& y, double noise = 0.0,
                                       std::uint64_t seed = 5) const {
    std::vector<MeasurementFrame> out;
    const Eigen::VectorXd e =
        testing::random_vector(2 * static_cast<int>(cfg.pmus.size()) * cfg.mhe.horizon, seed, noise);
    for (int k = 0; k < cfg.mhe.horizon; ++k) {
      MeasurementFrame f;
      f.t = 1.0 + k * cfg.mhe.dt;
      f.values.resize(2 * static_cast<int>(cfg.pmus.size()));
      f.valid.assign(f.values.size(), 1);
      for (std::size_t c = 0; c < cfg.pmus.size(); ++c) {
        const Phasor ph = measure(y, ps.truth_network, cfg.pmus[c]);
        f.values(2 * c) = ph.magnitude + e(k * f.values.size() + 2 * c);
        f.values(2 * c + 1) = ph.phase + e(k * f.values.size() + 2 * c + 1);
      }
      out.push_back(f);
    }
    return out;
  }
};

}  // namespace

TEST_CASE("layout dimension on the bundled system") {
  Fixture fx(1);
  const ProblemLayout& lay = fx.est.layout();
  CHECK(lay.state_dim() == 84);
  CHECK(lay.constraint_dim() == 2 * 2 * 3);
  CHECK(lay.residual_dim() == 18 + 3 * 4 + 2 * 2 * 9 + 3 * 2 * 2);
}

TEST_CASE("assembled Jacobians match central differences") {
  Fixture fx(2);
  const auto window = fx.frames(fx.ps.y0, 1e-3);
  const Prior prior = fx.est.make_prior(fx.ps.model_x0);
  Eigen::VectorXd X = fx.est.replicate(fx.ps.model_x0, fx.ps.y0);
  X += testing::random_vector(static_cast<int>(X.size()), 11, 1e-2);
  const EstimationProblem p = fx.est.assemble(window, prior, X);

  const auto h = [&](const Eigen::VectorXd& x) { return fx.est.assemble(window, prior, x).h; };
  const auto c = [&](const Eigen::VectorXd& x) { return fx.est.assemble(window, prior, x).c; };
  CHECK(testing::max_rel_err(p.H, testing::fd_jacobian(h, X)) <= 1e-6);
  CHECK(testing::max_rel_err(p.C, testing::fd_jacobian(c, X)) <= 1e-6);
}

namespace {

// Noise-free window generated by the estimator's own discrete model: Euler
// steps for the machines and an exact solve of the network equations at every
// instant.
struct EulerWindow {
  std::vector<std::vector<GeneratorState>> x;
  std::vector<NetworkState> y;
  std::vector<MeasurementFrame> frames;
};

NetworkState solve_network(const NetworkModel& net, const std::vector<Generator>& gens,
                           const std::vector<GeneratorState>& x, NetworkState y) {
  const int n = net.size();
  auto f = [&](const Eigen::VectorXd& z) -> Eigen::VectorXd {
    return algebraic_residual(net, gens, x, NetworkState{z.head(n), z.tail(n)});
  };
  Eigen::VectorXd z(2 * n);
  z << y.v, y.theta;
  for (int it = 0; it < 30; ++it) {
    const Eigen::VectorXd r = f(z);
    if (r.cwiseAbs().maxCoeff() <= 1e-14) break;
    z -= testing::fd_jacobian(f, z, 1e-7).partialPivLu().solve(r);
  }
  return {z.head(n), z.tail(n)};
}

EulerWindow euler_window(const Fixture& fx, int L, double t0 = 1.0) {
  const auto& gens = fx.est.generators();
  EulerWindow w;
  std::vector<GeneratorState> x = fx.ps.model_x0;
  x[0].d_omega += 2e-3;
  x[0].delta += 0.02;
  x[1].e_q_t += 0.01;
  NetworkState y = fx.ps.y0;
  for (int k = 0; k < L; ++k) {
    y = solve_network(fx.ps.truth_network, gens, x, y);
    w.x.push_back(x);
    w.y.push_back(y);
    MeasurementFrame fr;
    fr.t = t0 + k * fx.cfg.mhe.dt;
    fr.values.resize(2 * static_cast<int>(fx.cfg.pmus.size()));
    fr.valid.assign(fr.values.size(), 1);
    for (std::size_t c = 0; c < fx.cfg.pmus.size(); ++c) {
      const Phasor ph = measure(y, fx.ps.truth_network, fx.cfg.pmus[c]);
      fr.values(2 * c) = ph.magnitude;
      fr.values(2 * c + 1) = ph.phase;
    }
    w.frames.push_back(fr);
    for (std::size_t g = 0; g < gens.size(); ++g) {
      const int i = gens[g].node;
      x[g] = euler_step(x[g], y.v(i), y.theta(i), gens[g].params, gens[g].setpoints, fx.cfg.mhe.dt);
    }
  }
  return w;
}

Eigen::VectorXd stack(const MovingHorizonEstimator& est, const EulerWindow& w) {
  const ProblemLayout& lay = est.layout();
  Eigen::VectorXd X(lay.state_dim());
  for (int k = 0; k < lay.horizon(); ++k) {
    X.segment(k * lay.instant_dim(), lay.instant_dim()) =
        est.replicate(w.x[k], w.y[k]).segment(k * lay.instant_dim(), lay.instant_dim());
  }
  return X;
}

}  // namespace

TEST_CASE("gauss_newton_step on a hand-solved 3x3 KKT system") {
  // h = X - y, y = (0, 2), W = I, constraint X1 - X2 = 0.
  const Eigen::Vector2d y(0.0, 2.0);
  const Eigen::Vector2d X = Eigen::Vector2d::Zero();
  const Eigen::MatrixXd H = Eigen::Matrix2d::Identity();
  Eigen::MatrixXd C(1, 2);
  C << 1.0, -1.0;
  const KKTSolution s = gauss_newton_step(X - y, C * X, H, C, Eigen::Vector2d::Ones());
  const Eigen::Vector2d Xs = X + s.dx;
  CHECK(std::abs(Xs(0) - 1.0) <= 1e-14);
  CHECK(std::abs(Xs(1) - 1.0) <= 1e-14);
  // Stationarity H'W h(X*) = C' lambda with h(X*) = (1, -1).
  REQUIRE(s.lambda.size() == 1);
  CHECK(std::abs(s.lambda(0) - 1.0) <= 1e-14);
}

TEST_CASE("gauss_newton_step is exact on linear problems") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int m = 12, nx = 6, nc = 2;
    const Eigen::MatrixXd A = Eigen::Map<const Eigen::MatrixXd>(testing::random_vector(m * nx, seed, 1.0).data(), m, nx);
    const Eigen::VectorXd y = testing::random_vector(m, seed + 1, 1.0);
    const Eigen::VectorXd w = testing::random_vector(m, seed + 2, 0.9).array() + 1.0;
    const Eigen::VectorXd X0 = testing::random_vector(nx, seed + 3, 1.0);

    const KKTSolution s = gauss_newton_step(A * X0 - y, Eigen::VectorXd(0), A, Eigen::MatrixXd(0, nx), w);
    const Eigen::VectorXd X1 = X0 + s.dx;
    // Weighted least squares through QR of W^(1/2) A.
    const Eigen::VectorXd sw = w.cwiseSqrt();
    const Eigen::VectorXd ref = (sw.asDiagonal() * A).colPivHouseholderQr().solve(sw.cwiseProduct(y));
    CHECK((X1 - ref).cwiseAbs().maxCoeff() <= 1e-10);
    const KKTSolution again = gauss_newton_step(A * X1 - y, Eigen::VectorXd(0), A, Eigen::MatrixXd(0, nx), w);
    CHECK(again.dx.cwiseAbs().maxCoeff() <= 1e-12);

    // With linear constraints: the step lands on the feasible minimizer.
    const Eigen::MatrixXd C = Eigen::Map<const Eigen::MatrixXd>(testing::random_vector(nc * nx, seed + 4, 1.0).data(), nc, nx);
    const Eigen::VectorXd d = testing::random_vector(nc, seed + 5, 1.0);
    const KKTSolution sc = gauss_newton_step(A * X0 - y, C * X0 - d, A, C, w);
    const Eigen::VectorXd Xc = X0 + sc.dx;
    CHECK((C * Xc - d).cwiseAbs().maxCoeff() <= 1e-12);
    const KKTSolution sc2 = gauss_newton_step(A * Xc - y, C * Xc - d, A, C, w);
    CHECK(sc2.dx.cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("gauss_newton_step at a stationary point") {
  const Eigen::MatrixXd H = Eigen::Matrix3d::Identity();
  Eigen::MatrixXd C(1, 3);
  C << 1.0, 1.0, 0.0;
  const KKTSolution s = gauss_newton_step(Eigen::Vector3d::Zero(), Eigen::VectorXd::Zero(1), H, C,
                                          Eigen::Vector3d::Ones());
  CHECK(s.dx.cwiseAbs().maxCoeff() == 0.0);
  CHECK(s.lambda.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gauss_newton_step reports a singular KKT matrix") {
  Eigen::MatrixXd H(2, 3);
  H << 1.0, 0.0, 0.0, 0.0, 1.0, 0.0;  // third coordinate unobserved
  CHECK_THROWS_AS(gauss_newton_step(Eigen::Vector2d::Ones(), Eigen::VectorXd(0), H, Eigen::MatrixXd(0, 3),
                                    Eigen::Vector2d::Ones()),
                  SingularKkt);
}

TEST_CASE("noise-free window: residuals vanish at the truth") {
  Fixture fx(2);
  const EulerWindow w = euler_window(fx, 3);
  const Eigen::VectorXd X = stack(fx.est, w);
  const EstimationProblem p = fx.est.assemble(w.frames, fx.est.make_prior(w.x[0]), X);
  CHECK(p.h.cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(p.c.cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("noise-free window is recovered for any positive weights") {
  for (int variant = 0; variant < 3; ++variant) {
    RunConfig cfg = testing::testcase(1);
    if (variant == 1) {
      cfg.mhe.arrival_weights.setConstant(1.0);
      cfg.mhe.coupling_weight = 1e2;
    } else if (variant == 2) {
      cfg.mhe.process_weights.setConstant(10.0);
      cfg.mhe.measurement_weight = 1e3;
    }
    const PreparedSystem ps = prepare(cfg);
    const MovingHorizonEstimator est(ps.truth_network, ps.model_generators, cfg.pmus, cfg.mhe);
    Fixture fx(1);
    const EulerWindow w = euler_window(fx, 3);
    const Eigen::VectorXd truth = stack(est, w);
    const Eigen::VectorXd X0 = truth + testing::random_vector(static_cast<int>(truth.size()), 3, 1e-5);
    const Estimate e = est.solve(w.frames, est.make_prior(w.x[0]), X0);
    CHECK(e.converged);
    CHECK(e.iterations <= 3);
    CHECK((e.X - truth).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("perturbing one coordinate touches only its Jacobian pattern") {
  Fixture fx(2);
  const auto window = fx.frames(fx.ps.y0, 1e-3);
  const Prior prior = fx.est.make_prior(fx.ps.model_x0);
  const Eigen::VectorXd X = fx.est.replicate(fx.ps.model_x0, fx.ps.y0);
  const EstimationProblem p = fx.est.assemble(window, prior, X);
  for (Eigen::Index j = 0; j < X.size(); j += 5) {
    Eigen::VectorXd Xp = X;
    Xp(j) += 1e-4;
    const EstimationProblem q = fx.est.assemble(window, prior, Xp);
    for (Eigen::Index r = 0; r < p.h.size(); ++r) {
      if (p.H(r, j) == 0.0) CHECK(q.h(r) == p.h(r));
    }
    for (Eigen::Index r = 0; r < p.c.size(); ++r) {
      if (p.C(r, j) == 0.0) CHECK(q.c(r) == p.c(r));
    }
  }
}

TEST_CASE("converged solution is a KKT point") {
  Fixture fx(2);
  const auto window = fx.frames(fx.ps.y0, 1e-3, 17);
  const Prior prior = fx.est.make_prior(fx.ps.model_x0);
  const Estimate e = fx.est.solve(window, prior, fx.est.replicate(fx.ps.model_x0, fx.ps.y0));
  REQUIRE(e.converged);
  CHECK(e.iterations <= 5);
  const EstimationProblem p = fx.est.assemble(window, prior, e.X);
  const Eigen::VectorXd grad = p.H.transpose() * p.w.cwiseProduct(p.h) - p.C.transpose() * e.lambda;
  const Eigen::MatrixXd N = p.H.transpose() * p.w.asDiagonal() * p.H;
  const double bound = 10.0 * fx.cfg.mhe.tol * N.cwiseAbs().rowwise().sum().maxCoeff();
  CHECK(grad.cwiseAbs().maxCoeff() <= bound);
  CHECK(p.c.cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("merit does not increase across accepted steps") {
  Fixture fx(1);
  const auto window = fx.frames(fx.ps.y0, 1e-3, 8);
  const Prior prior = fx.est.make_prior(fx.ps.model_x0);
  // Far cold start: flat voltages and a displaced rotor.
  std::vector<GeneratorState> x = fx.ps.model_x0;
  x[0].delta += 0.3;
  x[1].e_q_t -= 0.1;
  const Estimate e = fx.est.solve(window, prior, fx.est.replicate(x, NetworkState::flat(5)));
  CHECK(e.converged);
  REQUIRE_FALSE(e.merit_steps.empty());
  for (const auto& [before, after] : e.merit_steps) CHECK(after <= before * (1.0 + 1e-12) + 1e-12);
}

TEST_CASE("SSE equals the L = 1 estimator without machine models") {
  const RunConfig cfg = testing::testcase(2);
  const PreparedSystem ps = prepare(cfg);
  MHEConfig one = cfg.mhe;
  one.horizon = 1;
  const NetworkModel bare = ps.truth_network.with_node_sets({}, ps.truth_network.zero_nodes());
  const MovingHorizonEstimator est(bare, {}, cfg.pmus, one);

  Fixture fx(2, 1);
  const auto window = fx.frames(ps.y0, 1e-3, 21);
  const NetworkState start = NetworkState::flat(5);
  const Estimate e = est.solve(window, Prior{Eigen::VectorXd(0)}, est.replicate({}, start), {}, false);
  const NetworkState s = solve_sse(window.front(), ps.truth_network, cfg.pmus, cfg.mhe, start);
  CHECK((e.network.front().v - s.v).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((e.network.front().theta - s.theta).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("SSE observability of the bundled measurement sets") {
  for (int tc : {1, 3}) {
    Fixture fx(tc, 1);
    const auto window = fx.frames(fx.ps.y0, 1e-3);
    CHECK_THROWS_AS(solve_sse(window.front(), fx.ps.truth_network, fx.cfg.pmus, fx.cfg.mhe), Unobservable);
  }
  Fixture fx(2, 1);
  const auto window = fx.frames(fx.ps.y0, 1e-3);
  const NetworkState s = solve_sse(window.front(), fx.ps.truth_network, fx.cfg.pmus, fx.cfg.mhe);
  CHECK((s.v - fx.ps.y0.v).cwiseAbs().maxCoeff() <= 1e-2);

  // Every node voltage measured, no noise: exact recovery.
  std::vector<MeasurementSpec> all;
  for (int i = 0; i < 5; ++i) all.push_back(MeasurementSpec::voltage(i));
  MeasurementFrame f;
  f.values.resize(10);
  f.valid.assign(10, 1);
  for (int i = 0; i < 5; ++i) {
    f.values(2 * i) = fx.ps.y0.v(i);
    f.values(2 * i + 1) = fx.ps.y0.theta(i);
  }
  const NetworkModel free_net = fx.ps.truth_network.with_node_sets({}, {});
  const NetworkState exact = solve_sse(f, free_net, all, fx.cfg.mhe);
  CHECK((exact.v - fx.ps.y0.v).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((exact.theta - fx.ps.y0.theta).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("slide shifts the window and predicts the newest instant") {
  Fixture fx(2);
  const EulerWindow w = euler_window(fx, 4);
  const std::vector<MeasurementFrame> first(w.frames.begin(), w.frames.begin() + 3);
  const Estimate prev = fx.est.unpack(stack(fx.est, w), first);
  const auto sh = fx.est.slide(prev, first, w.frames[3]);

  REQUIRE(sh.window.size() == 3);
  for (int k = 0; k < 3; ++k) CHECK(std::abs(sh.window[k].t - (first[0].t + (k + 1) * fx.cfg.mhe.dt)) <= 1e-12);
  for (std::size_t g = 0; g < 2; ++g) {
    CHECK(sh.prior.x_bar.segment<kGenStates>(kGenStates * g) == w.x[1][g].as_vector());
  }
  // The prediction is the exact next Euler state, so machine residuals vanish.
  const ProblemLayout& lay = fx.est.layout();
  for (int g = 0; g < 2; ++g) {
    const Eigen::VectorXd pred = sh.X0.segment<kGenStates>(lay.gen_col(2, g));
    CHECK((pred - w.x[3][g].as_vector()).cwiseAbs().maxCoeff() <= 1e-12);
  }
  CHECK(sh.X0.head(2 * lay.instant_dim()) == prev.X.tail(2 * lay.instant_dim()));
}

TEST_CASE("assemble validates the window") {
  Fixture fx(2);
  auto window = fx.frames(fx.ps.y0);
  const Prior prior = fx.est.make_prior(fx.ps.model_x0);
  const Eigen::VectorXd X = fx.est.replicate(fx.ps.model_x0, fx.ps.y0);
  CHECK_THROWS_AS(fx.est.assemble(std::span(window).first(2), prior, X), DataMismatch);
  auto gap = window;
  gap[2].t += fx.cfg.mhe.dt;
  CHECK_THROWS_AS(fx.est.assemble(gap, prior, X), DataMismatch);
  auto shortv = window;
  shortv[1].values.conservativeResize(3);
  CHECK_THROWS_AS(fx.est.assemble(shortv, prior, X), DataMismatch);
  CHECK_THROWS_AS(fx.est.assemble(window, prior, X.head(10)), DataMismatch);
}

TEST_CASE("warm starts need no more iterations than cold starts") {
  Fixture fx(2);
  const Trajectory tr = simulate(fx.ps.truth_network, fx.ps.truth_generators, fx.ps.x0, fx.ps.y0, fx.ps.scenario);
  const auto frames = synthesize_pmu(tr, fx.ps.truth_network, fx.cfg.pmus, 4);
  const Eigen::VectorXd cold = fx.est.replicate(fx.ps.model_x0, fx.ps.y0);
  std::vector<MeasurementFrame> window(frames.begin(), frames.begin() + 3);
  Prior prior = fx.est.make_prior(fx.ps.model_x0);
  Estimate e = fx.est.solve(window, prior, cold);
  double warm_it = 0.0, cold_it = 0.0;
  int count = 0;
  for (std::size_t j = 3; j < frames.size(); j += 1) {
    const auto sh = fx.est.slide(e, window, frames[j]);
    e = fx.est.solve(sh.window, sh.prior, sh.X0);
    window = sh.window;
    if (j % 10 == 0) {
      warm_it += e.iterations;
      cold_it += fx.est.solve(sh.window, sh.prior, cold).iterations;
      ++count;
    }
  }
  CHECK(warm_it / count <= cold_it / count);
}

TEST_CASE("mse") {
  std::vector<NetworkState> truth(4, NetworkState::flat(3)), est = truth;
  const std::vector<double> t = {0.0, 0.01, 0.02, 0.03};
  CHECK(mse(t, est, t, truth).cwiseAbs().maxCoeff() == 0.0);

  // Offsets that are exact in binary: v 1e-3 -> 2e-3, theta 0 -> 1e-3.
  for (auto& s : truth) s.v(1) = 1e-3;
  for (auto& s : est) {
    s.v(1) = 2e-3;
    s.theta(1) = 1e-3;
  }
  const Eigen::VectorXd m = mse(t, est, t, truth);
  CHECK(m(1) == 1e-6);
  CHECK(m(0) == 0.0);

  // General truth values: equal up to rounding of the offsets.
  std::vector<NetworkState> tr2(4, NetworkState::flat(2)), es2;
  for (int k = 0; k < 4; ++k) {
    tr2[k].v << 1.02 + 0.01 * k, 0.97;
    tr2[k].theta << -0.3 + 0.1 * k, 0.2;
    es2.push_back(tr2[k]);
    es2[k].v.array() += 1e-3;
    es2[k].theta.array() += 1e-3;
  }
  CHECK((mse(t, es2, t, tr2).array() - 1e-6).abs().maxCoeff() <= 1e-18);

  // Phase differences wrap.
  std::vector<NetworkState> a(1, NetworkState::flat(1)), b(1, NetworkState::flat(1));
  a[0].theta(0) = 3.14159;
  b[0].theta(0) = -3.14159;
  const std::vector<double> t1 = {0.0};
  CHECK(mse(t1, a, t1, b)(0) <= 1e-9);

  const std::vector<double> shifted = {0.5, 0.51, 0.52, 0.53};
  CHECK_THROWS_AS(mse(shifted, est, t, truth), DataMismatch);
}
