#pragma once

#include <Eigen/Dense>
#include <functional>
#include <random>
#include <string>

#include "mhese/config.hpp"
#include "mhese/pipeline.hpp"

namespace testing {

inline std::string data_path(const std::string& name) {
  return std::string(MHESE_DATA_DIR) + "/" + name;
}

inline mhese::RunConfig testcase(int k) {
  return mhese::load_run_config(data_path("testcase" + std::to_string(k) + ".toml"));
}

/// Central differences of a vector function, one column per coordinate.
inline Eigen::MatrixXd fd_jacobian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h = 1e-6) {
  const Eigen::VectorXd f0 = f(x);
  Eigen::MatrixXd J(f0.size(), x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Eigen::VectorXd xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    J.col(j) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return J;
}

/// Largest entrywise |A - B| / max(1, |B|).
inline double max_rel_err(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  return ((A - B).cwiseAbs().array() / B.cwiseAbs().array().max(1.0)).maxCoeff();
}

inline Eigen::VectorXd random_vector(int n, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = u(rng);
  return v;
}

}  // namespace testing
