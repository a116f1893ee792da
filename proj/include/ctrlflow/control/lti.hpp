#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "ctrlflow/core/errors.hpp"

namespace ctrlflow::control {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kEpsPd = 1e-6;
inline constexpr double kEpsReg = 1e-4;

/// x' = A x + B u on [0, T].
struct LtiSystem {
  Matrix A;
  Matrix B;
  double T = 1.0;

  void validate() const {
    if (A.rows() != A.cols()) throw ConfigError("A must be square");
    if (B.rows() != A.rows()) throw ConfigError("B must have as many rows as A");
    if (!A.allFinite() || !B.allFinite()) throw DomainError("system matrices must be finite");
    if (!(T > 0.0)) throw ConfigError("horizon T must be positive");
  }
};

/// Gauss-Legendre nodes and weights on [a, b] (Golub-Welsch).
inline std::pair<Vector, Vector> gauss_legendre(int n, double a = 0.0, double b = 1.0) {
  if (n < 1) throw ConfigError("quadrature needs at least one node");
  Matrix J = Matrix::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    const double beta = k / std::sqrt(4.0 * k * k - 1.0);
    J(k, k - 1) = J(k - 1, k) = beta;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(J);
  const double half = 0.5 * (b - a);
  Vector x = (es.eigenvalues().array() + 1.0) * half + a;
  Vector w = 2.0 * es.eigenvectors().row(0).transpose().array().square() * half;
  return {x, w};
}

inline Matrix expm(const Matrix& M) {
  Matrix E = M.exp();
  if (!E.allFinite()) throw NumericOverflowError("matrix exponential overflowed");
  return E;
}

/// W_c = int_0^T e^{At} B B^T e^{A^T t} dt by Gauss-Legendre quadrature.
inline Matrix lti_gramian(const LtiSystem& sys, int quad_nodes = 16) {
  sys.validate();
  if (quad_nodes < 2) throw ConfigError("lti_gramian needs at least 2 quadrature nodes");
  const auto [t, w] = gauss_legendre(quad_nodes, 0.0, sys.T);
  Matrix W = Matrix::Zero(sys.A.rows(), sys.A.rows());
  for (int k = 0; k < quad_nodes; ++k) {
    const Matrix EB = expm(sys.A * t(k)) * sys.B;
    W.noalias() += w(k) * EB * EB.transpose();
  }
  return 0.5 * (W + W.transpose());
}

/// Throws UncontrollableError when the smallest eigenvalue is below eps_pd,
/// naming the weakest direction.
inline void require_controllable(const Matrix& W, double eps_pd = kEpsPd) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(W);
  const double lmin = es.eigenvalues()(0);
  if (lmin <= eps_pd) {
    std::ostringstream msg;
    msg.precision(4);
    msg << "Gramian lambda_min = " << lmin << " along direction (" << es.eigenvectors().col(0).transpose() << ")";
    throw UncontrollableError(msg.str(), lmin);
  }
}

/// Least input energy to reach x0 from the origin in time T: x0^T W_c^{-1} x0.
inline double lti_min_energy(const LtiSystem& sys, const Vector& x0, int quad_nodes = 16) {
  if (x0.size() != sys.A.rows()) throw ConfigError("state has wrong dimension");
  const Matrix W = lti_gramian(sys, quad_nodes);
  require_controllable(W);
  return x0.dot(W.ldlt().solve(x0));
}

/// Minimum-energy open-loop input u(t) = B^T e^{A^T (T - t)} W_c^{-1} x_target
/// steering the origin to x_target at time T.
inline std::function<Vector(double)> lti_min_energy_control(const LtiSystem& sys, const Vector& x_target,
                                                            int quad_nodes = 16) {
  const Matrix W = lti_gramian(sys, quad_nodes);
  require_controllable(W);
  const Vector y = W.ldlt().solve(x_target);
  return [A = sys.A, B = sys.B, T = sys.T, y](double t) -> Vector {
    return B.transpose() * expm(A.transpose() * (T - t)) * y;
  };
}

}  // namespace ctrlflow::control
