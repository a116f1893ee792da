#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ctrlflow/control/lti.hpp"
#include "ctrlflow/flow/ode.hpp"
#include "ctrlflow/flow/vector_field.hpp"

namespace ctrlflow::control {

using flow::Field;
using flow::Integrator;
using flow::Scheme;

/// Two-parameter flow Phi^{s,t} of a field under a fixed-step integrator.
struct FlowMap {
  Field field;
  Integrator integrator;

  /// Columns of X are advanced independently.
  Matrix advance(const Matrix& X, double t_from, double t_to) const {
    return flow::advance(field, X, t_from, t_to, integrator);
  }

  Vector advance(const Vector& x, double t_from, double t_to) const {
    return flow::advance(field, Matrix(x), t_from, t_to, integrator).col(0);
  }
};

inline FlowMap make_flow_map(const flow::VectorFieldModel& model, Integrator integrator = {}) {
  return {model.field(), integrator};
}

/// Single Euler step to T: Phi^{t,T}(x) = x + (T - t) v(x, t).
inline Integrator direct_map_integrator() { return {1, Scheme::euler}; }

inline flow::FlowState flow_advance(const FlowMap& map, const flow::FlowState& x, double t_from, double t_to) {
  if (std::abs(x.t - t_from) > 1e-12) throw DomainError("flow state time does not match t_from");
  flow::FlowState out;
  const Vector y = map.advance(x.flatten(), t_from, t_to);
  out.payload = Eigen::Map<const Matrix>(y.data(), x.payload.rows(), x.payload.cols());
  out.t = t_to;
  return out;
}

enum class FdMethod { forward, central };

struct JacobianEstimate {
  Matrix J;
  FdMethod method = FdMethod::central;
  double step = 1e-5;
};

/// D Phi^{t,T}(x) by finite differences; all perturbed copies advance as one
/// batch.
inline JacobianEstimate flow_jacobian(const FlowMap& map, const Vector& x, double t, double T,
                                      double step = 1e-5, FdMethod method = FdMethod::central) {
  if (!(step > 0.0)) throw ConfigError("finite-difference step must be positive");
  const Eigen::Index D = x.size();
  JacobianEstimate out;
  out.method = method;
  out.step = step;
  if (method == FdMethod::central) {
    Matrix P(D, 2 * D);
    for (Eigen::Index j = 0; j < D; ++j) {
      P.col(j) = x;
      P(j, j) += step;
      P.col(D + j) = x;
      P(j, D + j) -= step;
    }
    const Matrix Y = map.advance(P, t, T);
    out.J = (Y.leftCols(D) - Y.rightCols(D)) / (2.0 * step);
  } else {
    Matrix P(D, D + 1);
    for (Eigen::Index j = 0; j < D; ++j) {
      P.col(j) = x;
      P(j, j) += step;
    }
    P.col(D) = x;
    const Matrix Y = map.advance(P, t, T);
    out.J = (Y.leftCols(D).colwise() - Y.col(D)) / step;
  }
  return out;
}

/// Directional derivative D Phi^{t,T}(x) d by central differences.
inline Vector flow_jvp(const FlowMap& map, const Vector& x, const Vector& d, double t, double T,
                       double step = 1e-5) {
  const double n = d.norm();
  if (n == 0.0) return Vector::Zero(x.size());
  const Vector u = d / n;
  Matrix P(x.size(), 2);
  P.col(0) = x + step * u;
  P.col(1) = x - step * u;
  const Matrix Y = map.advance(P, t, T);
  return n * (Y.col(0) - Y.col(1)) / (2.0 * step);
}

/// Point at which the flow Jacobian inside the variation-of-constants integral
/// is evaluated.
enum class Linearization {
  /// Unperturbed path Phi^{t0,s}(x0): first-order formula, exact for linear
  /// fields, O(|b|^2) residual otherwise.
  nominal_path,
  /// Solution of the perturbed equation: the exact nonlinear form.
  perturbed_path,
};

struct VocConfig {
  /// Reference integrator for the perturbed equation and the flow maps.
  Integrator integrator{400, Scheme::rk4};
  /// Gauss-Legendre panels per piece, 4 nodes each.
  int panels = 8;
  double fd_step = 1e-5;
  Linearization linearization = Linearization::nominal_path;
  /// Interior times where b may jump. Each piece is integrated separately with
  /// b frozen at its midpoint value.
  std::vector<double> breakpoints;
};

struct VocResult {
  double residual = 0.0;
  Vector direct;
  Vector formula;
};

/// Compares the solution of x' = v(x, t) + b(t) from x0 at t0 with
/// Phi^{T,t}(Phi^{t0,T}(x0) + int_{t0}^{t} D Phi^{s,T}(x_s) b(s) ds), evaluated
/// at t = T.
inline VocResult variation_of_constants_check(const Field& v, const Vector& x0,
                                              const std::function<Vector(double)>& b, double t0 = 0.0,
                                              double T = 1.0, const VocConfig& cfg = {}) {
  if (cfg.panels < 1) throw ConfigError("need at least one quadrature panel");
  const FlowMap map{v, cfg.integrator};
  std::vector<double> knots{t0};
  for (double bp : cfg.breakpoints) {
    if (bp > t0 && bp < T) knots.push_back(bp);
  }
  knots.push_back(T);

  // Perturbed solution at time s, piece by piece.
  auto solve_perturbed = [&](double s) -> Vector {
    Matrix x = x0;
    for (std::size_t k = 0; k + 1 < knots.size() && knots[k] < s; ++k) {
      const double end = std::min(knots[k + 1], s);
      const Vector bk = b(0.5 * (knots[k] + knots[k + 1]));
      const Field piece = [&](const Matrix& X, double t) {
        Matrix out = v(X, t);
        out.colwise() += bk;
        return out;
      };
      x = flow::advance(piece, x, knots[k], end, cfg.integrator);
    }
    return x.col(0);
  };

  VocResult out;
  out.direct = solve_perturbed(T);

  const auto [gx, gw] = gauss_legendre(4, 0.0, 1.0);
  Vector integral = Vector::Zero(x0.size());
  for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
    const Vector bk = b(0.5 * (knots[k] + knots[k + 1]));
    const double width = (knots[k + 1] - knots[k]) / cfg.panels;
    for (int p = 0; p < cfg.panels; ++p) {
      for (int q = 0; q < 4; ++q) {
        const double s = knots[k] + width * (p + gx(q));
        const Vector xs =
            cfg.linearization == Linearization::nominal_path ? map.advance(x0, t0, s) : solve_perturbed(s);
        integral += width * gw(q) * flow_jvp(map, xs, bk, s, T, cfg.fd_step);
      }
    }
  }
  out.formula = map.advance(x0, t0, T) + integral;  // Phi^{T,T} = Id
  out.residual = (out.direct - out.formula).norm();
  return out;
}

}  // namespace ctrlflow::control
