#pragma once

#include <cmath>
#include <functional>
#include <string>

#include <Eigen/Dense>

#include "ctrlflow/core/errors.hpp"

namespace ctrlflow::flow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Time-dependent field over a batch: columns of X are independent states.
using Field = std::function<Matrix(const Matrix& X, double t)>;

enum class Scheme { euler, midpoint, rk4 };

inline const char* to_string(Scheme s) {
  switch (s) {
    case Scheme::euler: return "euler";
    case Scheme::midpoint: return "midpoint";
    case Scheme::rk4: return "rk4";
  }
  return "?";
}

inline Scheme scheme_from_string(const std::string& s) {
  if (s == "euler") return Scheme::euler;
  if (s == "midpoint") return Scheme::midpoint;
  if (s == "rk4") return Scheme::rk4;
  throw ConfigError("unknown integration scheme '" + s + "'");
}

struct Integrator {
  /// Steps per unit of flow time; an interval of length L uses ceil(steps * L).
  int steps = 20;
  Scheme scheme = Scheme::midpoint;
};

inline int step_count(const Integrator& in, double t_from, double t_to) {
  if (in.steps < 1) throw ConfigError("integrator needs at least one step");
  const double len = std::abs(t_to - t_from);
  // Guard against ceil(20 * 0.5000000001) = 11 from rounding noise.
  return static_cast<int>(std::ceil(in.steps * len - 1e-9));
}

inline Matrix rk_step(const Field& v, const Matrix& X, double t, double dt, Scheme scheme) {
  switch (scheme) {
    case Scheme::euler: return X + dt * v(X, t);
    case Scheme::midpoint: {
      const Matrix k1 = v(X, t);
      return X + dt * v(X + 0.5 * dt * k1, t + 0.5 * dt);
    }
    case Scheme::rk4: {
      const Matrix k1 = v(X, t);
      const Matrix k2 = v(X + 0.5 * dt * k1, t + 0.5 * dt);
      const Matrix k3 = v(X + 0.5 * dt * k2, t + 0.5 * dt);
      const Matrix k4 = v(X + dt * k3, t + dt);
      return X + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
  }
  return X;
}

/// Phi^{t_from, t_to}(X). Integrating backwards in time (t_to < t_from) gives
/// the inverse map.
inline Matrix advance(const Field& v, const Matrix& X, double t_from, double t_to, const Integrator& in) {
  if (t_from < 0.0 || t_from > 1.0 || t_to < 0.0 || t_to > 1.0) {
    throw DomainError("flow times must lie in [0, 1]");
  }
  const int n = step_count(in, t_from, t_to);
  if (n == 0) return X;
  const double dt = (t_to - t_from) / n;
  Matrix x = X;
  for (int k = 0; k < n; ++k) {
    x = rk_step(v, x, t_from + k * dt, dt, in.scheme);
    if (!x.allFinite()) throw NumericOverflowError("non-finite state during integration", k);
  }
  return x;
}

}  // namespace ctrlflow::flow
