#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Dense>

#include "ctrlflow/core/errors.hpp"
#include "ctrlflow/core/rng.hpp"

namespace ctrlflow::env {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Dynamics { point_mass_2d, pendulum };

inline const char* to_string(Dynamics d) {
  return d == Dynamics::point_mass_2d ? "point-mass-2d" : "pendulum";
}

inline Dynamics dynamics_from_string(const std::string& s) {
  if (s == "point-mass-2d") return Dynamics::point_mass_2d;
  if (s == "pendulum") return Dynamics::pendulum;
  throw ConfigError("unknown environment '" + s + "'");
}

/// Static description of a toy control task.
struct EnvSpec {
  Dynamics dynamics = Dynamics::point_mass_2d;
  int d_s = 4;
  int d_a = 2;
  Vector action_low;
  Vector action_high;
  int horizon = 50;
  double gamma = 0.99;
  double dt = 0.05;
  /// Point-mass target position.
  Eigen::Vector2d goal{1.0, 0.0};
  /// Gaussian process noise added to the next state; zero keeps step
  /// deterministic.
  double noise_std = 0.0;
  std::string reward_description;

  void validate() const {
    if (horizon < 1) throw ConfigError("horizon must be >= 1");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0, 1)");
    if (!(dt > 0.0)) throw ConfigError("dt must be positive");
    if (action_low.size() != d_a || action_high.size() != d_a) {
      throw ConfigError("action box has wrong dimension");
    }
    if (!action_low.allFinite() || !action_high.allFinite() ||
        (action_high.array() < action_low.array()).any()) {
      throw ConfigError("action box must be finite and ordered");
    }
    if (noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
  }
};

/// Double integrator in the plane: state (px, py, vx, vy), action is a force
/// in [-1, 1]^2 on a unit mass.
inline EnvSpec point_mass_2d(double gamma = 0.99) {
  EnvSpec s;
  s.dynamics = Dynamics::point_mass_2d;
  s.d_s = 4;
  s.d_a = 2;
  s.action_low = Vector::Constant(2, -1.0);
  s.action_high = Vector::Constant(2, 1.0);
  s.horizon = 50;
  s.gamma = gamma;
  s.dt = 0.05;
  s.reward_description = "-|p' - goal|";
  return s;
}

/// Torque-limited pendulum, theta = 0 upright. Observation
/// (cos theta, sin theta, theta_dot), torque in [-2, 2].
inline EnvSpec pendulum(double gamma = 0.99) {
  EnvSpec s;
  s.dynamics = Dynamics::pendulum;
  s.d_s = 3;
  s.d_a = 1;
  s.action_low = Vector::Constant(1, -2.0);
  s.action_high = Vector::Constant(1, 2.0);
  s.horizon = 100;
  s.gamma = gamma;
  s.dt = 0.05;
  s.reward_description = "-(theta^2 + 0.1 theta_dot^2 + 0.001 u^2)";
  return s;
}

inline EnvSpec make_env(const std::string& name, double gamma = 0.99) {
  return dynamics_from_string(name) == Dynamics::pendulum ? pendulum(gamma) : point_mass_2d(gamma);
}

namespace pendulum_const {
inline constexpr double gravity = 10.0;
inline constexpr double mass = 1.0;
inline constexpr double length = 1.0;
inline constexpr double max_speed = 8.0;
}  // namespace pendulum_const

/// Wraps an angle into [-pi, pi).
inline double wrap_angle(double x) {
  constexpr double pi = std::numbers::pi;
  return std::fmod(std::fmod(x + pi, 2.0 * pi) + 2.0 * pi, 2.0 * pi) - pi;
}

struct StepResult {
  Vector next_state;
  double reward = 0.0;
  bool done = false;
};

inline Vector clip_action(const EnvSpec& spec, const Vector& action) {
  if (action.size() != spec.d_a) throw ConfigError("action has wrong dimension");
  return action.cwiseMax(spec.action_low).cwiseMin(spec.action_high);
}

/// One transition. The action is clipped to the box first. Episodes end only
/// by truncation at the horizon, so `done` is always false.
inline StepResult step(const EnvSpec& spec, const Vector& state, const Vector& action,
                       Rng* noise = nullptr) {
  if (state.size() != spec.d_s) throw ConfigError("state has wrong dimension");
  if (!state.allFinite()) throw EnvironmentFault("non-finite state");
  if (!action.allFinite()) throw EnvironmentFault("non-finite action");
  const Vector a = clip_action(spec, action);
  StepResult out;
  if (spec.dynamics == Dynamics::point_mass_2d) {
    out.next_state.resize(4);
    const Eigen::Vector2d v = state.segment<2>(2) + spec.dt * a;
    const Eigen::Vector2d p = state.head<2>() + spec.dt * v;
    out.next_state << p, v;
    out.reward = -(p - spec.goal).norm();
  } else {
    using namespace pendulum_const;
    const double th = std::atan2(state(1), state(0));
    const double thdot = state(2);
    const double u = a(0);
    out.reward = -(th * th + 0.1 * thdot * thdot + 0.001 * u * u);
    double new_thdot =
        thdot + (3.0 * gravity / (2.0 * length) * std::sin(th) + 3.0 / (mass * length * length) * u) * spec.dt;
    new_thdot = std::clamp(new_thdot, -max_speed, max_speed);
    const double new_th = th + new_thdot * spec.dt;
    out.next_state.resize(3);
    out.next_state << std::cos(new_th), std::sin(new_th), new_thdot;
  }
  if (noise != nullptr && spec.noise_std > 0.0) {
    for (Eigen::Index i = 0; i < out.next_state.size(); ++i) out.next_state(i) += spec.noise_std * noise->normal();
  }
  if (!out.next_state.allFinite() || !std::isfinite(out.reward)) {
    throw EnvironmentFault("dynamics produced a non-finite state");
  }
  return out;
}

/// Initial state distribution: point mass uniform in [-1, 1]^2 at rest;
/// pendulum angle uniform on the circle, speed uniform in [-1, 1].
inline Vector reset(const EnvSpec& spec, Rng& rng) {
  Vector s(spec.d_s);
  if (spec.dynamics == Dynamics::point_mass_2d) {
    s << rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0, 0.0;
  } else {
    const double th = rng.uniform(-std::numbers::pi, std::numbers::pi);
    s << std::cos(th), std::sin(th), rng.uniform(-1, 1);
  }
  return s;
}

/// Stateful wrapper for rollouts. Copying it clones the environment.
class Env {
 public:
  Env(EnvSpec spec, std::uint64_t seed) : spec_(std::move(spec)), rng_(seed, 11) { spec_.validate(); }

  const EnvSpec& spec() const { return spec_; }
  const Vector& state() const { return state_; }
  int t() const { return t_; }

  const Vector& reset() {
    state_ = ctrlflow::env::reset(spec_, rng_);
    t_ = 0;
    return state_;
  }

  /// Returns the step result; `truncated` becomes true at the horizon.
  StepResult step(const Vector& action, bool* truncated = nullptr) {
    if (state_.size() == 0) throw NotReadyError("Env::step before reset");
    StepResult r = ctrlflow::env::step(spec_, state_, action, &rng_);
    state_ = r.next_state;
    ++t_;
    if (truncated != nullptr) *truncated = t_ >= spec_.horizon;
    return r;
  }

  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }

  /// Restores a saved position; the random stream is restored through rng().
  void restore(Vector state, int t) {
    state_ = std::move(state);
    t_ = t;
  }

 private:
  EnvSpec spec_;
  Rng rng_;
  Vector state_;
  int t_ = 0;
};

}  // namespace ctrlflow::env
