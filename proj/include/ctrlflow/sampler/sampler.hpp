#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlflow/control/train.hpp"
#include "ctrlflow/env/environment.hpp"
#include "ctrlflow/env/normalizer.hpp"
#include "ctrlflow/env/replay_buffer.hpp"
#include "ctrlflow/env/trajectory.hpp"
#include "ctrlflow/guidance/guidance.hpp"

namespace ctrlflow::sampler {

using env::EnvSpec;
using env::Trajectory;
using flow::Matrix;
using flow::Vector;

struct SampleConfig {
  int h = 5;
  int ode_steps = 20;
  flow::Scheme scheme = flow::Scheme::midpoint;
  bool control_on = false;
  bool guidance_on = false;
  /// Overrides the guidance bundle's beta when set.
  std::optional<double> beta;
  int batch_size = 64;
  /// Replace generated rewards by the environment reward of (s_i, a_i).
  bool recompute_rewards = false;

  void validate(int max_h) const {
    if (ode_steps < 1) throw ConfigError("ode_steps must be >= 1");
    if (h < 1 || h > max_h) throw ConfigError("generation length outside [1, H]");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (beta && !(*beta > 0.0)) throw ConfigError("beta must be positive");
  }
};

/// Models used by the sampling ODE. Optional parts may be null when their
/// toggle is off.
struct Models {
  const flow::VectorFieldModel* cfm = nullptr;
  const control::ControlModel* control = nullptr;
  const guidance::GuidanceBundle* guidance = nullptr;
  control::GainConfig gain;

  Models(const flow::VectorFieldModel* cfm_, const control::ControlModel* control_ = nullptr,
         const guidance::GuidanceBundle* guidance_ = nullptr, control::GainConfig gain_ = {})
      : cfm(cfm_), control(control_), guidance(guidance_), gain(gain_) {}
};

struct ConsistencyStats {
  double residual_mean = 0.0;
  double residual_std = 0.0;
  double cosine_mean = 0.0;
  double cosine_std = 0.0;
  long trajectories = 0;
};

struct GenBatchReport {
  int requested = 0;
  int count = 0;
  int rejected = 0;
  double return_mean = 0.0;
  double return_std = 0.0;
  ConsistencyStats consistency;

  nlohmann::json to_json() const {
    return {{"requested", requested},
            {"count", count},
            {"rejected", rejected},
            {"return_mean", return_mean},
            {"return_std", return_std},
            {"residual_mean", consistency.residual_mean},
            {"residual_std", consistency.residual_std},
            {"cosine_mean", consistency.cosine_mean},
            {"cosine_std", consistency.cosine_std}};
  }
};

struct GenResult {
  std::vector<Trajectory> trajectories;
  GenBatchReport report;
};

inline double cosine_similarity(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, xs.size() > 1 ? std::sqrt(v / static_cast<double>(xs.size() - 1)) : 0.0};
}

/// One-step residuals |s'_i - f(s_i, a_i)| over valid transitions, and the
/// cosine between the last known state and the true open-loop rollout of the
/// same actions from s_0. Trajectories without a valid transition are skipped.
inline ConsistencyStats dynamics_consistency(const std::vector<Trajectory>& trajs, const EnvSpec& spec) {
  std::vector<double> residuals, cosines;
  for (const Trajectory& traj : trajs) {
    double res = 0.0;
    int n = 0;
    Vector rolled = traj.size() > 0 ? traj[0].state : Vector();
    const Vector* last = nullptr;
    for (std::size_t i = 0; i < traj.size(); ++i) {
      const env::Transition& tr = traj[i];
      if (!tr.valid) break;
      res += (tr.next_state - env::step(spec, tr.state, tr.action).next_state).norm();
      rolled = env::step(spec, rolled, tr.action).next_state;
      last = &tr.next_state;
      ++n;
    }
    if (n == 0) continue;
    residuals.push_back(res / n);
    cosines.push_back(cosine_similarity(*last, rolled));
  }
  ConsistencyStats s;
  std::tie(s.residual_mean, s.residual_std) = mean_std(residuals);
  std::tie(s.cosine_mean, s.cosine_std) = mean_std(cosines);
  s.trajectories = static_cast<long>(residuals.size());
  return s;
}

/// dtau/dt = v_theta + [control] B u_omega + [guidance] G.
inline flow::Field sampling_field(const Models& m, const SampleConfig& cfg, const control::RewardScale& rs) {
  if (m.cfm == nullptr) throw ConfigError("sampling needs a flow model");
  if (cfg.control_on && m.control == nullptr) throw ConfigError("control is on but no control model was given");
  if (cfg.guidance_on && m.guidance == nullptr) throw ConfigError("guidance is on but no guidance bundle was given");
  if (!cfg.control_on && !cfg.guidance_on) return m.cfm->field();
  return [m, cfg, rs](const Matrix& X, double t) {
    const Matrix v = m.cfm->evaluate(X, t);
    Matrix out = v;
    if (cfg.control_on) {
      out += control::batch_gains(X, m.cfm->features(), m.gain, rs).cwiseProduct(m.control->evaluate(X, t));
    }
    if (cfg.guidance_on) out += m.guidance->guidance_value(X, t, v, cfg.beta);
    return out;
  };
}

/// Integrates fresh noise from t = 0 to 1, maps payloads back to environment
/// units, clips actions to the box and tags the trajectories as model data.
/// Non-finite samples are rejected and counted.
inline GenResult generate(const Models& m, const env::Normalizer& norm, const EnvSpec& spec,
                          const SampleConfig& cfg, Rng& rng) {
  if (m.cfm == nullptr) throw ConfigError("sampling needs a flow model");
  cfg.validate(m.cfm->max_h());
  const int F = env::step_features(spec);
  if (m.cfm->features() != F || norm.features() != F) throw ConfigError("model features do not match the environment");
  const control::RewardScale rs{norm.reward_mean(), norm.reward_std()};
  const Matrix X0 = rng.normal_matrix(static_cast<Eigen::Index>(cfg.h) * F, cfg.batch_size);
  const flow::Field field = sampling_field(m, cfg, rs);
  const flow::Integrator integ{cfg.ode_steps, cfg.scheme};
  Matrix X1;
  try {
    X1 = flow::advance(field, X0, 0.0, 1.0, integ);
  } catch (const NumericOverflowError&) {
    // Isolate the offending samples; the rest are kept.
    X1.resize(X0.rows(), X0.cols());
    for (Eigen::Index j = 0; j < X0.cols(); ++j) {
      try {
        X1.col(j) = flow::advance(field, Matrix(X0.col(j)), 0.0, 1.0, integ);
      } catch (const NumericOverflowError&) {
        X1.col(j).setConstant(std::numeric_limits<double>::quiet_NaN());
      }
    }
  }

  GenResult out;
  out.report.requested = cfg.batch_size;
  std::vector<double> returns;
  for (Eigen::Index j = 0; j < X1.cols(); ++j) {
    if (!X1.col(j).allFinite()) {
      ++out.report.rejected;
      continue;
    }
    const Matrix p = norm.denormalize(Eigen::Map<const Matrix>(X1.col(j).data(), F, cfg.h));
    if (!p.allFinite()) {
      ++out.report.rejected;
      continue;
    }
    Trajectory traj = env::from_matrix(p, spec.d_s, spec.d_a, env::Source::model);
    for (env::Transition& tr : traj.transitions) {
      tr.action = env::clip_action(spec, tr.action);
      if (cfg.recompute_rewards) tr.reward = env::step(spec, tr.state, tr.action).reward;
    }
    returns.push_back(env::discounted_return(traj, spec.gamma));
    out.trajectories.push_back(std::move(traj));
  }
  out.report.count = static_cast<int>(out.trajectories.size());
  std::tie(out.report.return_mean, out.report.return_std) = mean_std(returns);
  out.report.consistency = dynamics_consistency(out.trajectories, spec);
  return out;
}

/// Appends each trajectory as its own closed episode; returns the number of
/// transitions stored. Evictions caused by the ring are reported through
/// `evicted`.
inline long fill_model_buffer(env::ReplayBuffer& buffer, const std::vector<Trajectory>& trajs,
                              long* evicted = nullptr) {
  long stored = 0;
  const long before = buffer.size();
  for (const Trajectory& t : trajs) {
    if (t.size() == 0) continue;
    buffer.add_trajectory(t);
    stored += static_cast<long>(t.size());
  }
  if (evicted != nullptr) *evicted = before + stored - buffer.size();
  return stored;
}

inline void write_trajectories_csv(const std::string& path, const std::vector<Trajectory>& trajs,
                                   const EnvSpec& spec) {
  env::EpisodeCsv csv(path, spec.d_s, spec.d_a);
  for (std::size_t i = 0; i < trajs.size(); ++i) csv.write(static_cast<long>(i), trajs[i]);
}

}  // namespace ctrlflow::sampler
