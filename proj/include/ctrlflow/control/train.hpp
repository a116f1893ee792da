#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ctrlflow/control/gramian.hpp"
#include "ctrlflow/flow/cfm.hpp"

namespace ctrlflow::control {

using flow::PayloadSource;
using flow::RowVector;
using flow::VectorFieldModel;
using nn::Tape;
using nn::Var;

/// Affine map from the normalized reward channel back to environment units.
struct RewardScale {
  double mean = 0.0;
  double std = 1.0;
};

/// Gain of every column of a batch of normalized flattened payloads, returned
/// as the D x B matrix of diagonal entries.
inline Matrix batch_gains(const Matrix& X, int features, const GainConfig& cfg, const RewardScale& rs) {
  Matrix G(X.rows(), X.cols());
  const Eigen::Index h = X.rows() / features;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    Matrix p = Eigen::Map<const Matrix>(X.col(j).data(), features, h);
    p.row(features - 1) = p.row(features - 1).array() * rs.std + rs.mean;
    G.col(j) = compute_gain(p, cfg).diag;
  }
  return G;
}

/// u_omega(x, t): trajectory-shaped control head. Its output layer starts at
/// zero so an untrained model leaves the field unchanged.
struct ControlModel {
  VectorFieldModel net;
  double alpha = 1.0;

  ControlModel() = default;
  ControlModel(const flow::VectorFieldConfig& cfg, int features, int max_h, Rng& rng, double alpha_ = 1.0)
      : alpha(alpha_) {
    flow::VectorFieldConfig c = cfg;
    c.out_scale = 0.0;
    net = VectorFieldModel(c, features, max_h, rng);
    if (!(alpha > 0.0)) throw ConfigError("control scale alpha must be positive");
  }

  Matrix evaluate(const Matrix& X, double t) const { return net.evaluate(X, t); }

  void save(BlobWriter& w, const std::string& prefix) const {
    w.put_real(prefix + ".alpha", alpha);
    net.save(w, prefix + ".net");
  }
  static ControlModel load(const BlobReader& r, const std::string& prefix) {
    ControlModel m;
    m.alpha = r.get_real(prefix + ".alpha");
    m.net = VectorFieldModel::load(r, prefix + ".net");
    return m;
  }
};

/// Field v + B u with the gain recomputed from the current state.
inline Field controlled_field(const VectorFieldModel& cfm, const ControlModel& ctrl, const GainConfig& gain,
                              const RewardScale& rs) {
  return [&cfm, &ctrl, gain, rs](const Matrix& X, double t) {
    const Matrix G = batch_gains(X, cfm.features(), gain, rs);
    return Matrix(cfm.evaluate(X, t) + G.cwiseProduct(ctrl.evaluate(X, t)));
  };
}

/// L_Control = |tau_bar|^2 / (alpha max(lambda_min, eps_pd)), per sample.
inline double control_loss_value(double tau_bar_sq, double lambda_min, double alpha, double eps_pd = kEpsPd) {
  return tau_bar_sq / (alpha * std::max(lambda_min, eps_pd));
}

enum class Pairing {
  /// tau0 ~ N(0, I) independent of the real batch.
  independent,
  /// tau0 = Phi^{1,0}(tau1) under the frozen field.
  reverse_flow,
};

struct TrainControlConfig {
  int epochs = 20;
  int steps_per_epoch = 5;
  int batch_size = 32;
  std::vector<int> h_values;
  /// Rollout of the controlled field from 0 to 1 (recorded for gradients).
  Integrator rollout{10, Scheme::midpoint};
  /// Flow of the frozen field used for the Jacobians D Phi^{t,T}. The direct
  /// map reading is Integrator{1, euler}.
  Integrator jacobian_flow{10, Scheme::midpoint};
  int quad_nodes = 8;
  QuadratureKind quadrature = QuadratureKind::midpoint;
  GainConfig gain;
  double eps_pd = kEpsPd;
  /// Steps between Gramian refreshes; 0 means once per epoch.
  int gramian_every = 0;
  Pairing pairing = Pairing::independent;
  double fd_step = 1e-5;
  nn::AdamConfig adam{1e-3};
};

struct ControlEpoch {
  int epoch = 0;
  double loss = 0.0;
  double endpoint_error = 0.0;
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  int degenerate = 0;
};

struct ControlReport {
  std::vector<ControlEpoch> epochs;

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path);
    out.precision(10);
    out << "epoch,loss,endpoint_error,lambda_min,lambda_max,degenerate\n";
    for (const auto& e : epochs) {
      out << e.epoch << ',' << e.loss << ',' << e.endpoint_error << ',' << e.lambda_min << ',' << e.lambda_max << ','
          << e.degenerate << '\n';
    }
  }
};

/// Gramian N(u) along the controlled path of one sample x0, with Jacobians of
/// the frozen flow and gains read from the path states.
inline GramianReport controlled_gramian(const VectorFieldModel& cfm, const ControlModel& ctrl, const Vector& x0,
                                        const TrainControlConfig& cfg, const RewardScale& rs) {
  const QuadratureRule rule = make_quadrature(cfg.quad_nodes, cfg.quadrature);
  const FlowMap controlled{controlled_field(cfm, ctrl, cfg.gain, rs), cfg.rollout};
  const FlowMap frozen{cfm.field(), cfg.jacobian_flow};
  std::vector<Vector> states;
  std::vector<ControlGain> gains;
  const Eigen::Index h = x0.size() / cfm.features();
  for (int k = 0; k < cfg.quad_nodes; ++k) {
    const Vector xk = controlled.advance(x0, 0.0, rule.t(k));
    Matrix p = Eigen::Map<const Matrix>(xk.data(), cfm.features(), h);
    p.row(cfm.features() - 1) = p.row(cfm.features() - 1).array() * rs.std + rs.mean;
    states.push_back(xk);
    gains.push_back(compute_gain(p, cfg.gain));
  }
  GramianConfig gc;
  gc.fd_step = cfg.fd_step;
  return nonlinear_gramian(frozen, states, gains, rule, 1.0, gc);
}

/// Records the controlled rollout from X0 on the tape; gradients reach only
/// the control parameters.
inline Var controlled_rollout(Tape& tape, const VectorFieldModel& cfm, const ControlModel& ctrl, const Matrix& X0,
                              const TrainControlConfig& cfg, const RewardScale& rs, Vector* sink) {
  const int n = flow::step_count(cfg.rollout, 0.0, 1.0);
  const double dt = 1.0 / n;
  const Eigen::Index B = X0.cols();
  auto f = [&](Var x, double t) {
    const RowVector tv = RowVector::Constant(B, t);
    const Var G = tape.constant(batch_gains(x.value(), cfm.features(), cfg.gain, rs));
    return cfm.evaluate(tape, x, tv, nullptr) + nn::cmul(G, ctrl.net.evaluate(tape, x, tv, sink));
  };
  Var x = tape.constant(X0);
  for (int k = 0; k < n; ++k) {
    const double t = k * dt;
    switch (cfg.rollout.scheme) {
      case Scheme::euler: x = x + nn::scale(f(x, t), dt); break;
      case Scheme::midpoint: {
        const Var mid = x + nn::scale(f(x, t), 0.5 * dt);
        x = x + nn::scale(f(mid, t + 0.5 * dt), dt);
        break;
      }
      case Scheme::rk4: {
        const Var k1 = f(x, t);
        const Var k2 = f(x + nn::scale(k1, 0.5 * dt), t + 0.5 * dt);
        const Var k3 = f(x + nn::scale(k2, 0.5 * dt), t + 0.5 * dt);
        const Var k4 = f(x + nn::scale(k3, dt), t + dt);
        x = x + nn::scale(k1 + nn::scale(k2, 2.0) + nn::scale(k3, 2.0) + k4, dt / 6.0);
        break;
      }
    }
  }
  return x;
}

/// Controlled-rollout objective for a fixed lambda_min: mean over the batch of
/// |tau1 - x_1|^2 / (alpha max(lambda_min, eps_pd)).
inline Var control_loss(Tape& tape, const VectorFieldModel& cfm, const ControlModel& ctrl, const Matrix& X0,
                        const Matrix& tau1, double lambda_min, const TrainControlConfig& cfg, const RewardScale& rs,
                        Vector* sink) {
  const Var end = controlled_rollout(tape, cfm, ctrl, X0, cfg, rs, sink);
  const Var err = nn::sum(nn::square(tape.constant(tau1) - end));
  return nn::scale(err, 1.0 / (static_cast<double>(X0.cols()) * ctrl.alpha * std::max(lambda_min, cfg.eps_pd)));
}

/// Algorithm: per step draw h, a real batch tau1 and starting points; build
/// N(u) along the controlled path (stop-gradient); descend L_Control in omega.
inline ControlReport train_control(ControlModel& ctrl, nn::Adam& opt, const VectorFieldModel& cfm,
                                   const PayloadSource& source, const RewardScale& rs,
                                   const TrainControlConfig& cfg, Rng& rng) {
  ControlReport report;
  if (cfg.batch_size < 1 || cfg.steps_per_epoch < 1) throw ConfigError("control batch and steps must be positive");
  for (int h : cfg.h_values) {
    if (h < 1 || h > cfm.max_h()) throw ConfigError("control training length outside [1, H]");
  }
  const FlowMap frozen{cfm.field(), cfg.rollout};
  for (int e = 0; e < cfg.epochs; ++e) {
    ControlEpoch ep;
    ep.epoch = e;
    double lambda = 0.0;
    int gramians = 0;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      const int h = cfg.h_values.empty()
                        ? static_cast<int>(rng.uniform_int(1, cfm.max_h()))
                        : cfg.h_values[static_cast<std::size_t>(
                              rng.uniform_int(0, static_cast<std::int64_t>(cfg.h_values.size()) - 1))];
      const Matrix tau1 = source(h, cfg.batch_size, rng);
      const Matrix X0 = cfg.pairing == Pairing::independent ? rng.normal_matrix(tau1.rows(), tau1.cols())
                                                            : frozen.advance(tau1, 1.0, 0.0);
      const bool refresh = cfg.gramian_every <= 0 ? s == 0 : s % cfg.gramian_every == 0;
      if (refresh) {
        const GramianReport rep = controlled_gramian(cfm, ctrl, X0.col(0), cfg, rs);
        lambda = rep.lambda_min;
        ep.lambda_min += rep.lambda_min;
        ep.lambda_max += rep.lambda_max;
        ++gramians;
        if (rep.lambda_min < cfg.eps_pd) ++ep.degenerate;
      }
      Tape tape;
      Vector grad = Vector::Zero(ctrl.net.parameter_count());
      const Var loss = control_loss(tape, cfm, ctrl, X0, tau1, lambda, cfg, rs, &grad);
      if (!std::isfinite(loss.scalar())) throw NumericOverflowError("control loss is not finite", e);
      tape.backward(loss);
      opt.step(ctrl.net.parameters(), grad);
      ep.loss += loss.scalar();
      ep.endpoint_error += std::sqrt(loss.scalar() * ctrl.alpha * std::max(lambda, cfg.eps_pd));
    }
    ep.loss /= cfg.steps_per_epoch;
    ep.endpoint_error /= cfg.steps_per_epoch;
    ep.lambda_min /= std::max(1, gramians);
    ep.lambda_max /= std::max(1, gramians);
    report.epochs.push_back(ep);
    if (gramians > 0 && ep.degenerate == gramians) {
      throw ControlDegenerateError("lambda_min stayed below eps_pd for all of epoch " + std::to_string(e));
    }
  }
  return report;
}

/// Mean endpoint error |tau1 - x_1| of the (optionally controlled) rollout.
inline double endpoint_error(const VectorFieldModel& cfm, const ControlModel* ctrl, const Matrix& X0,
                             const Matrix& tau1, const TrainControlConfig& cfg, const RewardScale& rs) {
  const Field f = ctrl != nullptr ? controlled_field(cfm, *ctrl, cfg.gain, rs) : cfm.field();
  const Matrix end = flow::advance(f, X0, 0.0, 1.0, cfg.rollout);
  return (tau1 - end).colwise().norm().mean();
}

/// max |v(x) - v(y)| / |x - y| over random column pairs and small
/// perturbations. A diagnostic only.
inline double estimate_lipschitz(const Field& v, const Matrix& X, double t, Rng& rng, int pairs = 256) {
  if (X.cols() < 1) throw ConfigError("need sample points");
  double best = 0.0;
  for (int p = 0; p < pairs; ++p) {
    const Eigen::Index i = rng.uniform_int(0, X.cols() - 1);
    Matrix P(X.rows(), 2);
    P.col(0) = X.col(i);
    if (p % 2 == 0 && X.cols() > 1) {
      P.col(1) = X.col(rng.uniform_int(0, X.cols() - 1));
    } else {
      P.col(1) = X.col(i) + 1e-3 * rng.normal_matrix(X.rows(), 1);
    }
    const double dx = (P.col(0) - P.col(1)).norm();
    if (dx == 0.0) continue;
    const Matrix V = v(P, t);
    best = std::max(best, (V.col(0) - V.col(1)).norm() / dx);
  }
  return best;
}

}  // namespace ctrlflow::control
