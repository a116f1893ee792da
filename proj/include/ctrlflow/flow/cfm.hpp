#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctrlflow/env/normalizer.hpp"
#include "ctrlflow/flow/vector_field.hpp"
#include "ctrlflow/nn/optimizer.hpp"

namespace ctrlflow::flow {

/// Batch of points on the Gaussian conditional path. Columns are samples,
/// rows the flattened (h F) payload.
struct PathBatch {
  Matrix tau0;
  Matrix tau1;
  RowVector t;
  double sigma = 0.0;
  Matrix eps;
  Matrix mu;
  Matrix noisy;
  Matrix target;

  Index size() const { return tau1.cols(); }
};

/// Draws tau0 ~ N(0, I), t ~ U[0, 1] per column (or `forced_t`) and eps, then
/// builds mu = t tau1 + (1 - t) tau0, noisy = mu + sigma eps and the target
/// velocity tau1 - tau0.
inline PathBatch make_path_batch(const Matrix& tau1, Rng& rng, double sigma,
                                 std::optional<double> forced_t = std::nullopt,
                                 const Matrix* tau0 = nullptr) {
  if (sigma < 0.0) throw ConfigError("sigma must be non-negative");
  PathBatch b;
  b.tau1 = tau1;
  b.tau0 = tau0 != nullptr ? *tau0 : rng.normal_matrix(tau1.rows(), tau1.cols());
  if (b.tau0.rows() != tau1.rows() || b.tau0.cols() != tau1.cols()) throw ConfigError("tau0 shape mismatch");
  b.t.resize(tau1.cols());
  for (Index j = 0; j < tau1.cols(); ++j) b.t(j) = forced_t ? *forced_t : rng.uniform();
  if (forced_t && (*forced_t < 0.0 || *forced_t > 1.0)) throw DomainError("t must lie in [0, 1]");
  b.sigma = sigma;
  b.eps = rng.normal_matrix(tau1.rows(), tau1.cols());
  b.mu = b.tau1 * b.t.asDiagonal();
  b.mu += b.tau0 * (RowVector::Ones(b.t.size()) - b.t).asDiagonal();
  b.noisy = sigma == 0.0 ? b.mu : Matrix(b.mu + sigma * b.eps);
  b.target = b.tau1 - b.tau0;
  return b;
}

struct LossGrad {
  double value = 0.0;
  Vector grad;
};

/// Mean over all elements of (v(noisy, t) - target)^2.
inline Var cfm_loss(Tape& tape, const VectorFieldModel& model, const PathBatch& batch, Vector* sink) {
  if (batch.size() == 0) throw ConfigError("empty CFM batch");
  const Var v = model.evaluate(tape, tape.constant(batch.noisy), batch.t, sink);
  const Var loss = nn::mean(nn::square(v - tape.constant(batch.target)));
  if (!std::isfinite(loss.scalar())) {
    std::ostringstream msg;
    msg << "CFM loss is not finite (h=" << batch.noisy.rows() / model.features() << ", batch=" << batch.size()
        << ", max|x|=" << batch.noisy.cwiseAbs().maxCoeff() << ")";
    throw NumericOverflowError(msg.str());
  }
  return loss;
}

inline LossGrad cfm_loss(const VectorFieldModel& model, const PathBatch& batch) {
  Tape tape;
  LossGrad out;
  out.grad = Vector::Zero(model.parameter_count());
  const Var loss = cfm_loss(tape, model, batch, &out.grad);
  tape.backward(loss);
  out.value = loss.scalar();
  return out;
}

/// KL(N(m_hat, diag v_hat) || N(m, diag v)), summed over dimensions.
inline double diag_gaussian_kl(const Vector& m_hat, const Vector& v_hat, const Vector& m, const Vector& v) {
  return 0.5 * ((v.array() / v_hat.array()).log() + (v_hat.array() + (m_hat - m).array().square()) / v.array() - 1.0)
                   .sum();
}

struct KlResult {
  Var value;
  /// Variance entries lifted to the floor, generated plus real.
  int floor_hits = 0;
};

/// Moment-matching KL between one-step Euler endpoints tau0 + v(tau0, 0) and
/// the real batch tau1. Variances are floored at `var_floor`.
inline KlResult kl_endpoint_regularizer(Tape& tape, const VectorFieldModel& model, const Matrix& tau1,
                                        const Matrix& tau0, double var_floor, Vector* sink) {
  if (tau1.cols() < 2) throw ConfigError("KL regularizer needs a batch of at least 2");
  if (tau0.rows() != tau1.rows() || tau0.cols() != tau1.cols()) throw ConfigError("tau0 shape mismatch");
  KlResult out;
  const Vector m = tau1.rowwise().mean();
  Vector v = (tau1.colwise() - m).array().square().rowwise().mean();
  for (Index i = 0; i < v.size(); ++i) {
    if (v(i) < var_floor) {
      v(i) = var_floor;
      ++out.floor_hits;
    }
  }
  const Var x0 = tape.constant(tau0);
  const Var end = x0 + model.evaluate(tape, x0, RowVector::Zero(tau0.cols()), sink);
  const Var m_hat = nn::row_mean(end);
  const Var centered = nn::add_col(end, nn::neg(m_hat));
  const Var raw_var = nn::row_mean(nn::square(centered));
  out.floor_hits += static_cast<int>((raw_var.value().array() < var_floor).count());
  const Var v_hat = nn::max_const(raw_var, var_floor);
  const Var vc = tape.constant(v);
  const Var inv_v = tape.constant(v.cwiseInverse());
  // 0.5 sum(log v - log v_hat + (v_hat + (m_hat - m)^2) / v - 1)
  const Var diff = m_hat - tape.constant(m);
  Var terms = nn::log(vc) - nn::log(v_hat) + nn::cmul(v_hat + nn::square(diff), inv_v);
  terms = nn::add_scalar(terms, -1.0);
  out.value = nn::scale(nn::sum(terms), 0.5);
  return out;
}

/// Supplies normalized payload batches: (h F) x n.
using PayloadSource = std::function<Matrix(int h, int n, Rng& rng)>;

/// Flattened normalized trajectories drawn from a replay buffer.
inline Matrix flatten_batch(const std::vector<env::Trajectory>& trajs, const env::Normalizer& norm) {
  if (trajs.empty()) return Matrix();
  const Matrix first = env::to_matrix(trajs[0]);
  Matrix out(first.size(), static_cast<Index>(trajs.size()));
  for (std::size_t k = 0; k < trajs.size(); ++k) {
    const Matrix z = norm.normalize(env::to_matrix(trajs[k]));
    out.col(static_cast<Index>(k)) = Eigen::Map<const Vector>(z.data(), z.size());
  }
  return out;
}

inline PayloadSource buffer_source(const env::ReplayBuffer& buffer, const env::Normalizer& norm,
                                   long recent_episodes = 0) {
  return [&buffer, norm, recent_episodes](int h, int n, Rng& rng) {
    return flatten_batch(buffer.sample_trajectories(h, n, rng, recent_episodes), norm);
  };
}

struct TrainCfmConfig {
  int epochs = 50;
  int steps_per_epoch = 10;
  int batch_size = 64;
  double sigma = 1e-2;
  double kl_weight = 0.01;
  double var_floor = 1e-4;
  /// Lengths drawn uniformly per step; empty means uniform over [1, max_h].
  std::vector<int> h_values;
  nn::AdamConfig adam{1e-3};
  /// Learning rate at the last epoch relative to adam.lr (cosine decay).
  double lr_final_fraction = 1.0;
};

struct CfmEpoch {
  int epoch = 0;
  double cfm_loss = 0.0;
  double kl_term = 0.0;
  double grad_norm = 0.0;
  int floor_hits = 0;
};

struct CfmReport {
  std::vector<CfmEpoch> epochs;

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path);
    out.precision(10);
    out << "epoch,cfm_loss,kl_term,grad_norm,floor_hits\n";
    for (const CfmEpoch& e : epochs) {
      out << e.epoch << ',' << e.cfm_loss << ',' << e.kl_term << ',' << e.grad_norm << ',' << e.floor_hits << '\n';
    }
  }
};

/// Algorithm: per step draw h, a real batch, noise and t; minimise the CFM loss
/// plus the weighted endpoint KL. Epoch losses are step means.
///
/// Throws TrainingDivergedError when the epoch loss exceeds 10x the first
/// epoch's for 3 epochs in a row.
inline CfmReport train_cfm(VectorFieldModel& model, nn::Adam& opt, const PayloadSource& source,
                           const TrainCfmConfig& cfg, Rng& rng) {
  CfmReport report;
  if (cfg.batch_size < 1 || cfg.steps_per_epoch < 1) throw ConfigError("CFM batch and steps must be positive");
  for (int h : cfg.h_values) {
    if (h < 1 || h > model.max_h()) throw ConfigError("CFM training length outside [1, H]");
  }
  double initial = -1.0;
  int bad = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    CfmEpoch ep;
    ep.epoch = e;
    if (cfg.lr_final_fraction != 1.0) opt.set_lr(nn::cosine_lr(cfg.adam.lr, cfg.lr_final_fraction, e, cfg.epochs));
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      const int h = cfg.h_values.empty()
                        ? static_cast<int>(rng.uniform_int(1, model.max_h()))
                        : cfg.h_values[static_cast<std::size_t>(
                              rng.uniform_int(0, static_cast<std::int64_t>(cfg.h_values.size()) - 1))];
      const Matrix tau1 = source(h, cfg.batch_size, rng);
      const PathBatch batch = make_path_batch(tau1, rng, cfg.sigma);
      Tape tape;
      Vector grad = Vector::Zero(model.parameter_count());
      Var total = cfm_loss(tape, model, batch, &grad);
      ep.cfm_loss += total.scalar();
      if (cfg.kl_weight > 0.0 && cfg.batch_size >= 2) {
        const Matrix tau0 = rng.normal_matrix(tau1.rows(), tau1.cols());
        const KlResult kl = kl_endpoint_regularizer(tape, model, tau1, tau0, cfg.var_floor, &grad);
        ep.kl_term += kl.value.scalar();
        ep.floor_hits += kl.floor_hits;
        total = total + nn::scale(kl.value, cfg.kl_weight);
      }
      if (!std::isfinite(total.scalar())) throw NumericOverflowError("CFM objective is not finite", e);
      tape.backward(total);
      ep.grad_norm += grad.norm();
      opt.step(model.parameters(), grad);
    }
    ep.cfm_loss /= cfg.steps_per_epoch;
    ep.kl_term /= cfg.steps_per_epoch;
    ep.grad_norm /= cfg.steps_per_epoch;
    report.epochs.push_back(ep);
    if (initial < 0.0) initial = ep.cfm_loss;
    bad = ep.cfm_loss > 10.0 * initial ? bad + 1 : 0;
    if (bad >= 3) {
      throw TrainingDivergedError("CFM loss above 10x its initial value for 3 epochs (epoch " + std::to_string(e) +
                                  ")");
    }
  }
  return report;
}

/// Plain CFM sampling: integrate v from N(0, I) noise over [0, 1].
inline Matrix sample_endpoints(const VectorFieldModel& model, int h, int n, Rng& rng,
                               const Integrator& integrator = {}) {
  const Matrix x0 = rng.normal_matrix(static_cast<Index>(h) * model.features(), n);
  return advance(model.field(), x0, 0.0, 1.0, integrator);
}

}  // namespace ctrlflow::flow
