#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ctrlflow/env/normalizer.hpp"
#include "ctrlflow/env/trajectory.hpp"
#include "ctrlflow/flow/cfm.hpp"

namespace ctrlflow::guidance {

using flow::Index;
using flow::Matrix;
using flow::PayloadSource;
using flow::RowVector;
using flow::Vector;
using flow::VectorFieldConfig;
using flow::VectorFieldModel;
using nn::Tape;
using nn::Var;

/// Running bounds of observed discounted returns. A bound moves out at once
/// and relaxes toward recent returns at rate 1 - decay.
struct ReturnNormalizer {
  double lo = 0.0;
  double hi = 0.0;
  double decay = 0.999;
  long count = 0;

  void observe(double ret) {
    if (!std::isfinite(ret)) throw DomainError("non-finite return");
    if (count++ == 0) {
      lo = hi = ret;
      return;
    }
    lo = ret < lo ? ret : decay * lo + (1.0 - decay) * ret;
    hi = ret > hi ? ret : decay * hi + (1.0 - decay) * ret;
  }

  /// Position of ret in [lo, hi], clipped to [0, 1]; 0 while the range is empty.
  double normalized(double ret) const {
    if (count == 0) throw NotReadyError("return normalizer has no observations");
    if (!(hi > lo)) return 0.0;
    return std::clamp((ret - lo) / (hi - lo), 0.0, 1.0);
  }

  void save(BlobWriter& w, const std::string& prefix) const {
    w.put_reals(prefix + ".bounds", {lo, hi, decay});
    w.put_int(prefix + ".count", count);
  }
  static ReturnNormalizer load(const BlobReader& r, const std::string& prefix) {
    const auto b = r.get_reals(prefix + ".bounds");
    ReturnNormalizer n;
    n.lo = b.at(0);
    n.hi = b.at(1);
    n.decay = b.at(2);
    n.count = r.get_int(prefix + ".count");
    return n;
  }
};

/// J(tau) = -lambda_J * normalized discounted return.
struct EnergyFn {
  double scale = 1.0;
  ReturnNormalizer returns;

  double of_return(double ret) const { return -scale * returns.normalized(ret); }

  double operator()(const env::Trajectory& traj, double gamma) const {
    if (traj.size() == 0) throw DomainError("energy of an empty trajectory");
    return of_return(env::discounted_return(traj, gamma));
  }

  /// Energies of normalized flattened payloads (one per column); the reward
  /// channel is mapped back to environment units first.
  RowVector of_payloads(const Matrix& X, const env::Normalizer& norm, double gamma) const {
    const Index F = norm.features();
    if (X.rows() % F != 0) throw ConfigError("payload rows are not a multiple of the feature count");
    const Index h = X.rows() / F;
    RowVector J(X.cols());
    for (Index j = 0; j < X.cols(); ++j) {
      double g = 0.0, w = 1.0;
      for (Index i = 0; i < h; ++i) {
        g += w * (X(i * F + F - 1, j) * norm.reward_std() + norm.reward_mean());
        w *= gamma;
      }
      J(j) = of_return(g);
    }
    return J;
  }
};

/// Energies of a batch of normalized payloads.
using PayloadEnergy = std::function<RowVector(const Matrix&)>;

struct WeightClamp {
  double lo = 1e-4;
  double hi = 1e4;
};

/// e^{-J} clamped to [lo, hi]; `hits` counts clamped entries.
inline RowVector tilt_weights(const RowVector& J, const WeightClamp& clamp = {}, int* hits = nullptr) {
  RowVector w(J.size());
  int n = 0;
  for (Index j = 0; j < J.size(); ++j) {
    const double e = std::exp(-J(j));
    w(j) = std::clamp(e, clamp.lo, clamp.hi);
    n += w(j) != e;
  }
  if (hits != nullptr) *hits += n;
  return w;
}

/// (e^{-J} / Z - 1) v, column by column.
inline Matrix guidance_target(const Matrix& v, const RowVector& weight, const RowVector& Z) {
  if (weight.size() != v.cols() || Z.size() != v.cols()) throw ConfigError("one weight and Z per column");
  if ((Z.array() <= 0.0).any()) throw DomainError("Z must be positive");
  return v * (weight.array() / Z.array() - 1.0).matrix().asDiagonal();
}

struct GuidanceConfig {
  double beta = 1.0;
  /// Reverse coupling ratio; beta carries the scaling by default.
  double coupling = 1.0;
  /// Total-loss scale on L_G + L_Z.
  double zeta = 1.0;
  WeightClamp clamp;
};

/// G_psi and Z_phi. Z = softplus(raw + softplus^{-1}(1)) + 1e-6, so an
/// untrained head starts near 1.
struct GuidanceBundle {
  VectorFieldModel G;
  VectorFieldModel Z;
  GuidanceConfig cfg;

  static constexpr double kZFloor = 1e-6;
  static constexpr double kZShift = 0.5413248546129181;

  GuidanceBundle() = default;
  GuidanceBundle(const VectorFieldConfig& net, int features, int max_h, Rng& rng, GuidanceConfig c = {})
      : cfg(c) {
    if (!(cfg.beta > 0.0) || !(cfg.zeta > 0.0) || !(cfg.coupling > 0.0)) {
      throw ConfigError("beta, zeta and the coupling ratio must be positive");
    }
    VectorFieldConfig g = net;
    g.out_scale = 0.0;
    G = VectorFieldModel(g, features, max_h, rng);
    Z = VectorFieldModel(net, features, max_h, rng, true);
  }

  RowVector z_value(const Matrix& X, const RowVector& t) const {
    const Matrix raw = Z.evaluate(X, t);
    RowVector out(raw.cols());
    for (Index j = 0; j < raw.cols(); ++j) {
      const double a = raw(0, j) + kZShift;
      out(j) = (a > 30.0 ? a : std::log1p(std::exp(a))) + kZFloor;
    }
    return out;
  }
  Var z_value(Tape& tape, Var X, const RowVector& t, Vector* sink) const {
    return nn::add_scalar(nn::softplus(nn::add_scalar(Z.evaluate(tape, X, t, sink), kZShift)), kZFloor);
  }

  /// Guidance term of the energy field: (beta P e^{-J}/Z - 1) v expressed
  /// through the learned G = (e^{-J}/Z - 1) v as beta P G + (beta P - 1) v.
  /// `beta` overrides the configured scale.
  Matrix guidance_value(const Matrix& X, double t, const Matrix& v, std::optional<double> beta = {}) const {
    const double c = beta.value_or(cfg.beta) * cfg.coupling;
    Matrix out = c * G.evaluate(X, t);
    if (c != 1.0) out += (c - 1.0) * v;
    return out;
  }

  void save(BlobWriter& w, const std::string& prefix) const {
    w.put_reals(prefix + ".cfg", {cfg.beta, cfg.coupling, cfg.zeta, cfg.clamp.lo, cfg.clamp.hi});
    G.save(w, prefix + ".G");
    Z.save(w, prefix + ".Z");
  }
  static GuidanceBundle load(const BlobReader& r, const std::string& prefix) {
    GuidanceBundle b;
    const auto c = r.get_reals(prefix + ".cfg");
    b.cfg = {c.at(0), c.at(1), c.at(2), {c.at(3), c.at(4)}};
    b.G = VectorFieldModel::load(r, prefix + ".G");
    b.Z = VectorFieldModel::load(r, prefix + ".Z");
    return b;
  }
};

/// v_E = v_C + G.
inline Matrix energy_field(const Matrix& v_c, const Matrix& g) {
  if (v_c.rows() != g.rows() || v_c.cols() != g.cols()) throw ConfigError("field/guidance shape mismatch");
  return v_c + g;
}

/// One regression batch: path points, their times, conditional velocities and
/// clamped tilt weights of the endpoints.
struct GuidanceBatch {
  Matrix X;
  RowVector t;
  Matrix v;
  RowVector weight;
};

inline GuidanceBatch make_guidance_batch(const Matrix& tau1, const RowVector& J, Rng& rng, double sigma,
                                         const WeightClamp& clamp = {}, int* clamp_hits = nullptr) {
  if (J.size() != tau1.cols()) throw ConfigError("one energy per trajectory");
  const flow::PathBatch p = flow::make_path_batch(tau1, rng, sigma);
  return {p.noisy, p.t, p.target, tilt_weights(J, clamp, clamp_hits)};
}

struct GuidanceLoss {
  Var g;
  Var z;
  RowVector z_values;
};

/// L_G = mean_b |G(x_b, t_b) - (w_b / Z(x_b, t_b) - 1) v_b|^2 with Z detached,
/// L_Z = mean_b (Z(x_b, t_b) - w_b)^2.
inline GuidanceLoss guidance_losses(Tape& tape, const GuidanceBundle& bundle, const GuidanceBatch& batch,
                                    Vector* sink_g, Vector* sink_z) {
  const Index B = batch.X.cols();
  if (B == 0) throw ConfigError("empty guidance batch");
  const Var X = tape.constant(batch.X);
  const Var z = bundle.z_value(tape, X, batch.t, sink_z);
  const RowVector zdet = z.value();
  const Var target = tape.constant(guidance_target(batch.v, batch.weight, zdet));
  const Var G = bundle.G.evaluate(tape, X, batch.t, sink_g);
  GuidanceLoss out;
  out.z_values = zdet;
  out.g = nn::scale(nn::sum(nn::square(G - target)), 1.0 / static_cast<double>(B));
  out.z = nn::mean(nn::square(z - tape.constant(Matrix(batch.weight))));
  if (!std::isfinite(out.g.scalar()) || !std::isfinite(out.z.scalar())) {
    throw NumericOverflowError("non-finite guidance loss (L_G " + std::to_string(out.g.scalar()) + ", L_Z " +
                               std::to_string(out.z.scalar()) + ")");
  }
  return out;
}

struct TrainGuidanceConfig {
  int epochs = 50;
  int steps_per_epoch = 10;
  int batch_size = 64;
  double sigma = 1e-2;
  std::vector<int> h_values;
  nn::AdamConfig adam{1e-3};
  double lr_final_fraction = 1.0;
};

struct GuidanceEpoch {
  int epoch = 0;
  double loss_g = 0.0;
  double loss_z = 0.0;
  double mean_weight = 0.0;
  double mean_z = 0.0;
  double coef_p10 = 0.0;
  double coef_p50 = 0.0;
  double coef_p90 = 0.0;
  int clamp_hits = 0;
};

struct GuidanceReport {
  std::vector<GuidanceEpoch> epochs;

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path);
    out.precision(10);
    out << "epoch,loss_g,loss_z,mean_weight,mean_z,coef_p10,coef_p50,coef_p90,clamp_hits\n";
    for (const auto& e : epochs) {
      out << e.epoch << ',' << e.loss_g << ',' << e.loss_z << ',' << e.mean_weight << ',' << e.mean_z << ','
          << e.coef_p10 << ',' << e.coef_p50 << ',' << e.coef_p90 << ',' << e.clamp_hits << '\n';
    }
  }
};

inline double quantile(std::vector<double> xs, double q) {
  if (xs.empty()) return 0.0;
  const auto k = static_cast<std::size_t>(std::clamp(q, 0.0, 1.0) * static_cast<double>(xs.size() - 1));
  std::nth_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(k), xs.end());
  return xs[k];
}

/// Fits G_psi and Z_phi on path points built from real endpoints. Both nets
/// step on zeta-scaled gradients of their own loss.
inline GuidanceReport train_guidance(GuidanceBundle& bundle, nn::Adam& opt_g, nn::Adam& opt_z,
                                     const PayloadSource& source, const PayloadEnergy& energy,
                                     const TrainGuidanceConfig& cfg, Rng& rng) {
  GuidanceReport report;
  if (cfg.batch_size < 1 || cfg.steps_per_epoch < 1) throw ConfigError("guidance batch and steps must be positive");
  const int H = bundle.G.max_h();
  for (int h : cfg.h_values) {
    if (h < 1 || h > H) throw ConfigError("guidance training length outside [1, H]");
  }
  for (int e = 0; e < cfg.epochs; ++e) {
    GuidanceEpoch ep;
    ep.epoch = e;
    if (cfg.lr_final_fraction != 1.0) {
      const double lr = nn::cosine_lr(cfg.adam.lr, cfg.lr_final_fraction, e, cfg.epochs);
      opt_g.set_lr(lr);
      opt_z.set_lr(lr);
    }
    std::vector<double> coefs;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      const int h = cfg.h_values.empty()
                        ? static_cast<int>(rng.uniform_int(1, H))
                        : cfg.h_values[static_cast<std::size_t>(
                              rng.uniform_int(0, static_cast<std::int64_t>(cfg.h_values.size()) - 1))];
      const Matrix tau1 = source(h, cfg.batch_size, rng);
      const GuidanceBatch batch =
          make_guidance_batch(tau1, energy(tau1), rng, cfg.sigma, bundle.cfg.clamp, &ep.clamp_hits);
      Tape tape;
      Vector gg = Vector::Zero(bundle.G.parameter_count());
      Vector gz = Vector::Zero(bundle.Z.parameter_count());
      const GuidanceLoss loss = guidance_losses(tape, bundle, batch, &gg, &gz);
      tape.backward(nn::scale(loss.g + loss.z, bundle.cfg.zeta));
      const RowVector& z = loss.z_values;
      for (Index j = 0; j < z.size(); ++j) coefs.push_back(batch.weight(j) / z(j) - 1.0);
      opt_g.step(bundle.G.parameters(), gg);
      opt_z.step(bundle.Z.parameters(), gz);
      ep.loss_g += loss.g.scalar();
      ep.loss_z += loss.z.scalar();
      ep.mean_weight += batch.weight.mean();
      ep.mean_z += z.mean();
    }
    const double n = cfg.steps_per_epoch;
    ep.loss_g /= n;
    ep.loss_z /= n;
    ep.mean_weight /= n;
    ep.mean_z /= n;
    ep.coef_p10 = quantile(coefs, 0.1);
    ep.coef_p50 = quantile(coefs, 0.5);
    ep.coef_p90 = quantile(coefs, 0.9);
    report.epochs.push_back(ep);
  }
  return report;
}

struct TiltedCheckConfig {
  int samples = 4096;
  VectorFieldConfig net;
  flow::TrainCfmConfig cfm;
  TrainGuidanceConfig guidance;
  flow::Integrator integrator{40, flow::Scheme::midpoint};

  TiltedCheckConfig() {
    net.hidden = {64, 64};
    net.time_width = 8;
    cfm.epochs = 40;
    cfm.batch_size = 1024;
    cfm.kl_weight = 0.0;
    cfm.adam.lr = 3e-3;
    cfm.lr_final_fraction = 0.02;
    guidance.epochs = 80;
    guidance.batch_size = 1024;
    guidance.adam.lr = 2e-3;
    guidance.lr_final_fraction = 0.02;
  }
};

struct TiltedResult {
  double b = 0.0;
  double mean = 0.0;
  double variance = 0.0;
  double mean_error = 0.0;
  double variance_error = 0.0;
};

/// Base p = N(0, 1) over one-element trajectories and J(x) = -b x, whose
/// tilted law is N(b, 1). Trains a CFM model and a guidance bundle, then
/// samples v + G and reports the empirical moments.
inline TiltedResult tilted_gaussian_check(double b, std::uint64_t seed, const TiltedCheckConfig& cfg = {}) {
  Rng rng(seed);
  VectorFieldModel cfm(cfg.net, 1, 1, rng);
  const PayloadSource base = [](int h, int n, Rng& r) { return r.normal_matrix(h, n); };
  nn::Adam opt(cfg.cfm.adam, cfm.parameter_count());
  flow::TrainCfmConfig cc = cfg.cfm;
  cc.h_values = {1};
  flow::train_cfm(cfm, opt, base, cc, rng);

  GuidanceBundle bundle(cfg.net, 1, 1, rng);
  nn::Adam og(cfg.guidance.adam, bundle.G.parameter_count()), oz(cfg.guidance.adam, bundle.Z.parameter_count());
  TrainGuidanceConfig gc = cfg.guidance;
  gc.h_values = {1};
  const PayloadEnergy energy = [b](const Matrix& X) { return RowVector(-b * X.row(0)); };
  train_guidance(bundle, og, oz, base, energy, gc, rng);

  const flow::Field guided = [&](const Matrix& X, double t) {
    const Matrix v = cfm.evaluate(X, t);
    return energy_field(v, bundle.guidance_value(X, t, v));
  };
  const Matrix x = flow::advance(guided, rng.normal_matrix(1, cfg.samples), 0.0, 1.0, cfg.integrator);
  TiltedResult r;
  r.b = b;
  r.mean = x.mean();
  r.variance = (x.array() - r.mean).square().sum() / static_cast<double>(x.size() - 1);
  r.mean_error = std::abs(r.mean - b);
  r.variance_error = std::abs(r.variance - 1.0);
  return r;
}

}  // namespace ctrlflow::guidance
