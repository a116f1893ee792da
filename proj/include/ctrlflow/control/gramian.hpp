#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlflow/control/flow_map.hpp"
#include "ctrlflow/core/parallel.hpp"

namespace ctrlflow::control {

enum class GainMode { scalar, constant, diagonal };

inline const char* to_string(GainMode m) {
  switch (m) {
    case GainMode::scalar: return "scalar";
    case GainMode::constant: return "constant";
    case GainMode::diagonal: return "diagonal";
  }
  return "?";
}

inline GainMode gain_mode_from_string(const std::string& s) {
  if (s == "scalar") return GainMode::scalar;
  if (s == "constant") return GainMode::constant;
  if (s == "diagonal") return GainMode::diagonal;
  throw ConfigError("unknown gain mode '" + s + "'");
}

/// Diagonal control matrix B^t. In scalar and constant modes every entry
/// equals `scalar`; the dense matrix is never formed.
struct ControlGain {
  GainMode mode = GainMode::scalar;
  double scalar = 0.0;
  Vector diag;

  static ControlGain uniform(double b, Eigen::Index D, GainMode mode = GainMode::scalar) {
    return {mode, b, Vector::Constant(D, b)};
  }

  Vector apply(const Vector& u) const {
    if (u.size() != diag.size()) throw ConfigError("gain/control size mismatch");
    return diag.cwiseProduct(u);
  }
  Matrix apply(const Matrix& U) const {
    if (U.rows() != diag.size()) throw ConfigError("gain/control size mismatch");
    return diag.asDiagonal() * U;
  }
};

struct GainConfig {
  GainMode mode = GainMode::scalar;
  double gamma = 0.99;
  /// Value of b in constant mode.
  double constant = 1.0;
};

/// b = sum_{i=1..h} gamma^i r_i (1 - I_i) from the reward channel of an
/// F x h payload in environment units; I_i = 1 on invalid steps. Diagonal
/// mode assigns gamma^i r_i (1 - I_i) to every row of step i.
inline ControlGain compute_gain(const Matrix& payload, const GainConfig& cfg,
                                const std::vector<bool>& valid = {}) {
  const Eigen::Index F = payload.rows(), h = payload.cols();
  if (!valid.empty() && static_cast<Eigen::Index>(valid.size()) != h) throw ConfigError("valid flags length != h");
  if (cfg.mode == GainMode::constant) return ControlGain::uniform(cfg.constant, F * h, GainMode::constant);
  ControlGain g;
  g.mode = cfg.mode;
  g.diag.resize(F * h);
  double w = 1.0;
  for (Eigen::Index i = 0; i < h; ++i) {
    w *= cfg.gamma;
    const bool ok = valid.empty() || valid[static_cast<std::size_t>(i)];
    const double term = ok ? w * payload(F - 1, i) : 0.0;
    g.scalar += term;
    g.diag.segment(i * F, F).setConstant(term);
  }
  if (cfg.mode == GainMode::scalar) g.diag.setConstant(g.scalar);
  return g;
}

struct QuadratureRule {
  Vector t;
  Vector w;
};

enum class QuadratureKind { midpoint, gauss_legendre };

inline QuadratureRule make_quadrature(int nodes, QuadratureKind kind = QuadratureKind::midpoint, double t0 = 0.0,
                                      double T = 1.0) {
  if (nodes < 1) throw ConfigError("quadrature needs at least one node");
  if (kind == QuadratureKind::gauss_legendre) {
    auto [t, w] = gauss_legendre(nodes, t0, T);
    return {t, w};
  }
  QuadratureRule q;
  q.t.resize(nodes);
  q.w = Vector::Constant(nodes, (T - t0) / nodes);
  for (int k = 0; k < nodes; ++k) q.t(k) = t0 + (T - t0) * (k + 0.5) / nodes;
  return q;
}

struct GramianReport {
  Matrix N;
  Vector eigenvalues;
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  double energy_bound = std::numeric_limits<double>::quiet_NaN();
  int nodes = 0;
  bool degenerate = false;
  QuadratureRule rule;
  double T = 1.0;
  std::vector<Matrix> jacobians;  ///< D Phi^{t_k,T}(x_k)
  std::vector<ControlGain> gains;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["dimension"] = N.rows();
    j["nodes"] = nodes;
    j["lambda_min"] = lambda_min;
    j["lambda_max"] = lambda_max;
    j["energy_bound"] = std::isfinite(energy_bound) ? nlohmann::json(energy_bound) : nlohmann::json();
    j["degenerate"] = degenerate;
    j["eigenvalues"] = std::vector<double>(eigenvalues.data(), eigenvalues.data() + eigenvalues.size());
    return j;
  }
};

struct GramianConfig {
  double fd_step = 1e-5;
  /// Largest payload dimension for which dense Jacobians are formed.
  Eigen::Index max_dense_dim = 512;
};

/// N = sum_k w_k J_k B_k B_k^T J_k^T with J_k = D Phi^{t_k,T}(x_k), where x_k is
/// the path state at node t_k. Jacobians are kept for control_input.
inline GramianReport nonlinear_gramian(const FlowMap& map, const std::vector<Vector>& states,
                                       const std::vector<ControlGain>& gains, const QuadratureRule& rule,
                                       double T = 1.0, const GramianConfig& cfg = {}) {
  const int K = static_cast<int>(rule.t.size());
  if (static_cast<int>(states.size()) != K || static_cast<int>(gains.size()) != K) {
    throw ConfigError("need one state and one gain per quadrature node");
  }
  if (K == 0) throw ConfigError("empty quadrature rule");
  const Eigen::Index D = states[0].size();
  if (D > cfg.max_dense_dim) {
    throw ConfigError("payload dimension " + std::to_string(D) + " exceeds the dense Gramian limit " +
                      std::to_string(cfg.max_dense_dim));
  }
  GramianReport rep;
  rep.nodes = K;
  rep.rule = rule;
  rep.T = T;
  rep.gains = gains;
  rep.jacobians.resize(static_cast<std::size_t>(K));
  parallel_for(K, [&](int k) {
    const auto ks = static_cast<std::size_t>(k);
    if (states[ks].size() != D || gains[ks].diag.size() != D) throw ConfigError("node dimension mismatch");
    rep.jacobians[ks] = flow_jacobian(map, states[ks], rule.t(k), T, cfg.fd_step).J;
  });
  rep.N = Matrix::Zero(D, D);
  for (int k = 0; k < K; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    const Matrix JB = rep.jacobians[ks] * gains[ks].diag.asDiagonal();
    rep.N.noalias() += rule.w(k) * JB * JB.transpose();
  }
  const double asym = (rep.N - rep.N.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * std::max(1.0, rep.N.cwiseAbs().maxCoeff())) {
    throw NumericOverflowError("Gramian asymmetry " + std::to_string(asym));
  }
  rep.N = 0.5 * (rep.N + rep.N.transpose());
  if (!rep.N.allFinite()) throw NumericOverflowError("non-finite Gramian");
  Eigen::SelfAdjointEigenSolver<Matrix> es(rep.N, Eigen::EigenvaluesOnly);
  rep.eigenvalues = es.eigenvalues();
  rep.lambda_min = rep.eigenvalues(0);
  rep.lambda_max = rep.eigenvalues(D - 1);
  bool all_zero = true;
  for (const ControlGain& g : gains) all_zero = all_zero && (g.diag.array() == 0.0).all();
  if (all_zero) {
    rep.degenerate = true;
    rep.lambda_min = 0.0;
  }
  return rep;
}

struct GramianSolve {
  Vector y;  ///< N^{-1} e
  bool ridge = false;
};

/// Solves N y = e. Below eps_pd the ridge system (N + eps_reg I) is used when
/// allowed, otherwise UncontrollableError is raised.
inline GramianSolve solve_gramian(const GramianReport& rep, const Vector& e, bool allow_ridge = false,
                                  double eps_pd = kEpsPd, double eps_reg = kEpsReg) {
  if (e.size() != rep.N.rows()) throw ConfigError("error vector has wrong dimension");
  GramianSolve s;
  if (rep.lambda_min <= eps_pd) {
    if (!allow_ridge) throw UncontrollableError("Gramian is not positive definite", rep.lambda_min);
    s.ridge = true;
    const Matrix R = rep.N + eps_reg * Matrix::Identity(rep.N.rows(), rep.N.cols());
    s.y = R.ldlt().solve(e);
  } else {
    s.y = rep.N.ldlt().solve(e);
  }
  return s;
}

/// u at node k: B_k^T J_k^T N^{-1} e.
inline Vector control_input(const GramianReport& rep, const GramianSolve& solve, int k) {
  const auto ks = static_cast<std::size_t>(k);
  return rep.gains[ks].apply(Vector(rep.jacobians[ks].transpose() * solve.y));
}

/// u at an arbitrary time t from the path state x_t.
inline Vector control_input_at(const FlowMap& map, const GramianSolve& solve, const Vector& x_t, double t,
                               const ControlGain& gain, double T = 1.0, double fd_step = 1e-5) {
  const Matrix J = flow_jacobian(map, x_t, t, T, fd_step).J;
  return gain.apply(Vector(J.transpose() * solve.y));
}

/// |e|^2 / lambda_min; infinity when lambda_min <= 0.
inline double control_energy_bound(const GramianReport& rep, const Vector& e) {
  if (rep.lambda_min <= 0.0) return std::numeric_limits<double>::infinity();
  return e.squaredNorm() / rep.lambda_min;
}

/// Quadrature value of int |u|^2 dt for the node controls.
inline double control_energy(const GramianReport& rep, const GramianSolve& solve) {
  double e = 0.0;
  for (int k = 0; k < rep.nodes; ++k) e += rep.rule.w(k) * control_input(rep, solve, k).squaredNorm();
  return e;
}

/// Endpoint reached by applying the node controls through the variation of
/// constants: Phi^{t0,T}(x0) + sum_k w_k J_k B_k u_k.
inline Vector steer_endpoint(const GramianReport& rep, const GramianSolve& solve, const Vector& free_endpoint) {
  Vector x = free_endpoint;
  for (int k = 0; k < rep.nodes; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    x += rep.rule.w(k) * rep.jacobians[ks] * rep.gains[ks].apply(control_input(rep, solve, k));
  }
  return x;
}

/// v_C = v + B u.
inline Matrix controllable_field(const Matrix& v, const ControlGain& gain, const Matrix& u) {
  if (v.rows() != u.rows() || v.cols() != u.cols()) throw ConfigError("field/control shape mismatch");
  return v + gain.apply(u);
}

}  // namespace ctrlflow::control
