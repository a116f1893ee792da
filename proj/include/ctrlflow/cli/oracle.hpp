#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ctrlflow/agent/dyna.hpp"
#include "ctrlflow/nn/gradcheck.hpp"

namespace ctrlflow::cli {

using Eigen::Index;
using nn::Matrix;
using nn::RowVector;
using nn::Vector;

/// One measured check: pass means `measured <op> tolerance`.
struct OracleRow {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool upper = true;  ///< true: measured <= tolerance, false: measured >= tolerance
  bool pass = false;
  double seconds = 0.0;
};

inline OracleRow make_row(std::string name, double measured, double tolerance, bool upper, double seconds = 0.0) {
  OracleRow r{std::move(name), measured, tolerance, upper, false, seconds};
  r.pass = std::isfinite(measured) && (upper ? measured <= tolerance : measured >= tolerance);
  return r;
}

inline bool all_pass(const std::vector<OracleRow>& rows) {
  return !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const OracleRow& r) { return r.pass; });
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

namespace oracle_detail {

using control::Field;
using control::FlowMap;
using nn::Tape;
using nn::Var;

inline flow::VectorFieldConfig small_ff() {
  flow::VectorFieldConfig c;
  c.hidden = {16, 16};
  c.time_width = 4;
  return c;
}

inline flow::VectorFieldConfig small_attention() {
  flow::VectorFieldConfig c = small_ff();
  c.architecture = nn::Architecture::mini_attention;
  c.attention.model_width = 8;
  c.attention.heads = 2;
  c.attention.ff_width = 8;
  c.attention.pos_width = 4;
  return c;
}

inline Field linear_field(const Matrix& A) {
  return [A](const Matrix& X, double) { return Matrix(A * X); };
}

inline Field pendulum_field() {
  return [](const Matrix& X, double) {
    Matrix out(X.rows(), X.cols());
    for (Index i = 0; i + 1 < X.rows(); i += 2) {
      out.row(i) = X.row(i + 1);
      out.row(i + 1) = -X.row(i).array().sin();
    }
    return out;
  };
}

inline std::vector<Vector> path_states(const FlowMap& map, const Vector& x0, const control::QuadratureRule& rule) {
  std::vector<Vector> out;
  for (Index k = 0; k < rule.t.size(); ++k) out.push_back(map.advance(x0, 0.0, rule.t(k)));
  return out;
}

inline std::vector<control::ControlGain> diagonal_gains(Rng& rng, Index D, int K) {
  std::vector<control::ControlGain> gains;
  for (int k = 0; k < K; ++k) {
    control::ControlGain g;
    g.mode = control::GainMode::diagonal;
    g.diag = rng.normal_matrix(D, 1);
    gains.push_back(g);
  }
  return gains;
}

/// Worst relative gradient error of `one(seed)` over `seeds` seeds.
inline OracleRow worst_over_seeds(const std::string& name, int seeds, const std::function<double(int)>& one) {
  Stopwatch sw;
  double worst = 0.0;
  for (int s = 0; s < seeds; ++s) worst = std::max(worst, one(s));
  return make_row(name, worst, 1e-4, true, sw.seconds());
}

inline std::vector<agent::Transition> random_transitions(const env::EnvSpec& spec, int n, Rng& rng) {
  std::vector<agent::Transition> out;
  for (int i = 0; i < n; ++i) {
    const Vector s = env::reset(spec, rng);
    Vector a(spec.d_a);
    for (Index k = 0; k < a.size(); ++k) a(k) = rng.uniform(spec.action_low(k), spec.action_high(k));
    const env::StepResult r = env::step(spec, s, a);
    out.push_back({s, a, r.reward, r.next_state, false, true});
  }
  return out;
}

inline double energy_distance(const Matrix& x, const Matrix& y) {
  auto mean_dist = [](const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (Index i = 0; i < a.cols(); ++i) {
      for (Index j = 0; j < b.cols(); ++j) s += (a.col(i) - b.col(j)).norm();
    }
    return s / static_cast<double>(a.cols() * b.cols());
  };
  return 2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y);
}

}  // namespace oracle_detail

/// Analytic gradients of every training loss against central differences.
inline std::vector<OracleRow> gradient_suite(int seeds = 10) {
  using namespace oracle_detail;
  std::vector<OracleRow> rows;
  const std::vector<flow::VectorFieldConfig> nets{small_ff(), small_attention()};

  rows.push_back(worst_over_seeds("grad.cfm", seeds, [&](int s) {
    double worst = 0.0;
    for (const auto& cfg : nets) {
      Rng rng(100 + s);
      flow::VectorFieldModel m(cfg, 3, 4, rng);
      const flow::PathBatch b = flow::make_path_batch(rng.normal_matrix(3 * (1 + s % 4), 5), rng, 0.01);
      const flow::LossGrad lg = flow::cfm_loss(m, b);
      auto f = [&](const Vector& p) {
        flow::VectorFieldModel m2 = m;
        m2.parameters() = p;
        return flow::cfm_loss(m2, b).value;
      };
      worst = std::max(worst, nn::check_gradient(f, m.parameters(), lg.grad).relative_error);
    }
    return worst;
  }));

  rows.push_back(worst_over_seeds("grad.kl", seeds, [&](int s) {
    double worst = 0.0;
    for (const auto& cfg : nets) {
      Rng rng(200 + s);
      flow::VectorFieldModel m(cfg, 2, 3, rng);
      const Matrix tau1 = rng.normal_matrix(6, 8), tau0 = rng.normal_matrix(6, 8);
      Tape tape;
      Vector grad = Vector::Zero(m.parameter_count());
      tape.backward(flow::kl_endpoint_regularizer(tape, m, tau1, tau0, 1e-4, &grad).value);
      auto f = [&](const Vector& p) {
        flow::VectorFieldModel m2 = m;
        m2.parameters() = p;
        Tape t2;
        return flow::kl_endpoint_regularizer(t2, m2, tau1, tau0, 1e-4, nullptr).value.scalar();
      };
      worst = std::max(worst, nn::check_gradient(f, m.parameters(), grad).relative_error);
    }
    return worst;
  }));

  rows.push_back(worst_over_seeds("grad.control", seeds, [&](int s) {
    Rng rng(300 + s);
    const flow::VectorFieldModel cfm(small_ff(), 3, 3, rng);
    control::ControlModel ctrl(small_ff(), 3, 3, rng, 1.5);
    ctrl.net.parameters() = 0.3 * rng.normal_matrix(ctrl.net.parameter_count(), 1);
    control::TrainControlConfig cfg;
    cfg.rollout = {4, s % 2 == 0 ? flow::Scheme::midpoint : flow::Scheme::rk4};
    cfg.gain.mode = control::GainMode::constant;
    cfg.gain.constant = 0.7;
    const int h = 1 + s % 3;
    const Matrix X0 = rng.normal_matrix(3 * h, 5), tau1 = rng.normal_matrix(3 * h, 5);
    Tape tape;
    Vector grad = Vector::Zero(ctrl.net.parameter_count());
    tape.backward(control::control_loss(tape, cfm, ctrl, X0, tau1, 0.3, cfg, {}, &grad));
    auto f = [&](const Vector& p) {
      control::ControlModel c2 = ctrl;
      c2.net.parameters() = p;
      Tape t2;
      return control::control_loss(t2, cfm, c2, X0, tau1, 0.3, cfg, {}, nullptr).scalar();
    };
    return nn::check_gradient(f, ctrl.net.parameters(), grad).relative_error;
  }));

  auto guidance_error = [&](int s, bool z_head) {
    double worst = 0.0;
    for (const auto& cfg : nets) {
      Rng rng(400 + s);
      guidance::GuidanceBundle b(cfg, 3, 3, rng);
      b.G.parameters() = 0.5 * rng.normal_matrix(b.G.parameter_count(), 1);
      const guidance::GuidanceBatch batch = guidance::make_guidance_batch(
          rng.normal_matrix(3 * (1 + s % 3), 6), RowVector(rng.normal_matrix(1, 6)), rng, 0.01);
      Tape tape;
      Vector gg = Vector::Zero(b.G.parameter_count()), gz = Vector::Zero(b.Z.parameter_count());
      const guidance::GuidanceLoss l = guidance::guidance_losses(tape, b, batch, &gg, &gz);
      tape.backward(l.g + l.z);
      auto f = [&](const Vector& p) {
        guidance::GuidanceBundle c = b;
        (z_head ? c.Z : c.G).parameters() = p;
        Tape t;
        const guidance::GuidanceLoss lc = guidance::guidance_losses(t, c, batch, nullptr, nullptr);
        return (z_head ? lc.z : lc.g).scalar();
      };
      const Vector& x = (z_head ? b.Z : b.G).parameters();
      worst = std::max(worst, nn::check_gradient(f, x, z_head ? gz : gg).relative_error);
    }
    return worst;
  };
  rows.push_back(worst_over_seeds("grad.guidance_g", seeds, [&](int s) { return guidance_error(s, false); }));
  rows.push_back(worst_over_seeds("grad.guidance_z", seeds, [&](int s) { return guidance_error(s, true); }));

  agent::SacConfig sac;
  sac.hidden = {16, 16};
  sac.activation = nn::Activation::silu;
  const env::EnvSpec spec = env::point_mass_2d();
  rows.push_back(worst_over_seeds("grad.sac_critic", seeds, [&](int s) {
    Rng rng(500 + s);
    agent::SacAgent a(spec, sac, rng);
    const agent::BatchMatrices m = agent::batch_matrices(a, random_transitions(spec, 8, rng));
    const RowVector y = agent::critic_targets(a, m, rng.normal_matrix(2, 8));
    Matrix SA(6, 8);
    SA << m.S, m.A;
    const nn::ParamNet q = a.critic(0);
    Vector g = Vector::Zero(q.parameter_count());
    Tape tape;
    tape.backward(agent::critic_loss(tape, q, SA, y, &g));
    auto f = [&](const Vector& p) {
      nn::ParamNet c = q;
      c.parameters() = p;
      Tape t;
      return agent::critic_loss(t, c, SA, y, nullptr).scalar();
    };
    return nn::check_gradient(f, q.parameters(), g).relative_error;
  }));
  rows.push_back(worst_over_seeds("grad.sac_actor", seeds, [&](int s) {
    Rng rng(600 + s);
    agent::SacAgent a(spec, sac, rng);
    const Matrix S = rng.normal_matrix(4, 8), E = rng.normal_matrix(2, 8);
    Vector g = Vector::Zero(a.actor().parameter_count());
    Tape tape;
    tape.backward(agent::actor_loss(tape, a, S, E, &g));
    auto f = [&](const Vector& p) {
      agent::SacAgent b = a;
      b.actor().parameters() = p;
      Tape t;
      return agent::actor_loss(t, b, S, E, nullptr).scalar();
    };
    return nn::check_gradient(f, a.actor().parameters(), g).relative_error;
  }));
  rows.push_back(worst_over_seeds("grad.sac_temperature", seeds, [&](int s) {
    Rng rng(700 + s);
    const RowVector lp = rng.normal_matrix(1, 16);
    const Vector x = Vector::Constant(1, rng.normal());
    const Vector g = Vector::Constant(1, agent::alpha_loss_grad(lp, -2.0));
    return nn::check_gradient([&](const Vector& p) { return agent::alpha_loss(p(0), lp, -2.0); }, x, g)
        .relative_error;
  }));
  return rows;
}

/// Gramian and minimum energy of linear systems against closed forms.
inline std::vector<OracleRow> lti_suite() {
  using namespace oracle_detail;
  std::vector<OracleRow> rows;
  Stopwatch sw;
  // With A = 0, W_c = T B B^T.
  double worst = 0.0;
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 1 + trial % 4, m = 1 + trial % 3;
    const Matrix B = rng.normal_matrix(n, m);
    const double T = rng.uniform(0.5, 3.0);
    const Matrix W = control::lti_gramian({Matrix::Zero(n, n), B, T});
    worst = std::max(worst, (W - T * B * B.transpose()).cwiseAbs().maxCoeff());
  }
  rows.push_back(make_row("lti.gramian_zero_drift", worst, 1e-8, true, sw.seconds()));

  Stopwatch sw2;
  double rel = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    Matrix A = 0.5 * rng.normal_matrix(2, 2);
    Matrix B(2, 1);
    B << 0, 1;
    A(1, 0) += 1.0;
    A(0, 1) = 1.0;
    const control::LtiSystem sys{A, B, 2.0};
    const Vector target = rng.normal_matrix(2, 1);
    const auto u = control::lti_min_energy_control(sys, target);
    const int n = 4000;
    const double dt = sys.T / n;
    Vector x = Vector::Zero(2);
    double energy = 0.0;
    auto f = [&](const Vector& y, double t) { return Vector(A * y + B * u(t)); };
    for (int k = 0; k < n; ++k) {
      const double t = k * dt;
      const Vector k1 = f(x, t), k2 = f(x + 0.5 * dt * k1, t + 0.5 * dt);
      const Vector k3 = f(x + 0.5 * dt * k2, t + 0.5 * dt), k4 = f(x + dt * k3, t + dt);
      x += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
      energy += dt / 6.0 * (u(t).squaredNorm() + 4 * u(t + 0.5 * dt).squaredNorm() + u(t + dt).squaredNorm());
    }
    const double predicted = control::lti_min_energy(sys, target);
    rel = std::max(rel, std::abs(energy - predicted) / predicted);
    rel = std::max(rel, (x - target).norm() / target.norm());
  }
  rows.push_back(make_row("lti.min_energy_relative", rel, 0.01, true, sw2.seconds()));
  return rows;
}

/// Variation-of-constants residuals on linear and pendulum fields.
inline std::vector<OracleRow> voc_suite() {
  using namespace oracle_detail;
  std::vector<OracleRow> rows;
  Stopwatch sw;
  Rng rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix M = 0.8 * rng.normal_matrix(3, 3);
    const Vector b1 = rng.normal_matrix(3, 1), b2 = 2.0 * rng.normal_matrix(3, 1);
    control::VocConfig cfg;
    cfg.breakpoints = {0.4};
    auto b = [&](double t) { return t < 0.4 ? b1 : b2; };
    worst = std::max(worst, control::variation_of_constants_check(linear_field(M), rng.normal_matrix(3, 1), b, 0.0,
                                                                  1.0, cfg)
                                .residual);
  }
  rows.push_back(make_row("voc.linear_residual", worst, 1e-4, true, sw.seconds()));

  Stopwatch sw2;
  Vector x0(2), dir(2);
  x0 << 1.0, 0.2;
  dir << 0.6, 0.8;
  auto residual = [&](double mag) {
    return control::variation_of_constants_check(pendulum_field(), x0, [&](double) { return Vector(mag * dir); })
        .residual;
  };
  const double r1 = residual(1e-2), r2 = residual(5e-3);
  rows.push_back(make_row("voc.pendulum_residual", r1, 1e-3, true, sw2.seconds()));
  rows.push_back(make_row("voc.halving_ratio", r1 / r2, 2.0, false));
  return rows;
}

/// Steering with the Gramian control and the energy bound.
inline std::vector<OracleRow> steering_suite() {
  using namespace oracle_detail;
  std::vector<OracleRow> rows;
  Stopwatch sw;
  Rng rng(9);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix A = 0.3 * rng.normal_matrix(3, 3);
    const FlowMap m{linear_field(A), {100, flow::Scheme::rk4}};
    const control::QuadratureRule rule = control::make_quadrature(8, control::QuadratureKind::gauss_legendre);
    const Vector x0 = rng.normal_matrix(3, 1), target = rng.normal_matrix(3, 1);
    const control::ControlGain gain = control::ControlGain::uniform(1.0, 3);
    const control::GramianReport rep = control::nonlinear_gramian(
        m, path_states(m, x0, rule), std::vector<control::ControlGain>(8, gain), rule);
    const control::GramianSolve s = control::solve_gramian(rep, target - m.advance(x0, 0.0, 1.0));
    // Integrate x' = A x + u(t) with u from the Jacobian of the flow at t.
    const int n = 100;
    const double dt = 1.0 / n;
    auto f = [&](const Vector& x, double t) {
      return Vector(A * x + control::control_input_at(m, s, x, t, gain));
    };
    Vector x = x0;
    for (int k = 0; k < n; ++k) {
      const double t = k * dt;
      const Vector k1 = f(x, t), k2 = f(x + 0.5 * dt * k1, t + 0.5 * dt);
      const Vector k3 = f(x + 0.5 * dt * k2, t + 0.5 * dt), k4 = f(x + dt * k3, t + dt);
      x += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    worst = std::max(worst, (x - target).norm());
  }
  rows.push_back(make_row("steer.endpoint_error", worst, 1e-3, true, sw.seconds()));

  Stopwatch sw2;
  double ratio = 0.0;
  int used = 0;
  for (int trial = 0; used < 100 && trial < 1000; ++trial) {
    const Matrix A = rng.normal_matrix(3, 3);
    const FlowMap m{linear_field(A), {20, flow::Scheme::midpoint}};
    const control::QuadratureRule rule = control::make_quadrature(8);
    const control::GramianReport rep =
        control::nonlinear_gramian(m, path_states(m, rng.normal_matrix(3, 1), rule), diagonal_gains(rng, 3, 8), rule);
    if (rep.lambda_min <= control::kEpsPd) continue;
    const Vector e = rng.normal_matrix(3, 1);
    const control::GramianSolve s = control::solve_gramian(rep, e);
    ratio = std::max(ratio, control::control_energy(rep, s) / control::control_energy_bound(rep, e));
    ++used;
  }
  rows.push_back(make_row("steer.energy_over_bound", ratio, 1.01, true, sw2.seconds()));
  rows.push_back(make_row("steer.psd_instances", used, 100, false));
  return rows;
}

/// Nonlinear Gramian on linear fields and its structural properties.
inline std::vector<OracleRow> gramian_suite() {
  using namespace oracle_detail;
  std::vector<OracleRow> rows;
  Stopwatch sw;
  Rng rng(7);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix A = 0.3 * rng.normal_matrix(3, 3);
    const double b = rng.uniform(0.5, 1.5);
    const FlowMap m{linear_field(A), {200, flow::Scheme::rk4}};
    for (auto [kind, nodes] : {std::pair{control::QuadratureKind::midpoint, 32},
                               std::pair{control::QuadratureKind::gauss_legendre, 8}}) {
      const control::QuadratureRule rule = control::make_quadrature(nodes, kind);
      const control::GramianReport rep = control::nonlinear_gramian(
          m, path_states(m, rng.normal_matrix(3, 1), rule),
          std::vector<control::ControlGain>(static_cast<std::size_t>(nodes), control::ControlGain::uniform(b, 3)),
          rule);
      const Matrix W = control::lti_gramian({A, b * Matrix::Identity(3, 3), 1.0});
      worst = std::max(worst, (rep.N - W).cwiseAbs().maxCoeff());
    }
  }
  rows.push_back(make_row("gramian.linear_vs_lti", worst, 1e-3, true, sw.seconds()));

  Stopwatch sw2;
  double asym = 0.0, min_eig = std::numeric_limits<double>::infinity();
  int violations = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const FlowMap m{pendulum_field(), {40, flow::Scheme::midpoint}};
    const control::QuadratureRule rule = control::make_quadrature(8);
    const control::GramianReport rep =
        control::nonlinear_gramian(m, path_states(m, rng.normal_matrix(4, 1), rule), diagonal_gains(rng, 4, 8), rule);
    asym = std::max(asym, (rep.N - rep.N.transpose()).cwiseAbs().maxCoeff());
    min_eig = std::min(min_eig, rep.lambda_min);
    const double slack = 1e-8 * std::max(1.0, rep.lambda_max);
    for (int i = 0; i < 100; ++i) {
      const Vector d = rng.normal_matrix(4, 1);
      const double q = d.dot(rep.N * d), n2 = d.squaredNorm();
      if (rep.lambda_min * n2 > q + slack * n2 || q > rep.lambda_max * n2 + slack * n2) ++violations;
    }
  }
  const double t2 = sw2.seconds();
  rows.push_back(make_row("gramian.asymmetry", asym, 1e-10, true, t2));
  rows.push_back(make_row("gramian.lambda_min", min_eig, -1e-8, false));
  rows.push_back(make_row("gramian.sandwich_violations", violations, 0, true));
  return rows;
}

/// Flow matching on a 2-D Gaussian mixture and a 1-D constant-sequence task.
inline std::vector<OracleRow> distribution_suite() {
  using namespace oracle_detail;
  std::vector<OracleRow> rows;
  Stopwatch sw;
  {
    Rng rng(19);
    const flow::PayloadSource mixture = [](int h, int n, Rng& r) {
      Matrix x(2 * h, n);
      for (Index j = 0; j < n; ++j) {
        const double c = r.uniform() < 0.5 ? -1.5 : 1.5;
        for (Index i = 0; i < x.rows(); ++i) x(i, j) = r.normal(c, 0.3);
      }
      return x;
    };
    flow::VectorFieldConfig vc;
    vc.hidden = {64, 64};
    flow::VectorFieldModel m(vc, 2, 1, rng);
    const Matrix held_out = mixture(1, 400, rng);
    const double before = energy_distance(flow::sample_endpoints(m, 1, 400, rng), held_out);
    nn::Adam opt({3e-3}, m.parameter_count());
    flow::TrainCfmConfig cfg;
    cfg.epochs = 60;
    cfg.steps_per_epoch = 10;
    cfg.batch_size = 128;
    flow::train_cfm(m, opt, mixture, cfg, rng);
    const double after = energy_distance(flow::sample_endpoints(m, 1, 400, rng), held_out);
    rows.push_back(make_row("dist.mixture_energy_reduction", before / std::max(after, 1e-300), 10.0, false,
                            sw.seconds()));
  }
  Stopwatch sw2;
  {
    Rng rng(18);
    flow::VectorFieldConfig vc;
    vc.hidden = {64, 64};
    flow::VectorFieldModel m(vc, 1, 4, rng);
    nn::Adam opt({3e-3}, m.parameter_count());
    flow::TrainCfmConfig cfg;
    cfg.epochs = 40;
    cfg.steps_per_epoch = 10;
    const flow::PayloadSource src = [](int h, int n, Rng& r) {
      Matrix x(h, n);
      for (Index j = 0; j < n; ++j) x.col(j).setConstant(r.normal(2.0, 0.1));
      return x;
    };
    flow::train_cfm(m, opt, src, cfg, rng);
    const Matrix x = flow::sample_endpoints(m, 4, 256, rng);
    rows.push_back(make_row("dist.constant_mean_error", std::abs(x.mean() - 2.0), 0.1, true, sw2.seconds()));
  }
  return rows;
}

/// Energy-tilted sampling of N(0, 1) under J(x) = -b x, target N(b, 1).
inline std::vector<OracleRow> tilted_suite() {
  std::vector<OracleRow> rows;
  std::uint64_t seed = 31;
  for (double b : {0.5, 1.0}) {
    Stopwatch sw;
    const guidance::TiltedResult r = guidance::tilted_gaussian_check(b, seed++);
    const std::string tag = "tilted.b" + std::string(b == 0.5 ? "0.5" : "1.0");
    rows.push_back(make_row(tag + ".mean_error", r.mean_error, 0.05, true, sw.seconds()));
    rows.push_back(make_row(tag + ".variance_error", r.variance_error, 0.1, true));
  }
  return rows;
}

struct OracleSuite {
  const char* name;
  std::function<std::vector<OracleRow>()> run;
};

inline std::vector<OracleSuite> oracle_suites() {
  return {{"gradients", [] { return gradient_suite(); }},
          {"lti", lti_suite},
          {"voc", voc_suite},
          {"steering", steering_suite},
          {"gramian", gramian_suite},
          {"distribution", distribution_suite},
          {"tilted", tilted_suite}};
}

}  // namespace ctrlflow::cli
