#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "ctrlflow/core/blob.hpp"
#include "ctrlflow/core/rng.hpp"
#include "ctrlflow/env/environment.hpp"
#include "ctrlflow/env/replay_buffer.hpp"
#include "ctrlflow/nn/optimizer.hpp"
#include "ctrlflow/nn/param_net.hpp"

namespace ctrlflow::agent {

using Eigen::Index;
using env::Transition;
using nn::Matrix;
using nn::RowVector;
using nn::Tape;
using nn::Var;
using nn::Vector;

struct SacConfig {
  std::vector<Index> hidden{64, 64};
  nn::Activation activation = nn::Activation::relu;
  double gamma = 0.99;
  /// Soft target update rate rho.
  double tau = 0.005;
  double init_alpha = 0.2;
  bool auto_alpha = true;
  /// Defaults to -d_a.
  std::optional<double> target_entropy;
  double log_std_min = -5.0;
  double log_std_max = 2.0;
  double reward_scale = 1.0;
  /// Actor and temperature update every n critic updates; 0 freezes both.
  int actor_every = 1;
  nn::AdamConfig actor_adam{3e-4};
  nn::AdamConfig critic_adam{3e-4};
  nn::AdamConfig alpha_adam{3e-4};

  void validate() const {
    if (hidden.empty()) throw ConfigError("SAC nets need at least one hidden layer");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("SAC gamma must lie in [0, 1)");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("soft update rate must lie in (0, 1]");
    if (!(init_alpha > 0.0)) throw ConfigError("initial temperature must be positive");
    if (!(log_std_max > log_std_min)) throw ConfigError("log-std bounds out of order");
    if (actor_every < 0) throw ConfigError("actor_every must be >= 0");
  }
};

/// Squashed-Gaussian draws for a batch of states with given standard normal
/// noise. Actions lie in (-1, 1).
struct PolicySample {
  Matrix action;
  RowVector log_prob;
  Matrix mean;
};

namespace detail {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

/// log(1 - tanh(u)^2) in a form that stays finite for large |u|.
inline double log_dtanh(double u) { return 2.0 * (std::numbers::ln2 - u - nn::detail::softplus(-2.0 * u)); }

}  // namespace detail

class SacAgent {
 public:
  SacAgent() = default;
  SacAgent(const env::EnvSpec& spec, const SacConfig& cfg, Rng& rng)
      : cfg_(cfg), d_s_(spec.d_s), d_a_(spec.d_a), low_(spec.action_low), high_(spec.action_high) {
    cfg_.validate();
    spec.validate();
    actor_ = nn::ParamNet::feedforward(d_s_, cfg_.hidden, 2 * d_a_, cfg_.activation, nn::Activation::identity, 0, rng);
    q1_ = nn::ParamNet::feedforward(d_s_ + d_a_, cfg_.hidden, 1, cfg_.activation, nn::Activation::identity, 0, rng);
    q2_ = nn::ParamNet::feedforward(d_s_ + d_a_, cfg_.hidden, 1, cfg_.activation, nn::Activation::identity, 0, rng);
    q1_target_ = q1_;
    q2_target_ = q2_;
    log_alpha_ = std::log(cfg_.init_alpha);
    actor_opt_ = nn::Adam(cfg_.actor_adam, actor_.parameter_count());
    q1_opt_ = nn::Adam(cfg_.critic_adam, q1_.parameter_count());
    q2_opt_ = nn::Adam(cfg_.critic_adam, q2_.parameter_count());
    alpha_opt_ = nn::Adam(cfg_.alpha_adam, 1);
  }

  const SacConfig& config() const { return cfg_; }
  int state_dim() const { return d_s_; }
  int action_dim() const { return d_a_; }
  double alpha() const { return std::exp(log_alpha_); }
  double log_alpha() const { return log_alpha_; }
  void set_log_alpha(double v) { log_alpha_ = v; }
  double target_entropy() const { return cfg_.target_entropy.value_or(-static_cast<double>(d_a_)); }
  long updates() const { return updates_; }

  nn::ParamNet& actor() { return actor_; }
  const nn::ParamNet& actor() const { return actor_; }
  nn::ParamNet& critic(int k) { return k == 0 ? q1_ : q2_; }
  const nn::ParamNet& critic(int k) const { return k == 0 ? q1_ : q2_; }
  const nn::ParamNet& target_critic(int k) const { return k == 0 ? q1_target_ : q2_target_; }
  nn::Adam& actor_optimizer() { return actor_opt_; }
  nn::Adam& critic_optimizer(int k) { return k == 0 ? q1_opt_ : q2_opt_; }
  nn::Adam& alpha_optimizer() { return alpha_opt_; }

  /// Environment units <-> the policy's (-1, 1) box.
  Vector to_env(const Vector& a) const {
    return low_ + ((a.array() + 1.0) * 0.5 * (high_ - low_).array()).matrix();
  }
  Vector to_unit(const Vector& a) const {
    Vector u(a.size());
    for (Index i = 0; i < a.size(); ++i) {
      const double w = high_(i) - low_(i);
      u(i) = w > 0.0 ? 2.0 * (a(i) - low_(i)) / w - 1.0 : 0.0;
    }
    return u;
  }

  /// Maps raw head outputs to the mean and the bounded log standard deviation.
  void split_head(const Matrix& out, Matrix& mean, Matrix& log_std) const {
    mean = out.topRows(d_a_);
    log_std = out.bottomRows(d_a_).unaryExpr([this](double r) {
      return cfg_.log_std_min + 0.5 * (cfg_.log_std_max - cfg_.log_std_min) * (std::tanh(r) + 1.0);
    });
  }

  PolicySample sample(const Matrix& S, const Matrix& E) const {
    if (S.rows() != d_s_ || E.rows() != d_a_ || E.cols() != S.cols()) throw ConfigError("policy input shape mismatch");
    Matrix mean, log_std;
    split_head(actor_.forward(S), mean, log_std);
    const Matrix u = mean.array() + log_std.array().exp() * E.array();
    PolicySample p;
    p.mean = mean.array().tanh();
    p.action = u.array().tanh();
    p.log_prob.resize(S.cols());
    for (Index j = 0; j < S.cols(); ++j) {
      double lp = 0.0;
      for (Index i = 0; i < d_a_; ++i) {
        lp += -0.5 * E(i, j) * E(i, j) - log_std(i, j) - detail::kHalfLog2Pi - detail::log_dtanh(u(i, j));
      }
      p.log_prob(j) = lp;
    }
    return p;
  }

  /// Stochastic action in environment units.
  Vector act(const Vector& s, Rng& rng) const {
    const Matrix E = rng.normal_matrix(d_a_, 1);
    return to_env(sample(Matrix(s), E).action.col(0));
  }

  /// Deterministic action tanh(mean) in environment units.
  Vector act_deterministic(const Vector& s) const {
    Matrix mean, log_std;
    split_head(actor_.forward(Matrix(s)), mean, log_std);
    return to_env(Vector(mean.col(0).array().tanh()));
  }

  RowVector q_min(const Matrix& SA, bool target) const {
    const nn::ParamNet& a = target ? q1_target_ : q1_;
    const nn::ParamNet& b = target ? q2_target_ : q2_;
    return a.forward(SA).cwiseMin(b.forward(SA));
  }

  /// theta_target <- (1 - rho) theta_target + rho theta.
  void soft_update() {
    const double rho = cfg_.tau;
    q1_target_.parameters() = (1.0 - rho) * q1_target_.parameters() + rho * q1_.parameters();
    q2_target_.parameters() = (1.0 - rho) * q2_target_.parameters() + rho * q2_.parameters();
  }

  void count_update() { ++updates_; }

  void save(BlobWriter& w, const std::string& prefix) const {
    w.put_ints(prefix + ".dims", {d_s_, d_a_, updates_});
    w.put_vector(prefix + ".low", low_);
    w.put_vector(prefix + ".high", high_);
    w.put_real(prefix + ".log_alpha", log_alpha_);
    actor_.save(w, prefix + ".actor");
    q1_.save(w, prefix + ".q1");
    q2_.save(w, prefix + ".q2");
    q1_target_.save(w, prefix + ".q1t");
    q2_target_.save(w, prefix + ".q2t");
    actor_opt_.save(w, prefix + ".opt_actor");
    q1_opt_.save(w, prefix + ".opt_q1");
    q2_opt_.save(w, prefix + ".opt_q2");
    alpha_opt_.save(w, prefix + ".opt_alpha");
  }

  /// Restores weights and optimizer state; the configuration comes from the
  /// caller.
  static SacAgent load(const BlobReader& r, const std::string& prefix, const SacConfig& cfg) {
    SacAgent a;
    a.cfg_ = cfg;
    const auto dims = r.get_ints(prefix + ".dims");
    if (dims.size() != 3) throw IoError("corrupt agent header " + prefix);
    a.d_s_ = static_cast<int>(dims[0]);
    a.d_a_ = static_cast<int>(dims[1]);
    a.updates_ = dims[2];
    a.low_ = r.get_vector(prefix + ".low");
    a.high_ = r.get_vector(prefix + ".high");
    a.log_alpha_ = r.get_real(prefix + ".log_alpha");
    a.actor_ = nn::ParamNet::load(r, prefix + ".actor");
    a.q1_ = nn::ParamNet::load(r, prefix + ".q1");
    a.q2_ = nn::ParamNet::load(r, prefix + ".q2");
    a.q1_target_ = nn::ParamNet::load(r, prefix + ".q1t");
    a.q2_target_ = nn::ParamNet::load(r, prefix + ".q2t");
    a.actor_opt_.load(r, prefix + ".opt_actor");
    a.q1_opt_.load(r, prefix + ".opt_q1");
    a.q2_opt_.load(r, prefix + ".opt_q2");
    a.alpha_opt_.load(r, prefix + ".opt_alpha");
    return a;
  }

 private:
  SacConfig cfg_;
  int d_s_ = 0;
  int d_a_ = 0;
  Vector low_, high_;
  nn::ParamNet actor_, q1_, q2_, q1_target_, q2_target_;
  double log_alpha_ = 0.0;
  nn::Adam actor_opt_, q1_opt_, q2_opt_, alpha_opt_;
  long updates_ = 0;
};

/// Transitions for one update with their provenance counts.
struct SacBatch {
  std::vector<Transition> items;
  int n_real = 0;
  int n_model = 0;
};

/// Draws round(ratio * n) transitions from the real buffer and the rest from
/// the model buffer. An empty or missing model buffer gives an all-real batch.
inline SacBatch mixed_batch(const env::ReplayBuffer& real, const env::ReplayBuffer* model, int n, double ratio,
                            Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mixture ratio must lie in [0, 1]");
  if (n < 1) throw ConfigError("SAC batch size must be >= 1");
  SacBatch b;
  const bool use_model = model != nullptr && model->valid_count() > 0;
  b.n_real = use_model ? static_cast<int>(std::lround(ratio * n)) : n;
  b.n_model = n - b.n_real;
  if (b.n_real > 0) b.items = real.sample_transitions(b.n_real, rng);
  if (use_model && b.n_model > 0) {
    std::vector<Transition> m = model->sample_transitions(b.n_model, rng);
    b.items.insert(b.items.end(), m.begin(), m.end());
  }
  return b;
}

/// Columns of the batch: states, unit-box actions, rewards, next states and
/// continuation masks (1 - done).
struct BatchMatrices {
  Matrix S, A, S2;
  RowVector r, not_done;
};

inline BatchMatrices batch_matrices(const SacAgent& agent, const std::vector<Transition>& items) {
  const Index B = static_cast<Index>(items.size());
  BatchMatrices m;
  m.S.resize(agent.state_dim(), B);
  m.A.resize(agent.action_dim(), B);
  m.S2.resize(agent.state_dim(), B);
  m.r.resize(B);
  m.not_done.resize(B);
  for (Index j = 0; j < B; ++j) {
    const Transition& tr = items[static_cast<std::size_t>(j)];
    m.S.col(j) = tr.state;
    m.A.col(j) = agent.to_unit(tr.action).cwiseMax(-1.0).cwiseMin(1.0);
    m.S2.col(j) = tr.next_state;
    m.r(j) = tr.reward;
    m.not_done(j) = tr.done ? 0.0 : 1.0;
  }
  return m;
}

/// y = c r + gamma (1 - d) (min_k Q'_k(s', a') - alpha log pi(a'|s')), with a'
/// drawn from the current policy using noise E.
inline RowVector critic_targets(const SacAgent& agent, const BatchMatrices& m, const Matrix& E) {
  const PolicySample next = agent.sample(m.S2, E);
  Matrix SA(m.S2.rows() + next.action.rows(), m.S2.cols());
  SA << m.S2, next.action;
  const RowVector soft_v = agent.q_min(SA, true) - agent.alpha() * next.log_prob;
  const SacConfig& c = agent.config();
  return (c.reward_scale * m.r.array() + c.gamma * m.not_done.array() * soft_v.array()).matrix();
}

/// mean_j (Q(s_j, a_j) - y_j)^2 for one critic.
inline Var critic_loss(Tape& tape, const nn::ParamNet& q, const Matrix& SA, const RowVector& y, Vector* sink) {
  const Var pred = q.forward(tape, tape.constant(SA), nullptr, sink);
  return nn::mean(nn::square(pred - tape.constant(y)));
}

/// Policy log-density on the tape for reparameterised draws with noise E.
struct ActorTerms {
  Var action;
  Var log_prob;
};

inline ActorTerms actor_terms(Tape& tape, const SacAgent& agent, const Matrix& S, const Matrix& E, Vector* sink) {
  const SacConfig& c = agent.config();
  const Index d_a = agent.action_dim();
  const Var out = agent.actor().forward(tape, tape.constant(S), nullptr, sink);
  const Var mean = nn::rows(out, 0, d_a);
  const Var log_std = nn::add_scalar(
      nn::scale(nn::add_scalar(nn::tanh(nn::rows(out, d_a, d_a)), 1.0), 0.5 * (c.log_std_max - c.log_std_min)),
      c.log_std_min);
  const Var u = mean + nn::cmul(nn::exp(log_std), tape.constant(E));
  const Matrix gauss = (-0.5 * E.array().square() - detail::kHalfLog2Pi).matrix();
  // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
  const Var log_dtanh =
      nn::scale(nn::add_scalar(nn::neg(u) - nn::softplus(nn::scale(u, -2.0)), std::numbers::ln2), 2.0);
  const Var per_dim = tape.constant(gauss) - log_std - log_dtanh;
  return {nn::tanh(u), nn::col_sum(per_dim)};
}

/// mean_j (alpha log pi(a_j|s_j) - min_k Q_k(s_j, a_j)); critics are held
/// fixed but the action path is differentiated through them.
inline Var actor_loss(Tape& tape, const SacAgent& agent, const Matrix& S, const Matrix& E, Vector* sink,
                      RowVector* log_prob = nullptr) {
  const ActorTerms a = actor_terms(tape, agent, S, E, sink);
  const Var sa = nn::vcat({tape.constant(S), a.action});
  const Var q = nn::cmin(agent.critic(0).forward(tape, sa, nullptr, nullptr),
                         agent.critic(1).forward(tape, sa, nullptr, nullptr));
  if (log_prob != nullptr) *log_prob = a.log_prob.value();
  return nn::mean(nn::scale(a.log_prob, agent.alpha()) - q);
}

/// -mean_j log_alpha (log pi_j + target entropy); log pi is detached.
inline double alpha_loss(double log_alpha, const RowVector& log_prob, double target_entropy) {
  return -log_alpha * (log_prob.array() + target_entropy).mean();
}
inline double alpha_loss_grad(const RowVector& log_prob, double target_entropy) {
  return -(log_prob.array() + target_entropy).mean();
}

struct SacStepReport {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double alpha_loss = 0.0;
  double alpha = 0.0;
  double q_mean = 0.0;
  double entropy = 0.0;
  int n_real = 0;
  int n_model = 0;
  bool actor_updated = false;
};

/// One SAC step: both critics, then (every `actor_every` steps) the actor and
/// the temperature, then the soft target update.
inline SacStepReport sac_update(SacAgent& agent, const SacBatch& batch, Rng& rng) {
  if (batch.items.empty()) throw ConfigError("empty SAC batch");
  const auto fail = [&](const char* what) {
    throw NumericOverflowError(std::string(what) + " is not finite (batch of " + std::to_string(batch.n_real) +
                                   " real and " + std::to_string(batch.n_model) + " model transitions)",
                               agent.updates());
  };
  const BatchMatrices m = batch_matrices(agent, batch.items);
  const Index B = m.S.cols();
  const Index d_a = agent.action_dim();
  SacStepReport rep;
  rep.n_real = batch.n_real;
  rep.n_model = batch.n_model;

  const RowVector y = critic_targets(agent, m, rng.normal_matrix(d_a, B));
  Matrix SA(m.S.rows() + d_a, B);
  SA << m.S, m.A;
  Vector g1 = Vector::Zero(agent.critic(0).parameter_count());
  Vector g2 = Vector::Zero(agent.critic(1).parameter_count());
  {
    Tape tape;
    const Var l1 = critic_loss(tape, agent.critic(0), SA, y, &g1);
    const Var l2 = critic_loss(tape, agent.critic(1), SA, y, &g2);
    const Var total = l1 + l2;
    rep.critic_loss = total.scalar();
    if (!std::isfinite(rep.critic_loss)) fail("critic loss");
    tape.backward(total);
    rep.q_mean = agent.critic(0).forward(SA).mean();
  }
  agent.critic_optimizer(0).step(agent.critic(0).parameters(), g1);
  agent.critic_optimizer(1).step(agent.critic(1).parameters(), g2);

  const int every = agent.config().actor_every;
  if (every > 0 && agent.updates() % every == 0) {
    const Matrix E = rng.normal_matrix(d_a, B);
    Vector ga = Vector::Zero(agent.actor().parameter_count());
    RowVector log_prob;
    Tape tape;
    const Var loss = actor_loss(tape, agent, m.S, E, &ga, &log_prob);
    rep.actor_loss = loss.scalar();
    if (!std::isfinite(rep.actor_loss)) fail("actor loss");
    tape.backward(loss);
    agent.actor_optimizer().step(agent.actor().parameters(), ga);
    rep.entropy = -log_prob.mean();
    rep.actor_updated = true;
    if (agent.config().auto_alpha) {
      rep.alpha_loss = alpha_loss(agent.log_alpha(), log_prob, agent.target_entropy());
      Vector la = Vector::Constant(1, agent.log_alpha());
      agent.alpha_optimizer().step(la, Vector::Constant(1, alpha_loss_grad(log_prob, agent.target_entropy())));
      agent.set_log_alpha(la(0));
    }
  }
  agent.soft_update();
  agent.count_update();
  rep.alpha = agent.alpha();
  return rep;
}

/// Deterministic-policy evaluation on a cloned environment stream. Returns
/// the undiscounted episode returns; no buffer is touched.
inline std::vector<double> evaluate_policy(const SacAgent& agent, const env::EnvSpec& spec, int episodes,
                                           std::uint64_t seed) {
  std::vector<double> out;
  env::Env e(spec, seed);
  for (int k = 0; k < episodes; ++k) {
    Vector s = e.reset();
    double ret = 0.0;
    bool truncated = false;
    while (!truncated) {
      const env::StepResult r = e.step(agent.act_deterministic(s), &truncated);
      ret += r.reward;
      s = r.next_state;
    }
    out.push_back(ret);
  }
  return out;
}

}  // namespace ctrlflow::agent
