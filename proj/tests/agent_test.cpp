#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "ctrlflow/agent/dyna.hpp"
#include "ctrlflow/nn/gradcheck.hpp"

namespace ctrlflow::agent {
namespace {

SacConfig smooth_sac() {
  SacConfig c;
  c.hidden = {16, 16};
  c.activation = nn::Activation::silu;
  return c;
}

std::vector<Transition> random_transitions(const env::EnvSpec& spec, int n, Rng& rng) {
  std::vector<Transition> out;
  for (int i = 0; i < n; ++i) {
    const Vector s = env::reset(spec, rng);
    Vector a(spec.d_a);
    for (Index k = 0; k < a.size(); ++k) a(k) = rng.uniform(spec.action_low(k), spec.action_high(k));
    const env::StepResult r = env::step(spec, s, a);
    out.push_back({s, a, r.reward, r.next_state, false, true});
  }
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- SacAgent

TEST(SacAgent, SoftUpdateTracksCritics) {
  Rng rng(1);
  SacConfig cfg = smooth_sac();
  cfg.tau = 0.3;
  SacAgent agent(env::point_mass_2d(), cfg, rng);
  for (int k = 0; k < 2; ++k) agent.critic(k).parameters() += Vector::Ones(agent.critic(k).parameter_count());
  const Vector old0 = agent.target_critic(0).parameters();
  const Vector old1 = agent.target_critic(1).parameters();
  agent.soft_update();
  EXPECT_EQ((agent.target_critic(0).parameters() - (0.7 * old0 + 0.3 * agent.critic(0).parameters())).norm(), 0.0);
  EXPECT_EQ((agent.target_critic(1).parameters() - (0.7 * old1 + 0.3 * agent.critic(1).parameters())).norm(), 0.0);
}

TEST(SacAgent, SampledActionsStayInOpenBox) {
  Rng rng(2);
  const env::EnvSpec spec = env::point_mass_2d();
  SacAgent agent(spec, smooth_sac(), rng);
  agent.actor().parameters() *= 50.0;
  const Matrix S = 100.0 * rng.normal_matrix(4, 500);
  const PolicySample p = agent.sample(S, 10.0 * rng.normal_matrix(2, 500));
  EXPECT_TRUE(p.log_prob.allFinite());
  EXPECT_LE(p.action.cwiseAbs().maxCoeff(), 1.0);
  for (int j = 0; j < 50; ++j) {
    const Vector a = agent.act(S.col(j), rng);
    EXPECT_TRUE(((a - spec.action_low).array() >= 0.0).all());
    EXPECT_TRUE(((spec.action_high - a).array() >= 0.0).all());
  }
}

TEST(SacAgent, UnitBoxMapsRoundTrip) {
  Rng rng(3);
  env::EnvSpec spec = env::pendulum();
  SacAgent agent(spec, smooth_sac(), rng);
  Vector a(1);
  a << 1.5;
  EXPECT_NEAR(agent.to_unit(a)(0), 0.75, 1e-15);
  EXPECT_NEAR(agent.to_env(agent.to_unit(a))(0), 1.5, 1e-15);
}

TEST(SacAgent, LogProbMatchesDensityOfSquashedDraw) {
  // Finite-difference density of the squashed draw in one dimension.
  Rng rng(4);
  env::EnvSpec spec = env::pendulum();
  SacAgent agent(spec, smooth_sac(), rng);
  const Matrix S = rng.normal_matrix(3, 1);
  for (double e : {-1.3, 0.0, 0.7, 2.1}) {
    Matrix E(1, 1);
    E << e;
    const double d = 1e-6;
    Matrix Ep = E, Em = E;
    Ep(0, 0) += d;
    Em(0, 0) -= d;
    const double da_de = (agent.sample(S, Ep).action(0, 0) - agent.sample(S, Em).action(0, 0)) / (2 * d);
    const double oracle = -0.5 * e * e - 0.5 * std::log(2 * std::numbers::pi) - std::log(da_de);
    EXPECT_NEAR(agent.sample(S, E).log_prob(0), oracle, 1e-6);
  }
}

TEST(SacAgent, CheckpointRoundTrip) {
  Rng rng(5);
  const env::EnvSpec spec = env::point_mass_2d();
  SacAgent agent(spec, smooth_sac(), rng);
  SacBatch b;
  b.items = random_transitions(spec, 32, rng);
  b.n_real = 32;
  sac_update(agent, b, rng);
  BlobWriter w;
  agent.save(w, "a");
  const SacAgent back = SacAgent::load(BlobReader::parse(w.str()), "a", smooth_sac());
  EXPECT_EQ(back.actor(), agent.actor());
  EXPECT_EQ(back.target_critic(1), agent.target_critic(1));
  EXPECT_EQ(back.log_alpha(), agent.log_alpha());
  EXPECT_EQ(back.updates(), 1);
}

// ---------------------------------------------------------------- gradients

TEST(SacGradient, CriticLossMatchesFiniteDifferences) {
  const env::EnvSpec spec = env::point_mass_2d();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    SacAgent agent(spec, smooth_sac(), rng);
    const BatchMatrices m = batch_matrices(agent, random_transitions(spec, 8, rng));
    const RowVector y = critic_targets(agent, m, rng.normal_matrix(2, 8));
    Matrix SA(6, 8);
    SA << m.S, m.A;
    nn::ParamNet q = agent.critic(0);
    Vector g = Vector::Zero(q.parameter_count());
    Tape tape;
    tape.backward(critic_loss(tape, q, SA, y, &g));
    const auto loss = [&](const Vector& p) {
      nn::ParamNet c = q;
      c.parameters() = p;
      Tape t;
      return critic_loss(t, c, SA, y, nullptr).scalar();
    };
    EXPECT_LE(nn::check_gradient(loss, q.parameters(), g).relative_error, 1e-4) << "seed " << seed;
  }
}

TEST(SacGradient, ActorLossMatchesFiniteDifferences) {
  const env::EnvSpec spec = env::point_mass_2d();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(200 + seed);
    SacAgent agent(spec, smooth_sac(), rng);
    const Matrix S = rng.normal_matrix(4, 8);
    const Matrix E = rng.normal_matrix(2, 8);
    Vector g = Vector::Zero(agent.actor().parameter_count());
    Tape tape;
    tape.backward(actor_loss(tape, agent, S, E, &g));
    const Vector base = agent.actor().parameters();
    const auto loss = [&](const Vector& p) {
      SacAgent a = agent;
      a.actor().parameters() = p;
      Tape t;
      return actor_loss(t, a, S, E, nullptr).scalar();
    };
    EXPECT_LE(nn::check_gradient(loss, base, g).relative_error, 1e-4) << "seed " << seed;
  }
}

TEST(SacGradient, ActorLossValueMatchesPlainEvaluation) {
  Rng rng(6);
  SacAgent agent(env::point_mass_2d(), smooth_sac(), rng);
  const Matrix S = rng.normal_matrix(4, 16);
  const Matrix E = rng.normal_matrix(2, 16);
  const PolicySample p = agent.sample(S, E);
  Matrix SA(6, 16);
  SA << S, p.action;
  const double naive = (agent.alpha() * p.log_prob - agent.q_min(SA, false)).mean();
  Tape tape;
  RowVector lp;
  EXPECT_NEAR(actor_loss(tape, agent, S, E, nullptr, &lp).scalar(), naive, 1e-12);
  EXPECT_LE((lp - p.log_prob).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SacGradient, TemperatureLossMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(300 + seed);
    const RowVector lp = rng.normal_matrix(1, 16);
    const double target = -2.0;
    const Vector x = Vector::Constant(1, rng.normal());
    const Vector g = Vector::Constant(1, alpha_loss_grad(lp, target));
    const auto loss = [&](const Vector& p) { return alpha_loss(p(0), lp, target); };
    EXPECT_LE(nn::check_gradient(loss, x, g).relative_error, 1e-4) << "seed " << seed;
  }
}

// ---------------------------------------------------------------- sac_update

// Zero-reward single-state MDP with a frozen policy and temperature: the
// critics converge to the entropy-only value gamma alpha H / (1 - gamma),
// where H is the entropy of the squashed Gaussian.
TEST(SacUpdate, EntropyOnlyFixedPoint) {
  env::EnvSpec spec = env::pendulum();
  spec.d_s = 1;
  const double gamma = 0.9, alpha = 0.02, sigma = 1.0, mu = 0.3;
  SacConfig cfg;
  cfg.hidden = {32, 32};
  cfg.gamma = gamma;
  cfg.tau = 0.05;
  cfg.init_alpha = alpha;
  cfg.auto_alpha = false;
  cfg.actor_every = 0;
  cfg.critic_adam.lr = 1e-3;
  Rng rng(7);
  SacAgent agent(spec, cfg, rng);
  Vector& ap = agent.actor().parameters();
  ap.setZero();
  const double raw = std::atanh((std::log(sigma) - cfg.log_std_min) / (0.5 * (cfg.log_std_max - cfg.log_std_min)) - 1.0);
  ap(ap.size() - 2) = mu;
  ap(ap.size() - 1) = raw;

  // Oracle: H = H_gauss + E[log(1 - tanh(u)^2)], u ~ N(mu, sigma^2), by
  // trapezoid quadrature.
  const double h_gauss = 0.5 * std::log(2 * std::numbers::pi * std::numbers::e * sigma * sigma);
  const int n = 20000;
  const double lo = mu - 12 * sigma, hi = mu + 12 * sigma, du = (hi - lo) / n;
  double expect = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double u = lo + i * du;
    const double pdf = std::exp(-0.5 * (u - mu) * (u - mu) / (sigma * sigma)) / (sigma * std::sqrt(2 * std::numbers::pi));
    const double th = std::tanh(u);
    expect += (i == 0 || i == n ? 0.5 : 1.0) * pdf * std::log(1.0 - th * th) * du;
  }
  const double q_star = gamma * alpha * (h_gauss + expect) / (1.0 - gamma);

  const auto batch = [&](int size) {
    SacBatch b;
    for (int i = 0; i < size; ++i) {
      Vector a(1);
      a << rng.uniform(-2.0, 2.0);
      b.items.push_back({Vector::Zero(1), a, 0.0, Vector::Zero(1), false, true});
    }
    b.n_real = size;
    return b;
  };
  for (int k = 0; k < 3000; ++k) sac_update(agent, batch(256), rng);

  const SacBatch test = batch(4096);
  const BatchMatrices m = batch_matrices(agent, test.items);
  Matrix SA(2, m.S.cols());
  SA << m.S, m.A;
  const RowVector y = critic_targets(agent, m, rng.normal_matrix(1, m.S.cols()));
  double loss = 0.0;
  for (int k = 0; k < 2; ++k) {
    Tape tape;
    loss += critic_loss(tape, agent.critic(k), SA, y, nullptr).scalar();
  }
  EXPECT_LE(loss, 1e-3);
  EXPECT_NEAR(agent.critic(0).forward(SA).mean(), q_star, 0.01 * std::max(1.0, std::abs(q_star)));
  EXPECT_NEAR(agent.critic(1).forward(SA).mean(), q_star, 0.01 * std::max(1.0, std::abs(q_star)));
}

TEST(SacUpdate, SameSeedGivesIdenticalTrace) {
  const env::EnvSpec spec = env::point_mass_2d();
  const auto trace = [&] {
    Rng rng(8);
    SacAgent agent(spec, smooth_sac(), rng);
    env::ReplayBuffer buf(1000);
    for (const Transition& t : random_transitions(spec, 200, rng)) buf.add(t);
    std::vector<double> out;
    for (int k = 0; k < 20; ++k) {
      const SacStepReport r = sac_update(agent, mixed_batch(buf, nullptr, 32, 1.0, rng), rng);
      out.insert(out.end(), {r.critic_loss, r.actor_loss, r.alpha_loss, r.alpha});
    }
    return out;
  };
  EXPECT_EQ(trace(), trace());
}

TEST(SacUpdate, TemperatureMovesTowardTargetEntropy) {
  Rng rng(9);
  const env::EnvSpec spec = env::point_mass_2d();
  SacConfig cfg = smooth_sac();
  cfg.alpha_adam.lr = 1e-2;
  SacAgent agent(spec, cfg, rng);
  SacBatch b;
  b.items = random_transitions(spec, 64, rng);
  b.n_real = 64;
  const double before = agent.log_alpha();
  const SacStepReport r = sac_update(agent, b, rng);
  // Entropy above target -> temperature falls, and vice versa.
  if (r.entropy > agent.target_entropy()) {
    EXPECT_LT(agent.log_alpha(), before);
  } else {
    EXPECT_GT(agent.log_alpha(), before);
  }
}

TEST(SacUpdate, NonFiniteLossReportsProvenance) {
  Rng rng(10);
  const env::EnvSpec spec = env::point_mass_2d();
  SacAgent agent(spec, smooth_sac(), rng);
  SacBatch b;
  b.items = random_transitions(spec, 6, rng);
  b.items[4].reward = std::numeric_limits<double>::infinity();
  b.n_real = 4;
  b.n_model = 2;
  try {
    sac_update(agent, b, rng);
    FAIL() << "expected a numeric error";
  } catch (const NumericOverflowError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("4 real"), std::string::npos) << what;
    EXPECT_NE(what.find("2 model"), std::string::npos) << what;
  }
  EXPECT_EQ(agent.updates(), 0);
}

TEST(MixedBatch, RatioOneIsAllReal) {
  Rng rng(11);
  const env::EnvSpec spec = env::point_mass_2d();
  env::ReplayBuffer real(100), model(100);
  for (const Transition& t : random_transitions(spec, 50, rng)) real.add(t);
  for (Transition t : random_transitions(spec, 50, rng)) {
    t.reward = 1e6;
    model.add(t);
  }
  const SacBatch b = mixed_batch(real, &model, 64, 1.0, rng);
  EXPECT_EQ(b.n_real, 64);
  EXPECT_EQ(b.n_model, 0);
  for (const Transition& t : b.items) EXPECT_LT(t.reward, 1e5);
}

TEST(MixedBatch, ModelFractionMatchesRatio) {
  Rng rng(12);
  const env::EnvSpec spec = env::point_mass_2d();
  env::ReplayBuffer real(100), model(100);
  for (const Transition& t : random_transitions(spec, 50, rng)) real.add(t);
  for (Transition t : random_transitions(spec, 50, rng)) {
    t.reward = 1e6;
    model.add(t);
  }
  for (double ratio : {0.0, 0.25, 0.5, 0.33, 0.9}) {
    for (int n : {1, 7, 64, 255}) {
      const SacBatch b = mixed_batch(real, &model, n, ratio, rng);
      int from_model = 0;
      for (const Transition& t : b.items) from_model += t.reward > 1e5 ? 1 : 0;
      EXPECT_EQ(from_model, b.n_model);
      EXPECT_EQ(static_cast<int>(b.items.size()), n);
      EXPECT_LE(std::abs(from_model - (1.0 - ratio) * n), 1.0) << ratio << " " << n;
    }
  }
}

TEST(MixedBatch, EmptyModelBufferFallsBackToReal) {
  Rng rng(13);
  env::ReplayBuffer real(100), model(100);
  for (const Transition& t : random_transitions(env::point_mass_2d(), 10, rng)) real.add(t);
  const SacBatch b = mixed_batch(real, &model, 16, 0.5, rng);
  EXPECT_EQ(b.n_real, 16);
  EXPECT_THROW(mixed_batch(real, &model, 16, 1.5, rng), ConfigError);
}

// ---------------------------------------------------------------- total loss

TEST(TotalLoss, Examples) {
  EXPECT_EQ(total_loss({0, 0, 0, 0}, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(total_loss({1, 2, 3, 4}, 0.5), 6.5);
  EXPECT_DOUBLE_EQ(total_loss({1, 2, 3, 4}, 0.0), 3.0);
}

// ---------------------------------------------------------------- loop

LoopConfig tiny_loop(bool generation) {
  LoopConfig c;
  c.seed = 3;
  c.rounds = 4;
  c.warmup_steps = 100;
  c.env_steps_per_round = 60;
  c.sac_updates_per_round = 10;
  c.sac_batch = 32;
  c.eval_episodes = 2;
  c.generation = generation;
  c.gen_trajectories = 8;
  c.energy_segments = 16;
  c.sac = smooth_sac();
  c.flow_net.hidden = {16};
  c.flow_net.time_width = 4;
  c.cfm.epochs = 2;
  c.cfm.steps_per_epoch = 2;
  c.cfm.batch_size = 16;
  c.control.epochs = 1;
  c.control.steps_per_epoch = 1;
  c.control.batch_size = 4;
  c.control.quad_nodes = 3;
  c.control.rollout = {3, flow::Scheme::midpoint};
  c.control.jacobian_flow = {3, flow::Scheme::midpoint};
  c.guidance.epochs = 1;
  c.guidance.steps_per_epoch = 2;
  c.guidance.batch_size = 16;
  c.sample.h = 3;
  c.sample.ode_steps = 4;
  c.sample.control_on = generation;
  c.sample.guidance_on = generation;
  return c;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("ctrlflow_agent_" + name);
  std::filesystem::remove_all(p);
  return p;
}

TEST(LoopConfig, RejectsBadValues) {
  LoopConfig c = tiny_loop(true);
  c.mixture_ratio = 1.2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_loop(true);
  c.zeta = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_loop(true);
  c.beta = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.sample.guidance_on = false;
  EXPECT_NO_THROW(c.validate());
}

TEST(Dyna, GenerationOffMatchesStandaloneBaseline) {
  const LoopConfig cfg = tiny_loop(false);
  const env::EnvSpec spec = env::point_mass_2d();
  const std::vector<RoundMetrics> a = run_dyna(cfg, spec).metrics;
  const std::vector<RoundMetrics> b = run_sac_baseline(cfg, spec);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].row(), b[i].row()) << "round " << i;
  EXPECT_GT(a.back().updates, 0);
}

TEST(Dyna, FullLoopProducesArtifacts) {
  const auto dir = fresh_dir("artifacts");
  const LoopConfig cfg = tiny_loop(true);
  const nlohmann::json snap = {{"seed", cfg.seed}};
  const DynaResult r = run_dyna(cfg, env::point_mass_2d(), dir.string(), false, &snap);
  ASSERT_EQ(r.metrics.size(), 4u);
  EXPECT_EQ(r.env_steps, 240);
  // Models train once warm-up data exists: rounds 0 (60 steps) has none.
  EXPECT_EQ(r.metrics[0].gen.count, 0);
  EXPECT_EQ(r.metrics[3].gen.requested, 8);
  EXPECT_GT(r.metrics[3].parts.cfm, 0.0);
  EXPECT_GT(r.metrics[3].lambda_min_mean, 0.0);
  EXPECT_GT(r.metrics[3].model_fraction, 0.0);
  EXPECT_DOUBLE_EQ(r.metrics[3].total, total_loss(r.metrics[3].parts, cfg.zeta));
  EXPECT_TRUE(std::filesystem::exists(dir / "config.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "reports" / "round_0003.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "latest.ckpt"));
  const std::string csv = slurp((dir / "metrics.csv").string());
  EXPECT_EQ(csv.substr(0, csv.find('\n')), RoundMetrics::csv_header());
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(Dyna, EvaluationLeavesBuffersAlone) {
  DynaRun run(tiny_loop(true), env::point_mass_2d());
  run.run();
  EXPECT_EQ(run.real_buffer().size(), run.env_steps());
  EXPECT_EQ(run.model_buffer().size(), 3 * 8 * 3);  // rounds 1-3, h = 3
}

TEST(Dyna, SameSeedIsBitwiseIdentical) {
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  run_dyna(tiny_loop(true), env::point_mass_2d(), a.string());
  run_dyna(tiny_loop(true), env::point_mass_2d(), b.string());
  EXPECT_EQ(slurp((a / "metrics.csv").string()), slurp((b / "metrics.csv").string()));
}

TEST(Dyna, ResumeReproducesRemainderBitwise) {
  const auto full = fresh_dir("resume_full"), part = fresh_dir("resume_part");
  const LoopConfig cfg = tiny_loop(true);
  run_dyna(cfg, env::point_mass_2d(), full.string());
  {
    DynaRun run(cfg, env::point_mass_2d(), part.string());
    run.run(3);
    EXPECT_EQ(run.round(), 3);
  }
  const DynaResult r = run_dyna(cfg, env::point_mass_2d(), part.string(), true);
  EXPECT_EQ(r.metrics.size(), 4u);
  EXPECT_EQ(slurp((full / "metrics.csv").string()), slurp((part / "metrics.csv").string()));
  EXPECT_EQ(slurp(DynaRun::checkpoint_path(full.string())), slurp(DynaRun::checkpoint_path(part.string())));
}

TEST(Dyna, ResumeWithoutCheckpointNamesThePath) {
  const auto dir = fresh_dir("missing");
  try {
    run_dyna(tiny_loop(false), env::point_mass_2d(), dir.string(), true);
    FAIL() << "expected an io error";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("latest.ckpt"), std::string::npos);
  }
}

TEST(Dyna, PretrainedModelSeedsModelBufferBeforeWarmup) {
  const auto src = fresh_dir("pretrain_src");
  LoopConfig a = tiny_loop(true);
  a.sample.control_on = a.sample.guidance_on = false;
  run_dyna(a, env::point_mass_2d(), src.string());

  env::EnvSpec b_spec = env::point_mass_2d();
  b_spec.goal = Eigen::Vector2d(0.0, 1.0);
  LoopConfig b = a;
  b.seed = 9;
  b.rounds = 1;
  b.pretrained = DynaRun::checkpoint_path(src.string());
  b.sample.recompute_rewards = true;
  DynaRun run(b, b_spec);
  EXPECT_TRUE(run.has_model());
  const RoundMetrics m = run.step_round();
  EXPECT_EQ(m.gen.count + m.gen.rejected, 8);
  EXPECT_GT(run.model_buffer().size(), 0);
  // Rewards follow task B.
  for (long i = 0; i < run.model_buffer().size(); ++i) {
    const Transition t = run.model_buffer().at(i);
    EXPECT_DOUBLE_EQ(t.reward, env::step(b_spec, t.state, t.action).reward);
  }
}

TEST(Dyna, StageErrorLeavesResumableCheckpoint) {
  const auto dir = fresh_dir("abort");
  LoopConfig cfg = tiny_loop(false);
  cfg.rounds = 2;
  env::EnvSpec broken = env::point_mass_2d();
  broken.noise_std = 1e308;
  {
    DynaRun run(cfg, broken, dir.string());
    EXPECT_THROW(run.step_round(), EnvironmentFault);
    EXPECT_EQ(run.round(), 0);
  }
  ASSERT_TRUE(std::filesystem::exists(DynaRun::checkpoint_path(dir.string())));
  const DynaResult resumed = run_dyna(cfg, env::point_mass_2d(), dir.string(), true);
  const DynaResult fresh = run_dyna(cfg, env::point_mass_2d());
  ASSERT_EQ(resumed.metrics.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(resumed.metrics[i].row(), fresh.metrics[i].row());
}

}  // namespace
}  // namespace ctrlflow::agent
