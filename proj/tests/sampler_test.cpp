#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <gtest/gtest.h>

#include "ctrlflow/sampler/sampler.hpp"

namespace ctrlflow::sampler {
namespace {

flow::VectorFieldConfig tiny() {
  flow::VectorFieldConfig c;
  c.hidden = {16, 16};
  c.time_width = 4;
  return c;
}

EnvSpec wide_point_mass() {
  EnvSpec s = env::point_mass_2d();
  s.action_low = Vector::Constant(2, -1e9);
  s.action_high = Vector::Constant(2, 1e9);
  return s;
}

// Reward-only trajectories of length 1.
EnvSpec scalar_spec() {
  EnvSpec s;
  s.d_s = 0;
  s.d_a = 0;
  s.action_low = Vector(0);
  s.action_high = Vector(0);
  return s;
}

env::Trajectory rollout(const EnvSpec& spec, Rng& rng, int h) {
  env::Trajectory t;
  t.source = env::Source::environment;
  Vector s = env::reset(spec, rng);
  for (int i = 0; i < h; ++i) {
    const Vector a = rng.normal_matrix(spec.d_a, 1);
    const env::StepResult r = env::step(spec, s, a);
    t.transitions.push_back({s, env::clip_action(spec, a), r.reward, r.next_state});
    s = r.next_state;
  }
  return t;
}

TEST(Generate, ZeroFieldReturnsDenormalizedNoise) {
  Rng rng(1);
  const EnvSpec spec = wide_point_mass();
  flow::VectorFieldModel cfm(tiny(), 7, 4, rng);
  cfm.parameters().setZero();
  const env::Normalizer norm(Vector::LinSpaced(7, -1.0, 1.0), Vector::LinSpaced(7, 0.5, 2.0));
  SampleConfig cfg;
  cfg.h = 3;
  cfg.ode_steps = 1;
  cfg.batch_size = 4;
  Rng a(5), b(5);
  const GenResult r = generate({&cfm}, norm, spec, cfg, a);
  const Matrix noise = b.normal_matrix(21, 4);
  ASSERT_EQ(r.report.count, 4);
  for (int j = 0; j < 4; ++j) {
    const Matrix expect = norm.denormalize(Eigen::Map<const Matrix>(noise.col(j).data(), 7, 3));
    EXPECT_EQ(env::to_matrix(r.trajectories[static_cast<std::size_t>(j)]), expect);
    EXPECT_EQ(r.trajectories[static_cast<std::size_t>(j)].source, env::Source::model);
    EXPECT_FALSE(r.trajectories[static_cast<std::size_t>(j)].transitions.back().valid);
  }
}

TEST(Generate, TogglesOffMatchPlainFlowBitwise) {
  Rng rng(2);
  const EnvSpec spec = env::point_mass_2d();
  const flow::VectorFieldModel cfm(tiny(), 7, 5, rng);
  const control::ControlModel ctrl(tiny(), 7, 5, rng);
  const guidance::GuidanceBundle bundle(tiny(), 7, 5, rng);
  const env::Normalizer norm = env::Normalizer::identity(7);
  SampleConfig cfg;
  cfg.h = 4;
  cfg.batch_size = 8;
  Rng a(9), b(9), c(9);
  const GenResult off = generate({&cfm, &ctrl, &bundle}, norm, spec, cfg, a);
  const Matrix X1 = flow::advance(cfm.field(), b.normal_matrix(28, 8), 0.0, 1.0, {cfg.ode_steps, cfg.scheme});
  for (int j = 0; j < 8; ++j) {
    Matrix p = Eigen::Map<const Matrix>(X1.col(j).data(), 7, 4);
    env::Trajectory t = env::from_matrix(p, 4, 2);
    for (auto& tr : t.transitions) tr.action = env::clip_action(spec, tr.action);
    EXPECT_EQ(env::to_matrix(off.trajectories[static_cast<std::size_t>(j)]), env::to_matrix(t));
  }
  // Untrained control and guidance heads output zero, so turning them on
  // changes nothing either.
  cfg.control_on = cfg.guidance_on = true;
  const GenResult on = generate({&cfm, &ctrl, &bundle}, norm, spec, cfg, c);
  for (int j = 0; j < 8; ++j) {
    EXPECT_EQ(env::to_matrix(on.trajectories[static_cast<std::size_t>(j)]),
              env::to_matrix(off.trajectories[static_cast<std::size_t>(j)]));
  }
}

TEST(Generate, DeterministicForSameSeed) {
  Rng rng(3);
  const EnvSpec spec = env::pendulum();
  const flow::VectorFieldModel cfm(tiny(), 5, 6, rng);
  control::ControlModel ctrl(tiny(), 5, 6, rng);
  ctrl.net.parameters() = 0.1 * rng.normal_matrix(ctrl.net.parameter_count(), 1);
  SampleConfig cfg;
  cfg.h = 6;
  cfg.control_on = true;
  Rng a(4), b(4);
  const env::Normalizer norm = env::Normalizer::identity(5);
  const GenResult x = generate({&cfm, &ctrl}, norm, spec, cfg, a);
  const GenResult y = generate({&cfm, &ctrl}, norm, spec, cfg, b);
  ASSERT_EQ(x.trajectories.size(), y.trajectories.size());
  for (std::size_t i = 0; i < x.trajectories.size(); ++i) {
    EXPECT_EQ(env::to_matrix(x.trajectories[i]), env::to_matrix(y.trajectories[i]));
  }
  EXPECT_EQ(x.report.to_json(), y.report.to_json());
}

TEST(Generate, ActionsStayInBox) {
  Rng rng(5);
  const EnvSpec spec = env::point_mass_2d();
  flow::VectorFieldModel cfm(tiny(), 7, 8, rng);
  cfm.parameters() *= 20.0;
  SampleConfig cfg;
  cfg.h = 8;
  cfg.batch_size = 32;
  const GenResult r = generate({&cfm}, env::Normalizer::identity(7), spec, cfg, rng);
  long n = 0;
  for (const auto& t : r.trajectories) {
    for (const auto& tr : t.transitions) {
      EXPECT_TRUE((tr.action.array() >= spec.action_low.array()).all());
      EXPECT_TRUE((tr.action.array() <= spec.action_high.array()).all());
      ++n;
    }
  }
  EXPECT_EQ(n, 8 * 32);
}

TEST(Generate, NonFiniteSamplesAreRejected) {
  Rng rng(6);
  const EnvSpec spec = env::point_mass_2d();
  const flow::VectorFieldModel cfm(tiny(), 7, 2, rng);
  Vector sd = Vector::Ones(7);
  sd(0) = std::numeric_limits<double>::infinity();
  SampleConfig cfg;
  cfg.h = 2;
  cfg.batch_size = 5;
  const GenResult r = generate({&cfm}, env::Normalizer(Vector::Zero(7), sd), spec, cfg, rng);
  EXPECT_EQ(r.report.count, 0);
  EXPECT_EQ(r.report.rejected, 5);
  EXPECT_TRUE(r.trajectories.empty());
}

TEST(Generate, DivergingSamplesAreRejected) {
  Rng rng(15);
  const EnvSpec spec = env::point_mass_2d();
  flow::VectorFieldModel cfm(tiny(), 7, 1, rng);
  cfm.parameters() *= 1e3;
  SampleConfig cfg;
  cfg.h = 1;
  cfg.ode_steps = 50;
  cfg.batch_size = 16;
  cfg.scheme = flow::Scheme::euler;
  const GenResult r = generate({&cfm}, env::Normalizer::identity(7), spec, cfg, rng);
  EXPECT_EQ(r.report.count + r.report.rejected, 16);
  for (const auto& t : r.trajectories) EXPECT_TRUE(env::to_matrix(t).allFinite());
}

TEST(Generate, ConfigErrors) {
  Rng rng(7);
  const flow::VectorFieldModel cfm(tiny(), 7, 3, rng);
  const env::Normalizer norm = env::Normalizer::identity(7);
  SampleConfig cfg;
  cfg.h = 4;
  EXPECT_THROW(generate({&cfm}, norm, env::point_mass_2d(), cfg, rng), ConfigError);
  cfg.h = 2;
  cfg.ode_steps = 0;
  EXPECT_THROW(generate({&cfm}, norm, env::point_mass_2d(), cfg, rng), ConfigError);
  cfg.ode_steps = 5;
  cfg.control_on = true;
  EXPECT_THROW(generate({&cfm}, norm, env::point_mass_2d(), cfg, rng), ConfigError);
  cfg.control_on = false;
  EXPECT_THROW(generate({&cfm}, norm, env::pendulum(), cfg, rng), ConfigError);
}

TEST(Generate, RecoversConstantSequenceMean) {
  Rng rng(8);
  flow::VectorFieldConfig net;
  net.hidden = {64, 64};
  net.time_width = 8;
  flow::VectorFieldModel cfm(net, 1, 1, rng);
  flow::TrainCfmConfig tc;
  tc.epochs = 40;
  tc.batch_size = 64;
  tc.h_values = {1};
  tc.adam.lr = 3e-3;
  nn::Adam opt(tc.adam, cfm.parameter_count());
  const env::Normalizer norm(Vector::Constant(1, 2.0), Vector::Constant(1, 0.1));
  const flow::PayloadSource src = [&](int h, int n, Rng& r) {
    return norm.normalize(Matrix(2.0 + 0.1 * r.normal_matrix(h, n).array()));
  };
  flow::train_cfm(cfm, opt, src, tc, rng);
  SampleConfig cfg;
  cfg.h = 1;
  cfg.batch_size = 256;
  const GenResult r = generate({&cfm}, norm, scalar_spec(), cfg, rng);
  EXPECT_EQ(r.report.count, 256);
  EXPECT_NEAR(r.report.return_mean, 2.0, 0.1);
}

TEST(Generate, RewardRecomputation) {
  Rng rng(9);
  const EnvSpec spec = env::point_mass_2d();
  const flow::VectorFieldModel cfm(tiny(), 7, 3, rng);
  SampleConfig cfg;
  cfg.h = 3;
  cfg.batch_size = 4;
  cfg.recompute_rewards = true;
  const GenResult r = generate({&cfm}, env::Normalizer::identity(7), spec, cfg, rng);
  for (const auto& t : r.trajectories) {
    for (const auto& tr : t.transitions) EXPECT_EQ(tr.reward, env::step(spec, tr.state, tr.action).reward);
  }
}

TEST(Consistency, EnvironmentTrajectoriesAreExact) {
  Rng rng(10);
  for (const EnvSpec& spec : {env::point_mass_2d(), env::pendulum()}) {
    std::vector<env::Trajectory> trajs;
    for (int i = 0; i < 20; ++i) trajs.push_back(rollout(spec, rng, 10));
    const ConsistencyStats s = dynamics_consistency(trajs, spec);
    EXPECT_EQ(s.trajectories, 20);
    EXPECT_LE(s.residual_mean, 1e-12);
    EXPECT_NEAR(s.cosine_mean, 1.0, 1e-12);
  }
}

TEST(Consistency, RandomTrajectoriesAreUncorrelated) {
  Rng rng(11);
  const EnvSpec spec = env::point_mass_2d();
  std::vector<env::Trajectory> trajs;
  for (int i = 0; i < 1000; ++i) trajs.push_back(env::from_matrix(rng.normal_matrix(7, 5), 4, 2));
  const ConsistencyStats s = dynamics_consistency(trajs, spec);
  EXPECT_EQ(s.trajectories, 1000);
  EXPECT_LT(std::abs(s.cosine_mean), 0.1);
  EXPECT_GT(s.residual_mean, 0.5);
}

TEST(Consistency, SingleStepGeneratedTrajectoriesAreSkipped) {
  Rng rng(12);
  const ConsistencyStats s =
      dynamics_consistency({env::from_matrix(rng.normal_matrix(7, 1), 4, 2)}, env::point_mass_2d());
  EXPECT_EQ(s.trajectories, 0);
}

TEST(FillModelBuffer, Examples) {
  Rng rng(13);
  env::ReplayBuffer buf(12);
  EXPECT_EQ(fill_model_buffer(buf, {}), 0);
  const env::Trajectory t = env::from_matrix(rng.normal_matrix(7, 5), 4, 2);
  EXPECT_EQ(fill_model_buffer(buf, {t}), 5);
  EXPECT_EQ(buf.size(), 5);
  EXPECT_EQ(buf.at(0).state, t[0].state);
  long evicted = 0;
  EXPECT_EQ(fill_model_buffer(buf, {t, t}, &evicted), 10);
  EXPECT_EQ(buf.size(), 12);
  EXPECT_EQ(evicted, 3);
  EXPECT_EQ(buf.at(11).state, t[4].state);
}

TEST(Report, JsonAndCsv) {
  Rng rng(14);
  const EnvSpec spec = env::point_mass_2d();
  const flow::VectorFieldModel cfm(tiny(), 7, 3, rng);
  SampleConfig cfg;
  cfg.h = 3;
  cfg.batch_size = 6;
  const GenResult r = generate({&cfm}, env::Normalizer::identity(7), spec, cfg, rng);
  const nlohmann::json j = r.report.to_json();
  EXPECT_EQ(j["count"], 6);
  EXPECT_EQ(j["requested"], 6);
  EXPECT_TRUE(j.contains("cosine_mean"));
  const auto path = std::filesystem::temp_directory_path() / "ctrlflow_gen.csv";
  write_trajectories_csv(path.string(), r.trajectories, spec);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 1 + 18);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace ctrlflow::sampler
