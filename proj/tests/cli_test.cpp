#include <cstdio>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "ctrlflow/cli/ablate.hpp"
#include "ctrlflow/cli/config.hpp"
#include "ctrlflow/cli/oracle.hpp"

namespace ctrlflow::cli {
namespace {

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

TEST(RunConfig, DefaultsRoundTripThroughJson) {
  const json j = to_json(RunConfig{});
  EXPECT_EQ(to_json(from_json(j)), j);
  EXPECT_EQ(j["loop"]["rounds"], 20);
  EXPECT_EQ(j["sampler"]["scheme"], "midpoint");
  EXPECT_TRUE(j["agent"]["target_entropy"].is_null());
}

TEST(RunConfig, AbsentKeysKeepDefaults) {
  const RunConfig c = from_json(json::parse(R"({"cfm": {"epochs": 7}})"));
  EXPECT_EQ(c.loop.cfm.epochs, 7);
  EXPECT_EQ(c.loop.cfm.batch_size, RunConfig{}.loop.cfm.batch_size);
}

TEST(RunConfig, EveryLeafIsWritten) {
  // Changing each scalar leaf in the written tree must change the parsed
  // config, so no key is read without being materialized.
  const json base = to_json(RunConfig{});
  for (const auto& [section, body] : base.items()) {
    if (!body.is_object()) continue;
    for (const auto& [key, value] : body.items()) {
      if (!value.is_number()) continue;
      json j = base;
      j[section][key] = value.get<double>() + (value.is_number_integer() ? 1 : 0.5);
      EXPECT_NE(to_json(from_json(j)), base) << section << "." << key;
    }
  }
}

TEST(RunConfig, UnknownKeysAreRejectedWithPath) {
  EXPECT_NE(message_of([] { from_json(json::parse(R"({"cfm": {"epoks": 1}})")); }).find("cfm.epoks"),
            std::string::npos);
  EXPECT_NE(message_of([] { from_json(json::parse(R"({"bogus": 1})")); }).find("bogus"), std::string::npos);
  EXPECT_NE(message_of([] { from_json(json::parse(R"({"extra": {}})")); }).find("extra"), std::string::npos);
}

TEST(RunConfig, TypeErrorsNameTheKey) {
  EXPECT_NE(message_of([] { from_json(json::parse(R"({"loop": {"rounds": "many"}})")); }).find("loop.rounds"),
            std::string::npos);
  EXPECT_NE(message_of([] { from_json(json::parse(R"({"sampler": {"scheme": "rk5"}})")); }).find("rk4"),
            std::string::npos);
  EXPECT_THROW(from_json(json::parse(R"({"env": 3})")), ConfigError);
}

TEST(RunConfig, ParseErrorsCarryLineAndColumn) {
  const std::string msg = message_of([] { parse_config_text("{\n  // note\n  \"a\": ,\n}", "x.json"); });
  EXPECT_NE(msg.find("x.json:3:"), std::string::npos) << msg;
}

TEST(RunConfig, CommentsAreAllowed) {
  const json j = parse_config_text("// head\n{\"seed\": 4 /* inline */}");
  EXPECT_EQ(from_json(j).loop.seed, 4u);
}

TEST(RunConfig, EnvironmentOverridesScalars) {
  json j = json::object();
  apply_env_overrides(j, {"CTRLFLOW__cfm__epochs=9", "CTRLFLOW__seed=12", "CTRLFLOW__env__name=pendulum",
                          "CTRLFLOW__sampler__control=true", "PATH=/bin"});
  const RunConfig c = from_json(j);
  EXPECT_EQ(c.loop.cfm.epochs, 9);
  EXPECT_EQ(c.loop.seed, 12u);
  EXPECT_EQ(c.env, "pendulum");
  EXPECT_TRUE(c.loop.sample.control_on);
  EXPECT_THROW(apply_env_overrides(j, {"CTRLFLOW__net__hidden=[1,2]"}), ConfigError);
}

TEST(RunConfig, ValidationCatchesBadValues) {
  RunConfig c;
  c.threads = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.env = "cartpole";
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.goal = {1.0};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunConfig, EnvSectionShapesTheSpec) {
  RunConfig c;
  c.horizon = 30;
  c.goal = {0.0, 1.0};
  c.gamma = 0.9;
  const env::EnvSpec s = c.env_spec();
  EXPECT_EQ(s.horizon, 30);
  EXPECT_EQ(s.goal.y(), 1.0);
  EXPECT_EQ(c.loop_config().sac.gamma, 0.9);
}

TEST(RunConfig, LoadConfigReadsFileAndOverrides) {
  const std::string path = testing::TempDir() + "cfg_test.json";
  std::ofstream(path) << "{\"loop\": {\"rounds\": 2}}";
  const RunConfig c = load_config(path, {"CTRLFLOW__loop__warmup_steps=5"});
  EXPECT_EQ(c.loop.rounds, 2);
  EXPECT_EQ(c.loop.warmup_steps, 5);
  EXPECT_THROW(load_config(path + ".missing", {}), ConfigError);
  std::filesystem::remove(path);
}

TEST(Oracle, RowComparison) {
  EXPECT_TRUE(make_row("a", 1.0, 2.0, true).pass);
  EXPECT_FALSE(make_row("a", 3.0, 2.0, true).pass);
  EXPECT_TRUE(make_row("a", 3.0, 2.0, false).pass);
  EXPECT_FALSE(make_row("a", std::nan(""), 2.0, true).pass);
  EXPECT_FALSE(all_pass({}));
}

TEST(Oracle, AnalyticSuitesPass) {
  for (const auto& rows : {lti_suite(), voc_suite(), steering_suite(), gramian_suite()}) {
    for (const OracleRow& r : rows) EXPECT_TRUE(r.pass) << r.name << " = " << r.measured;
  }
}

TEST(Ablate, ProgressThresholdAndMedian) {
  std::vector<agent::RoundMetrics> rows(4);
  rows[0].eval_return_mean = -50.0;
  rows[1].eval_return_mean = -30.0;
  rows[2].eval_return_mean = -20.0;
  rows[3].eval_return_mean = -20.0;
  // R_final over the last three rounds is -70/3.
  EXPECT_NEAR(progress_threshold(rows), -50.0 + 0.9 * (-70.0 / 3.0 + 50.0), 1e-12);
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_TRUE(std::isinf(EfficiencyRow{}.ratio()));
}

TEST(Ablate, RandomDataFillsWholeEpisodes) {
  const env::EnvSpec spec = env::point_mass_2d();
  const env::ReplayBuffer b = random_data(spec, 3, 1);
  EXPECT_EQ(b.valid_count(), 3 * spec.horizon);
}

}  // namespace
}  // namespace ctrlflow::cli
