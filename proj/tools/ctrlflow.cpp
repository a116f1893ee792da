#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctrlflow/cli/ablate.hpp"
#include "ctrlflow/cli/config.hpp"
#include "ctrlflow/cli/oracle.hpp"

namespace {

using namespace ctrlflow;
using cli::RunConfig;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitOracle = 3;

struct Common {
  std::string config;
  std::string output_dir;
  int threads = 0;
  long long seed = -1;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (c.config.empty()) {
    nlohmann::json j = cli::to_json(cfg);
    cli::apply_env_overrides(j, cli::process_environment());
    cfg = cli::from_json(j);
  } else {
    cfg = cli::load_config(c.config);
  }
  if (!c.output_dir.empty()) cfg.output_dir = c.output_dir;
  if (c.threads > 0) cfg.threads = c.threads;
  if (c.seed >= 0) cfg.loop.seed = static_cast<std::uint64_t>(c.seed);
  cfg.validate();
  set_thread_cap(cfg.threads);
  return cfg;
}

void write_snapshot(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.output_dir);
  std::ofstream out(cfg.output_dir + "/config.json");
  if (!out) throw IoError("cannot write " + cfg.output_dir + "/config.json");
  out << cli::to_json(cfg).dump(2) << '\n';
}

std::string models_path(const RunConfig& cfg) { return cfg.output_dir + "/models.ckpt"; }

/// Stage file: the model section of a run checkpoint plus the training data.
struct Stage {
  agent::ModelSet models;
  env::ReplayBuffer data{1, 1};

  static Stage load(const std::string& path) {
    if (!std::filesystem::exists(path)) throw IoError("missing checkpoint " + path);
    const BlobReader r = BlobReader::load(path);
    Stage s;
    s.models = agent::ModelSet::load(r);
    s.data = env::ReplayBuffer::load(r, "data");
    return s;
  }

  void save(const std::string& path) const {
    BlobWriter w;
    models.save(w);
    data.save(w, "data");
    w.save(path);
  }
};

int train_cfm(const Common& c, int episodes, const std::string& from_run) {
  RunConfig cfg = resolve(c);
  const env::EnvSpec spec = cfg.env_spec();
  agent::LoopConfig loop = cfg.loop_config();
  write_snapshot(cfg);
  Stage st;
  if (from_run.empty()) {
    st.data = cli::random_data(spec, episodes, loop.seed);
  } else {
    const std::string path = agent::DynaRun::checkpoint_path(from_run);
    if (!std::filesystem::exists(path)) throw IoError("missing checkpoint " + path);
    st.data = env::ReplayBuffer::load(BlobReader::load(path), "benv");
  }
  Rng rng(loop.seed, 4);
  st.models.norm = env::Normalizer::fit(st.data);
  loop.sample.control_on = loop.sample.guidance_on = false;
  st.models.ensure(loop, env::step_features(spec), rng);
  const flow::CfmReport rep = st.models.train_flow(st.data, loop, rng);
  rep.write_csv(cfg.output_dir + "/cfm_curve.csv");
  st.save(models_path(cfg));
  std::printf("trained flow model on %ld transitions; final CFM loss %.6g; wrote %s\n", st.data.valid_count(),
              rep.epochs.empty() ? 0.0 : rep.epochs.back().cfm_loss, models_path(cfg).c_str());
  return kExitOk;
}

int train_control(const Common& c) {
  RunConfig cfg = resolve(c);
  const env::EnvSpec spec = cfg.env_spec();
  agent::LoopConfig loop = cfg.loop_config();
  Stage st = Stage::load(models_path(cfg));
  write_snapshot(cfg);
  Rng rng(loop.seed, 7);
  loop.sample.control_on = true;
  loop.sample.guidance_on = false;
  st.models.ensure(loop, env::step_features(spec), rng);
  const control::ControlReport rep = st.models.train_control(st.data, loop, spec, rng);
  rep.write_csv(cfg.output_dir + "/control_curve.csv");
  st.save(models_path(cfg));
  const control::ControlEpoch last = rep.epochs.empty() ? control::ControlEpoch{} : rep.epochs.back();
  std::printf("trained control model; loss %.6g, endpoint error %.6g, lambda_min %.6g; wrote %s\n", last.loss,
              last.endpoint_error, last.lambda_min, models_path(cfg).c_str());
  return kExitOk;
}

int train_guidance(const Common& c) {
  RunConfig cfg = resolve(c);
  const env::EnvSpec spec = cfg.env_spec();
  agent::LoopConfig loop = cfg.loop_config();
  Stage st = Stage::load(models_path(cfg));
  write_snapshot(cfg);
  Rng rng(loop.seed, 8);
  loop.sample.control_on = false;
  loop.sample.guidance_on = true;
  st.models.ensure(loop, env::step_features(spec), rng);
  const guidance::GuidanceReport rep = st.models.train_guidance(st.data, loop, spec, rng);
  rep.write_csv(cfg.output_dir + "/guidance_curve.csv");
  st.save(models_path(cfg));
  const guidance::GuidanceEpoch last = rep.epochs.empty() ? guidance::GuidanceEpoch{} : rep.epochs.back();
  std::printf("trained guidance model; L_G %.6g, L_Z %.6g, mean weight %.6g; wrote %s\n", last.loss_g, last.loss_z,
              last.mean_weight, models_path(cfg).c_str());
  return kExitOk;
}

int run_dyna(const Common& c, bool resume, bool dry_run) {
  const RunConfig cfg = resolve(c);
  const nlohmann::json snapshot = cli::to_json(cfg);
  if (dry_run) {
    std::cout << snapshot.dump(2) << '\n';
    return kExitOk;
  }
  const agent::DynaResult res = agent::run_dyna(cfg.loop_config(), cfg.env_spec(), cfg.output_dir, resume, &snapshot);
  if (!res.metrics.empty()) {
    const agent::RoundMetrics& m = res.metrics.back();
    std::printf("finished %zu rounds, %ld env steps; last eval return %.4f +- %.4f; metrics in %s/metrics.csv\n",
                res.metrics.size(), res.env_steps, m.eval_return_mean, m.eval_return_std, cfg.output_dir.c_str());
  }
  return kExitOk;
}

int eval(const Common& c, const std::string& run_dir, int episodes, int trajectories) {
  const RunConfig cfg = resolve(c);
  const std::string dir = run_dir.empty() ? cfg.output_dir : run_dir;
  const std::string path = agent::DynaRun::checkpoint_path(dir);
  if (!std::filesystem::exists(path)) throw IoError("missing checkpoint " + path);
  const BlobReader r = BlobReader::load(path);
  const env::EnvSpec spec = cfg.env_spec();
  const agent::LoopConfig loop = cfg.loop_config();
  const agent::SacAgent a = agent::SacAgent::load(r, "agent", loop.sac);
  const std::vector<double> ret = agent::evaluate_policy(a, spec, episodes, agent::eval_seed(loop.seed, 1 << 20));
  const auto [mean, sd] = sampler::mean_std(ret);
  nlohmann::json out = {{"checkpoint", path}, {"episodes", episodes}, {"return_mean", mean}, {"return_std", sd}};
  const agent::ModelSet models = agent::ModelSet::load(r);
  if (models.cfm && models.norm && trajectories > 0) {
    sampler::SampleConfig sc = loop.sample;
    sc.batch_size = trajectories;
    sc.control_on = sc.control_on && models.ctrl.has_value();
    sc.guidance_on = sc.guidance_on && models.bundle.has_value();
    control::GainConfig gain = loop.control.gain;
    gain.gamma = spec.gamma;
    const sampler::Models m(&*models.cfm, models.ctrl ? &*models.ctrl : nullptr,
                            models.bundle ? &*models.bundle : nullptr, gain);
    Rng rng(loop.seed, 9);
    out["generation"] = sampler::generate(m, *models.norm, spec, sc, rng).report.to_json();
  }
  std::cout << out.dump(2) << '\n';
  return kExitOk;
}

void print_rows(const std::vector<cli::OracleRow>& rows) {
  for (const cli::OracleRow& r : rows) {
    std::printf("%-32s %-5s measured %-12.4g %s %-10.4g (%.1fs)\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                r.measured, r.upper ? "<=" : ">=", r.tolerance, r.seconds);
  }
  std::fflush(stdout);
}

int oracle(int threads, const std::vector<std::string>& only) {
  set_thread_cap(threads > 0 ? threads : 1);
  bool ok = true;
  int ran = 0;
  for (const cli::OracleSuite& s : cli::oracle_suites()) {
    if (!only.empty() && std::find(only.begin(), only.end(), s.name) == only.end()) continue;
    std::printf("== %s\n", s.name);
    const std::vector<cli::OracleRow> rows = s.run();
    print_rows(rows);
    ok = ok && cli::all_pass(rows);
    ++ran;
  }
  if (ran == 0) throw ConfigError("no oracle suite matches the requested names");
  std::printf("%s\n", ok ? "all oracle suites passed" : "oracle failures present");
  return ok ? kExitOk : kExitOracle;
}

int ablate(const Common& c, const std::string& preset, int seeds) {
  const RunConfig cfg = resolve(c);
  const env::EnvSpec spec = cfg.env_spec();
  const agent::LoopConfig loop = cfg.loop_config();
  write_snapshot(cfg);
  const std::string csv = cfg.output_dir + "/ablate_" + preset + ".csv";
  if (preset == "gen-length") {
    std::vector<cli::LengthStudyRow> rows;
    for (int s = 0; s < seeds; ++s) {
      for (int h : {2, 5, 8, 10, 30, 50}) {
        if (h > spec.horizon) throw ConfigError("generation length " + std::to_string(h) + " exceeds the horizon");
        rows.push_back(cli::length_run(loop, spec, h, loop.seed + static_cast<std::uint64_t>(s)));
        std::printf("%s\n", rows.back().row().c_str());
        std::fflush(stdout);
      }
    }
    cli::write_rows_csv(csv, rows);
  } else if (preset == "control" || preset == "guidance") {
    cli::ModelStudyConfig mc;
    mc.net = loop.flow_net;
    mc.cfm = loop.cfm;
    mc.cfm.kl_weight = loop.kl_weight;
    mc.control = loop.control;
    mc.guidance = loop.guidance;
    mc.control_alpha = loop.control_alpha;
    mc.beta = loop.beta;
    mc.lambda_j = loop.lambda_j;
    mc.energy_segments = loop.energy_segments;
    mc.ode_steps = loop.sample.ode_steps;
    mc.gen_batch = loop.gen_trajectories;
    std::vector<cli::ModelStudyRow> rows;
    for (int s = 0; s < seeds; ++s) {
      for (const auto& r : cli::model_study(spec, mc, loop.seed + static_cast<std::uint64_t>(s))) {
        rows.push_back(r);
        std::printf("%s\n", r.row().c_str());
        std::fflush(stdout);
      }
    }
    cli::write_rows_csv(csv, rows);
  } else if (preset == "transfer") {
    if (spec.dynamics != env::Dynamics::point_mass_2d) throw ConfigError("transfer needs the point-mass environment");
    env::EnvSpec task_b = spec;
    task_b.goal = Eigen::Vector2d(-spec.goal.y(), spec.goal.x());
    std::vector<cli::TransferRow> rows;
    for (int s = 0; s < seeds; ++s) {
      rows.push_back(cli::transfer_run(loop, spec, task_b, loop.seed + static_cast<std::uint64_t>(s), cfg.output_dir));
      std::printf("%s\n", rows.back().row().c_str());
      std::fflush(stdout);
    }
    cli::write_rows_csv(csv, rows);
  } else {
    throw ConfigError("unknown preset '" + preset + "' (gen-length, control, guidance, transfer)");
  }
  std::printf("wrote %s\n", csv.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trajectory generation with controllable flows for Dyna-style reinforcement learning"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("-c,--config", common.config, "Config file (JSON, // comments allowed)");
    sub->add_option("-o,--output-dir", common.output_dir, "Run directory (overrides output_dir)");
    sub->add_option("--threads", common.threads, "Worker thread cap (overrides threads)");
    sub->add_option("--seed", common.seed, "Seed (overrides seed)");
  };

  int episodes = 100;
  std::string from_run;
  auto* cfm = app.add_subcommand("train-cfm", "Train the flow model on random-policy or run data");
  add_common(cfm);
  cfm->add_option("--episodes", episodes, "Random-policy episodes to collect")->check(CLI::PositiveNumber);
  cfm->add_option("--from-run", from_run, "Use the real buffer of this run directory instead");

  auto* ctl = app.add_subcommand("train-control", "Train the control model on top of the stage flow model");
  add_common(ctl);
  auto* gui = app.add_subcommand("train-guidance", "Train the guidance and partition networks");
  add_common(gui);

  bool resume = false, dry_run = false;
  auto* dyna = app.add_subcommand("run-dyna", "Run the Dyna loop and write metrics, reports and checkpoints");
  add_common(dyna);
  dyna->add_flag("--resume", resume, "Continue from the run directory's latest checkpoint");
  dyna->add_flag("--dry-run", dry_run, "Print the resolved config and exit");

  std::string run_dir;
  int eval_episodes = 10, trajectories = 64;
  auto* ev = app.add_subcommand("eval", "Evaluate a run checkpoint");
  add_common(ev);
  ev->add_option("--run", run_dir, "Run directory (defaults to the output directory)");
  ev->add_option("--episodes", eval_episodes, "Evaluation episodes")->check(CLI::PositiveNumber);
  ev->add_option("--trajectories", trajectories, "Generated trajectories for model statistics (0 skips)");

  std::vector<std::string> suites;
  auto* orc = app.add_subcommand("oracle", "Run the analytic verification suites");
  orc->add_option("--threads", common.threads, "Worker thread cap");
  orc->add_option("--suite", suites, "Restrict to these suites");

  std::string preset;
  int seeds = 5;
  auto* abl = app.add_subcommand("ablate", "Paired-seed ablation presets");
  add_common(abl);
  abl->add_option("preset", preset, "gen-length, control, guidance or transfer")->required();
  abl->add_option("--seeds", seeds, "Number of paired seeds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*cfm) return train_cfm(common, episodes, from_run);
    if (*ctl) return train_control(common);
    if (*gui) return train_guidance(common);
    if (*dyna) return run_dyna(common, resume, dry_run);
    if (*ev) return eval(common, run_dir, eval_episodes, trajectories);
    if (*orc) return oracle(common.threads, suites);
    if (*abl) return ablate(common, preset, seeds);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    switch (e.kind()) {
      case ErrorKind::config:
      case ErrorKind::io:
        return kExitUsage;
      default:
        return kExitNumeric;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
