#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ctrlflow/agent/dyna.hpp"

namespace ctrlflow::cli {

using Eigen::Index;
using nn::Matrix;
using nn::Vector;

/// Offline comparison of generation with and without control and guidance
/// on models trained from random-policy data.
struct ModelStudyConfig {
  int data_episodes = 100;
  int max_h = 15;
  std::vector<int> h_values{10, 15};
  flow::VectorFieldConfig net;
  flow::TrainCfmConfig cfm;
  control::TrainControlConfig control;
  guidance::TrainGuidanceConfig guidance;
  double control_alpha = 1.0;
  double beta = 1.0;
  double lambda_j = 1.0;
  int energy_segments = 256;
  int gen_batch = 128;
  int ode_steps = 20;

  ModelStudyConfig() {
    cfm.epochs = 60;
    cfm.adam.lr = 3e-3;
    control.epochs = 20;
    control.pairing = control::Pairing::reverse_flow;
    guidance.epochs = 30;
  }
};

struct ModelStudyRow {
  std::uint64_t seed = 0;
  int h = 0;
  double cosine_plain = 0.0;
  double cosine_control = 0.0;
  double residual_plain = 0.0;
  double residual_control = 0.0;
  double return_plain = 0.0;
  double return_guided = 0.0;

  static std::string csv_header() {
    return "seed,h,cosine_plain,cosine_control,residual_plain,residual_control,return_plain,return_guided";
  }
  std::string row() const {
    std::ostringstream s;
    s.precision(10);
    s << seed << ',' << h << ',' << cosine_plain << ',' << cosine_control << ',' << residual_plain << ','
      << residual_control << ',' << return_plain << ',' << return_guided;
    return s.str();
  }
};

/// Random-action episodes from `Env(spec, seed)`.
inline env::ReplayBuffer random_data(const env::EnvSpec& spec, int episodes, std::uint64_t seed) {
  env::Env e(spec, seed);
  Rng act(seed, 5);
  env::ReplayBuffer buf(static_cast<long>(episodes) * spec.horizon, 1);
  for (int ep = 0; ep < episodes; ++ep) {
    Vector s = e.reset();
    for (bool done = false; !done;) {
      Vector a(spec.d_a);
      for (Index i = 0; i < a.size(); ++i) a(i) = act.uniform(spec.action_low(i), spec.action_high(i));
      bool truncated = false;
      const env::StepResult r = e.step(a, &truncated);
      buf.add({s, a, r.reward, r.next_state, r.done, true});
      done = truncated || r.done;
      s = r.next_state;
    }
    buf.end_episode();
  }
  return buf;
}

/// One seed: trains flow, control and guidance models, then generates each
/// length in `h_values` with the same noise for every toggle setting.
/// Returns are discounted sums of environment rewards of the generated
/// state-action pairs.
inline std::vector<ModelStudyRow> model_study(const env::EnvSpec& spec, const ModelStudyConfig& cfg,
                                              std::uint64_t seed) {
  const env::ReplayBuffer data = random_data(spec, cfg.data_episodes, seed);
  const env::Normalizer norm = env::Normalizer::fit(data);
  const flow::PayloadSource source = flow::buffer_source(data, norm);
  const int F = env::step_features(spec);
  Rng rng(seed, 6);

  flow::VectorFieldModel cfm(cfg.net, F, cfg.max_h, rng);
  nn::Adam cfm_opt(cfg.cfm.adam, cfm.parameter_count());
  flow::TrainCfmConfig cc = cfg.cfm;
  cc.h_values = cfg.h_values;
  flow::train_cfm(cfm, cfm_opt, source, cc, rng);

  const control::RewardScale rs{norm.reward_mean(), norm.reward_std()};
  control::ControlModel ctrl(cfg.net, F, cfg.max_h, rng, cfg.control_alpha);
  nn::Adam ctrl_opt(cfg.control.adam, ctrl.net.parameter_count());
  control::TrainControlConfig tc = cfg.control;
  tc.h_values = cfg.h_values;
  tc.gain.gamma = spec.gamma;
  control::train_control(ctrl, ctrl_opt, cfm, source, rs, tc, rng);

  guidance::GuidanceConfig gcfg;
  gcfg.beta = cfg.beta;
  guidance::GuidanceBundle bundle(cfg.net, F, cfg.max_h, rng, gcfg);
  nn::Adam g_opt(cfg.guidance.adam, bundle.G.parameter_count());
  nn::Adam z_opt(cfg.guidance.adam, bundle.Z.parameter_count());
  guidance::ReturnNormalizer returns;
  for (int h : cfg.h_values) {
    for (const env::Trajectory& t : data.sample_trajectories(h, cfg.energy_segments, rng)) {
      returns.observe(env::discounted_return(t, spec.gamma));
    }
  }
  const guidance::EnergyFn energy{cfg.lambda_j, returns};
  const double gamma = spec.gamma;
  const guidance::PayloadEnergy J = [energy, norm, gamma](const Matrix& X) {
    return energy.of_payloads(X, norm, gamma);
  };
  guidance::TrainGuidanceConfig gc = cfg.guidance;
  gc.h_values = cfg.h_values;
  guidance::train_guidance(bundle, g_opt, z_opt, source, J, gc, rng);

  control::GainConfig gain = cfg.control.gain;
  gain.gamma = spec.gamma;
  const sampler::Models models(&cfm, &ctrl, &bundle, gain);
  std::vector<ModelStudyRow> rows;
  for (int h : cfg.h_values) {
    auto run = [&](bool control_on, bool guidance_on) {
      sampler::SampleConfig sc;
      sc.h = h;
      sc.ode_steps = cfg.ode_steps;
      sc.batch_size = cfg.gen_batch;
      sc.control_on = control_on;
      sc.guidance_on = guidance_on;
      sc.recompute_rewards = true;
      Rng noise(seed, 100 + static_cast<std::uint64_t>(h));
      return sampler::generate(models, norm, spec, sc, noise).report;
    };
    const sampler::GenBatchReport plain = run(false, false), ctl = run(true, false), guided = run(false, true);
    ModelStudyRow r;
    r.seed = seed;
    r.h = h;
    r.cosine_plain = plain.consistency.cosine_mean;
    r.cosine_control = ctl.consistency.cosine_mean;
    r.residual_plain = plain.consistency.residual_mean;
    r.residual_control = ctl.consistency.residual_mean;
    r.return_plain = plain.return_mean;
    r.return_guided = guided.return_mean;
    rows.push_back(r);
  }
  return rows;
}

/// Short Dyna runs that differ only in the generated length.
struct LengthStudyRow {
  std::uint64_t seed = 0;
  int h = 0;
  double final_return = 0.0;  ///< mean eval return over the last `tail` rounds
  double mean_return = 0.0;   ///< mean eval return over all rounds

  static std::string csv_header() { return "seed,h,final_return,mean_return"; }
  std::string row() const {
    std::ostringstream s;
    s.precision(10);
    s << seed << ',' << h << ',' << final_return << ',' << mean_return;
    return s.str();
  }
};

inline double tail_mean(const std::vector<agent::RoundMetrics>& rows, int tail) {
  if (rows.empty()) return 0.0;
  const auto n = static_cast<int>(rows.size());
  const int from = std::max(0, n - tail);
  double s = 0.0;
  for (int i = from; i < n; ++i) s += rows[static_cast<std::size_t>(i)].eval_return_mean;
  return s / (n - from);
}

inline LengthStudyRow length_run(agent::LoopConfig cfg, const env::EnvSpec& spec, int h, std::uint64_t seed,
                                 int tail = 3) {
  cfg.seed = seed;
  cfg.sample.h = h;
  cfg.cfm.h_values = {h};
  cfg.control.h_values = {h};
  cfg.guidance.h_values = {h};
  const std::vector<agent::RoundMetrics> m = agent::run_dyna(cfg, spec).metrics;
  LengthStudyRow r;
  r.seed = seed;
  r.h = h;
  r.final_return = tail_mean(m, tail);
  r.mean_return = tail_mean(m, static_cast<int>(m.size()));
  return r;
}

/// Return level that counts as "reached": R0 + fraction (R_final - R0), with
/// R0 the first-round eval return and R_final the mean over the last `tail`
/// rounds of the reference run. Returns are negative costs here, so a plain
/// fraction of R_final would lie above the reachable range.
inline double progress_threshold(const std::vector<agent::RoundMetrics>& ref, double fraction = 0.9,
                                 int tail = 3) {
  if (ref.empty()) throw ConfigError("reference run has no rounds");
  const double r0 = ref.front().eval_return_mean;
  return r0 + fraction * (tail_mean(ref, tail) - r0);
}

/// Task-B learning with and without models pretrained on task A. Both task-B
/// runs share the seed; the threshold comes from the scratch run.
struct TransferRow {
  std::uint64_t seed = 0;
  double threshold = 0.0;
  double scratch_final = 0.0;
  double pretrained_final = 0.0;
  long scratch_steps = -1;
  long pretrained_steps = -1;

  static std::string csv_header() {
    return "seed,threshold,scratch_final,pretrained_final,scratch_steps,pretrained_steps";
  }
  std::string row() const {
    std::ostringstream s;
    s.precision(10);
    s << seed << ',' << threshold << ',' << scratch_final << ',' << pretrained_final << ',' << scratch_steps << ','
      << pretrained_steps;
    return s.str();
  }
};

inline TransferRow transfer_run(agent::LoopConfig cfg, const env::EnvSpec& task_a, const env::EnvSpec& task_b,
                                std::uint64_t seed, const std::string& dir) {
  cfg.seed = seed;
  const std::string dir_a = dir + "/task_a_seed" + std::to_string(seed);
  agent::run_dyna(cfg, task_a, dir_a);
  agent::LoopConfig pre = cfg;
  pre.pretrained = agent::DynaRun::checkpoint_path(dir_a);
  pre.sample.recompute_rewards = true;
  const auto ms = agent::run_dyna(cfg, task_b).metrics;
  const auto mp = agent::run_dyna(pre, task_b).metrics;
  TransferRow r;
  r.seed = seed;
  r.threshold = progress_threshold(ms);
  r.scratch_final = tail_mean(ms, 3);
  r.pretrained_final = tail_mean(mp, 3);
  r.scratch_steps = agent::steps_to_threshold(ms, r.threshold);
  r.pretrained_steps = agent::steps_to_threshold(mp, r.threshold);
  return r;
}

/// Plain SAC against the full loop with identical schedules and seeds.
struct EfficiencyRow {
  std::uint64_t seed = 0;
  double sac_initial = 0.0;
  double sac_final = 0.0;
  double threshold = 0.0;
  double ctrl_final = 0.0;
  long sac_steps = -1;
  long ctrl_steps = -1;  ///< -1: threshold never reached

  /// ctrl_steps / sac_steps; infinity when the loop never reaches it.
  double ratio() const {
    if (ctrl_steps < 0) return std::numeric_limits<double>::infinity();
    return static_cast<double>(ctrl_steps) / static_cast<double>(sac_steps);
  }

  static std::string csv_header() {
    return "seed,sac_initial,sac_final,threshold,ctrl_final,sac_steps,ctrl_steps,ratio";
  }
  std::string row() const {
    std::ostringstream s;
    s.precision(10);
    s << seed << ',' << sac_initial << ',' << sac_final << ',' << threshold << ',' << ctrl_final << ',' << sac_steps
      << ',' << ctrl_steps << ',' << ratio();
    return s.str();
  }
};

inline EfficiencyRow efficiency_run(agent::LoopConfig cfg, const env::EnvSpec& spec, std::uint64_t seed) {
  cfg.seed = seed;
  agent::LoopConfig base = cfg;
  base.generation = false;
  const auto ms = agent::run_sac_baseline(base, spec);
  const auto mc = agent::run_dyna(cfg, spec).metrics;
  EfficiencyRow r;
  r.seed = seed;
  r.sac_initial = ms.front().eval_return_mean;
  r.sac_final = tail_mean(ms, 3);
  r.threshold = progress_threshold(ms);
  r.ctrl_final = tail_mean(mc, 3);
  r.sac_steps = agent::steps_to_threshold(ms, r.threshold);
  r.ctrl_steps = agent::steps_to_threshold(mc, r.threshold);
  return r;
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

template <class Row>
void write_rows_csv(const std::string& path, const std::vector<Row>& rows) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);
  out << Row::csv_header() << '\n';
  for (const Row& r : rows) out << r.row() << '\n';
}

}  // namespace ctrlflow::cli
