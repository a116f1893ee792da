#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlflow/agent/sac.hpp"
#include "ctrlflow/control/train.hpp"
#include "ctrlflow/flow/cfm.hpp"
#include "ctrlflow/guidance/guidance.hpp"
#include "ctrlflow/sampler/sampler.hpp"

namespace ctrlflow::agent {

struct LossParts {
  double cfm = 0.0;
  double control = 0.0;
  double g = 0.0;
  double z = 0.0;
};

/// L = L_CFM + L_Control + zeta (L_G + L_Z).
inline double total_loss(const LossParts& p, double zeta) { return p.cfm + p.control + zeta * (p.g + p.z); }

struct LoopConfig {
  std::uint64_t seed = 0;
  int rounds = 20;
  /// Uniform random actions until this many env steps; model training starts
  /// once they are collected.
  int warmup_steps = 1000;
  int env_steps_per_round = 1000;
  int sac_updates_per_round = 1000;
  int sac_batch = 256;
  /// Fraction of each SAC batch drawn from B_env.
  double mixture_ratio = 0.5;
  long real_capacity = 100000;
  long model_capacity = 20000;
  int eval_episodes = 10;
  bool generation = true;
  /// Trajectories generated into B_mod per round.
  int gen_trajectories = 40;
  /// Real segments whose returns update the energy bounds each round.
  int energy_segments = 256;

  double control_alpha = 1.0;
  double beta = 1.0;
  double zeta = 1.0;
  double lambda_j = 1.0;
  double kl_weight = 0.01;

  flow::VectorFieldConfig flow_net;
  flow::TrainCfmConfig cfm;
  control::TrainControlConfig control;
  guidance::TrainGuidanceConfig guidance;
  sampler::SampleConfig sample;
  SacConfig sac;

  /// Run checkpoint whose flow, control and guidance models seed this run.
  std::string pretrained;
  int checkpoint_every = 1;

  LoopConfig() {
    cfm.epochs = 50;
    control.epochs = 20;
    guidance.epochs = 20;
  }

  void validate() const {
    if (rounds < 0 || warmup_steps < 0 || env_steps_per_round < 1 || sac_updates_per_round < 0) {
      throw ConfigError("round sizes must be non-negative (env steps per round >= 1)");
    }
    if (sac_batch < 1) throw ConfigError("SAC batch size must be >= 1");
    if (!(mixture_ratio >= 0.0 && mixture_ratio <= 1.0)) throw ConfigError("mixture ratio must lie in [0, 1]");
    if (real_capacity < 1 || model_capacity < 1) throw ConfigError("buffer capacities must be >= 1");
    if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
    if (gen_trajectories < 1 || energy_segments < 1) throw ConfigError("generation counts must be >= 1");
    if (control_alpha < 0.0 || beta < 0.0 || zeta < 0.0 || lambda_j < 0.0 || kl_weight < 0.0) {
      throw ConfigError("loss weights must be >= 0");
    }
    if (sample.control_on && !(control_alpha > 0.0)) throw ConfigError("control needs alpha > 0");
    if (sample.guidance_on && !(beta > 0.0 && zeta > 0.0)) throw ConfigError("guidance needs beta > 0 and zeta > 0");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    sample.validate(sample.h);
    sac.validate();
  }
};

struct RoundMetrics {
  long round = 0;
  long env_steps = 0;
  double eval_return_mean = 0.0;
  double eval_return_std = 0.0;
  LossParts parts;
  double total = 0.0;
  double lambda_min_mean = 0.0;
  double lambda_min_min = 0.0;
  double coef_p10 = 0.0;
  double coef_p50 = 0.0;
  double coef_p90 = 0.0;
  sampler::GenBatchReport gen;
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double alpha = 0.0;
  double model_fraction = 0.0;
  long updates = 0;

  static const char* csv_header() {
    return "round,env_steps,eval_return_mean,eval_return_std,L_CFM,L_Control,L_G,L_Z,L_total,"
           "lambda_min_mean,lambda_min_min,coef_p10,coef_p50,coef_p90,gen_count,gen_rejected,"
           "gen_return_mean,gen_cosine_mean,critic_loss,actor_loss,alpha,model_fraction,sac_updates";
  }

  std::vector<double> row() const {
    return {static_cast<double>(round), static_cast<double>(env_steps), eval_return_mean, eval_return_std,
            parts.cfm, parts.control, parts.g, parts.z, total, lambda_min_mean, lambda_min_min, coef_p10,
            coef_p50, coef_p90, static_cast<double>(gen.count), static_cast<double>(gen.rejected),
            gen.return_mean, gen.consistency.cosine_mean, critic_loss, actor_loss, alpha, model_fraction,
            static_cast<double>(updates)};
  }

  static RoundMetrics from_row(const std::vector<double>& r) {
    if (r.size() != 23) throw IoError("corrupt metrics row");
    RoundMetrics m;
    m.round = std::lround(r[0]);
    m.env_steps = std::lround(r[1]);
    m.eval_return_mean = r[2];
    m.eval_return_std = r[3];
    m.parts = {r[4], r[5], r[6], r[7]};
    m.total = r[8];
    m.lambda_min_mean = r[9];
    m.lambda_min_min = r[10];
    m.coef_p10 = r[11];
    m.coef_p50 = r[12];
    m.coef_p90 = r[13];
    m.gen.count = static_cast<int>(r[14]);
    m.gen.rejected = static_cast<int>(r[15]);
    m.gen.return_mean = r[16];
    m.gen.consistency.cosine_mean = r[17];
    m.critic_loss = r[18];
    m.actor_loss = r[19];
    m.alpha = r[20];
    m.model_fraction = r[21];
    m.updates = std::lround(r[22]);
    return m;
  }
};

inline void write_metrics_csv(const std::string& path, const std::vector<RoundMetrics>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);
  out << RoundMetrics::csv_header() << '\n' << std::setprecision(17);
  for (const RoundMetrics& m : rows) {
    const std::vector<double> r = m.row();
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << '\n';
  }
}

/// Seed of the evaluation environment for a round; separate from every
/// training stream.
inline std::uint64_t eval_seed(std::uint64_t seed, long round) {
  return seed * 0x9E3779B97F4A7C15ULL + 0x5851F42D4C957F2DULL + static_cast<std::uint64_t>(round);
}

/// Flow, control and guidance models with their optimizers and the
/// normalizers they were trained under. Stored under "model.*"; a saved set
/// seeds a run through `LoopConfig::pretrained`.
struct ModelSet {
  std::optional<flow::VectorFieldModel> cfm;
  std::optional<control::ControlModel> ctrl;
  std::optional<guidance::GuidanceBundle> bundle;
  std::optional<env::Normalizer> norm;
  nn::Adam cfm_opt, ctrl_opt, g_opt, z_opt;
  guidance::ReturnNormalizer returns;

  /// Creates the flow model and whichever of control and guidance the
  /// sampler toggles ask for, keeping models that already exist.
  void ensure(const LoopConfig& cfg, int features, Rng& rng) {
    if (!cfm) {
      cfm = flow::VectorFieldModel(cfg.flow_net, features, cfg.sample.h, rng);
      cfm_opt = nn::Adam(cfg.cfm.adam, cfm->parameter_count());
    }
    if (cfg.sample.control_on && !ctrl) {
      ctrl = control::ControlModel(cfg.flow_net, features, cfm->max_h(), rng, cfg.control_alpha);
      ctrl_opt = nn::Adam(cfg.control.adam, ctrl->net.parameter_count());
    }
    if (cfg.sample.guidance_on && !bundle) {
      guidance::GuidanceConfig gc;
      gc.beta = cfg.beta;
      gc.zeta = cfg.zeta;
      bundle = guidance::GuidanceBundle(cfg.flow_net, features, cfm->max_h(), rng, gc);
      g_opt = nn::Adam(cfg.guidance.adam, bundle->G.parameter_count());
      z_opt = nn::Adam(cfg.guidance.adam, bundle->Z.parameter_count());
    }
  }

  flow::CfmReport train_flow(const env::ReplayBuffer& data, const LoopConfig& cfg, Rng& rng) {
    require(cfm.has_value() && norm.has_value(), "flow training needs a flow model and a normalizer");
    flow::TrainCfmConfig cc = cfg.cfm;
    cc.kl_weight = cfg.kl_weight;
    if (cc.h_values.empty()) cc.h_values = {cfg.sample.h};
    return flow::train_cfm(*cfm, cfm_opt, flow::buffer_source(data, *norm), cc, rng);
  }

  control::ControlReport train_control(const env::ReplayBuffer& data, const LoopConfig& cfg,
                                       const env::EnvSpec& spec, Rng& rng) {
    require(cfm.has_value() && ctrl.has_value() && norm.has_value(),
            "control training needs flow and control models and a normalizer");
    control::TrainControlConfig tc = cfg.control;
    if (tc.h_values.empty()) tc.h_values = {cfg.sample.h};
    tc.gain.gamma = spec.gamma;
    const control::RewardScale rs{norm->reward_mean(), norm->reward_std()};
    return control::train_control(*ctrl, ctrl_opt, *cfm, flow::buffer_source(data, *norm), rs, tc, rng);
  }

  /// Updates the return range from real segments, then fits G and Z to the
  /// energy of the current range.
  guidance::GuidanceReport train_guidance(const env::ReplayBuffer& data, const LoopConfig& cfg,
                                          const env::EnvSpec& spec, Rng& rng) {
    require(bundle.has_value() && norm.has_value(), "guidance training needs a guidance bundle and a normalizer");
    const int h = cfg.sample.h;
    for (const env::Trajectory& t : data.sample_trajectories(h, cfg.energy_segments, rng)) {
      returns.observe(env::discounted_return(t, spec.gamma));
    }
    const guidance::EnergyFn energy{cfg.lambda_j, returns};
    const env::Normalizer n = *norm;
    const double gamma = spec.gamma;
    const guidance::PayloadEnergy J = [energy, n, gamma](const Matrix& X) { return energy.of_payloads(X, n, gamma); };
    guidance::TrainGuidanceConfig gc = cfg.guidance;
    if (gc.h_values.empty()) gc.h_values = {h};
    return guidance::train_guidance(*bundle, g_opt, z_opt, flow::buffer_source(data, *norm), J, gc, rng);
  }

  void save(BlobWriter& w) const {
    w.put_ints("model.present", {cfm ? 1 : 0, ctrl ? 1 : 0, bundle ? 1 : 0, norm ? 1 : 0});
    if (cfm) {
      cfm->save(w, "model.cfm");
      cfm_opt.save(w, "model.cfm_opt");
    }
    if (ctrl) {
      ctrl->save(w, "model.ctrl");
      ctrl_opt.save(w, "model.ctrl_opt");
    }
    if (bundle) {
      bundle->save(w, "model.bundle");
      g_opt.save(w, "model.g_opt");
      z_opt.save(w, "model.z_opt");
    }
    if (norm) norm->save(w, "model.norm");
    returns.save(w, "model.returns");
  }

  static ModelSet load(const BlobReader& r) {
    const auto present = r.get_ints("model.present");
    if (present.size() != 4) throw IoError("corrupt model section");
    ModelSet m;
    if (present[0]) {
      m.cfm = flow::VectorFieldModel::load(r, "model.cfm");
      m.cfm_opt.load(r, "model.cfm_opt");
    }
    if (present[1]) {
      m.ctrl = control::ControlModel::load(r, "model.ctrl");
      m.ctrl_opt.load(r, "model.ctrl_opt");
    }
    if (present[2]) {
      m.bundle = guidance::GuidanceBundle::load(r, "model.bundle");
      m.g_opt.load(r, "model.g_opt");
      m.z_opt.load(r, "model.z_opt");
    }
    if (present[3]) m.norm = env::Normalizer::load(r, "model.norm");
    m.returns = guidance::ReturnNormalizer::load(r, "model.returns");
    return m;
  }

 private:
  static void require(bool ok, const char* what) {
    if (!ok) throw NotReadyError(what);
  }
};

/// Stateful Dyna loop. Every random draw comes from one of a few named
/// streams, all saved in the checkpoint, so a resumed run replays bitwise.
class DynaRun {
 public:
  /// `dir` empty keeps everything in memory.
  DynaRun(LoopConfig cfg, env::EnvSpec spec, std::string dir = {})
      : cfg_(std::move(cfg)),
        spec_(std::move(spec)),
        dir_(std::move(dir)),
        env_(spec_, cfg_.seed),
        act_rng_(cfg_.seed, 2),
        sac_rng_(cfg_.seed, 3),
        model_rng_(cfg_.seed, 4),
        benv_(cfg_.real_capacity, 1),
        bmod_(cfg_.model_capacity, 2) {
    cfg_.validate();
    spec_.validate();
    Rng init(cfg_.seed, 1);
    agent_ = SacAgent(spec_, cfg_.sac, init);
    state_ = env_.reset();
    if (!cfg_.pretrained.empty()) load_models(BlobReader::load(cfg_.pretrained));
    prepare_dir();
  }

  /// Continues from `dir`/checkpoints/latest.ckpt.
  static DynaRun resume(LoopConfig cfg, env::EnvSpec spec, const std::string& dir) {
    const std::string path = checkpoint_path(dir);
    if (!std::filesystem::exists(path)) throw IoError("missing checkpoint " + path);
    cfg.pretrained.clear();
    DynaRun run(std::move(cfg), std::move(spec), dir);
    run.restore(BlobReader::load(path));
    return run;
  }

  static std::string checkpoint_path(const std::string& dir) { return dir + "/checkpoints/latest.ckpt"; }

  bool finished() const { return round_ >= cfg_.rounds; }
  long round() const { return round_; }
  long env_steps() const { return env_steps_; }
  const std::vector<RoundMetrics>& metrics() const { return metrics_; }
  const SacAgent& agent() const { return agent_; }
  const env::ReplayBuffer& real_buffer() const { return benv_; }
  const env::ReplayBuffer& model_buffer() const { return bmod_; }
  const LoopConfig& config() const { return cfg_; }
  bool has_model() const { return models_.cfm.has_value(); }

  /// Runs rounds until the configured count or `stop_round` (exclusive).
  void run(long stop_round = -1) {
    while (!finished() && (stop_round < 0 || round_ < stop_round)) step_round();
  }

  RoundMetrics step_round() {
    if (finished()) throw ConfigError("run already finished");
    // The round-start state is the resume point if any stage fails.
    const std::string snapshot = dir_.empty() ? std::string() : checkpoint_blob();
    try {
      RoundMetrics m = play_round();
      metrics_.push_back(m);
      ++round_;
      if (!dir_.empty()) {
        write_metrics_csv(dir_ + "/metrics.csv", metrics_);
        write_report(m);
        if (round_ % cfg_.checkpoint_every == 0 || finished()) save_checkpoint(checkpoint_blob());
      }
      return m;
    } catch (const Error&) {
      if (!dir_.empty()) save_checkpoint(snapshot);
      throw;
    }
  }

  std::string checkpoint_blob() const {
    BlobWriter w;
    save_models(w);
    w.put_ints("loop.counters", {round_, env_steps_, env_.t()});
    w.put_vector("loop.state", state_);
    w.put_string("rng.env", env_.rng().state());
    w.put_string("rng.act", act_rng_.state());
    w.put_string("rng.sac", sac_rng_.state());
    w.put_string("rng.model", model_rng_.state());
    agent_.save(w, "agent");
    benv_.save(w, "benv");
    bmod_.save(w, "bmod");
    w.put_int("metrics.count", static_cast<std::int64_t>(metrics_.size()));
    for (std::size_t i = 0; i < metrics_.size(); ++i) w.put_reals("metrics." + std::to_string(i), metrics_[i].row());
    return w.str();
  }

  /// Flow, control and guidance models with their optimizers and the
  /// normalizers. Also the source format for `pretrained`.
  void save_models(BlobWriter& w) const { models_.save(w); }


 private:
  void prepare_dir() {
    if (dir_.empty()) return;
    std::filesystem::create_directories(dir_ + "/checkpoints");
    std::filesystem::create_directories(dir_ + "/reports");
  }

  void save_checkpoint(const std::string& blob) const {
    const std::string path = checkpoint_path(dir_);
    {
      std::ofstream out(path + ".tmp", std::ios::binary);
      if (!out) throw IoError("cannot open '" + path + ".tmp' for writing");
      out << blob;
    }
    std::filesystem::rename(path + ".tmp", path);
  }

  void write_report(const RoundMetrics& m) const {
    nlohmann::json j = {{"round", m.round},
                        {"env_steps", m.env_steps},
                        {"eval_return_mean", m.eval_return_mean},
                        {"eval_return_std", m.eval_return_std},
                        {"losses",
                         {{"L_CFM", m.parts.cfm},
                          {"L_Control", m.parts.control},
                          {"L_G", m.parts.g},
                          {"L_Z", m.parts.z},
                          {"L_total", m.total}}},
                        {"generation", m.gen.to_json()}};
    std::ostringstream name;
    name << dir_ << "/reports/round_" << std::setw(4) << std::setfill('0') << m.round << ".json";
    std::ofstream out(name.str());
    if (!out) throw IoError("cannot open " + name.str());
    out << j.dump(2) << '\n';
  }

  void load_models(const BlobReader& r) {
    models_ = ModelSet::load(r);
    if (models_.cfm && models_.cfm->max_h() < cfg_.sample.h) {
      throw ConfigError("pretrained flow model is shorter than the sample length");
    }
  }


  void restore(const BlobReader& r) {
    load_models(r);
    const auto c = r.get_ints("loop.counters");
    if (c.size() != 3) throw IoError("corrupt loop counters");
    round_ = c[0];
    env_steps_ = c[1];
    state_ = r.get_vector("loop.state");
    env_.rng().set_state(r.get_string("rng.env"));
    env_.restore(state_, static_cast<int>(c[2]));
    act_rng_.set_state(r.get_string("rng.act"));
    sac_rng_.set_state(r.get_string("rng.sac"));
    model_rng_.set_state(r.get_string("rng.model"));
    agent_ = SacAgent::load(r, "agent", cfg_.sac);
    benv_ = env::ReplayBuffer::load(r, "benv");
    bmod_ = env::ReplayBuffer::load(r, "bmod");
    metrics_.clear();
    const long n = r.get_int("metrics.count");
    for (long i = 0; i < n; ++i) metrics_.push_back(RoundMetrics::from_row(r.get_reals("metrics." + std::to_string(i))));
  }



  void collect() {
    for (int k = 0; k < cfg_.env_steps_per_round; ++k) {
      Vector a(spec_.d_a);
      if (env_steps_ < cfg_.warmup_steps) {
        for (Index i = 0; i < a.size(); ++i) a(i) = act_rng_.uniform(spec_.action_low(i), spec_.action_high(i));
      } else {
        a = agent_.act(state_, act_rng_);
      }
      a = env::clip_action(spec_, a);
      bool truncated = false;
      const env::StepResult r = env_.step(a, &truncated);
      benv_.add({state_, a, r.reward, r.next_state, r.done, true});
      ++env_steps_;
      if (truncated || r.done) {
        benv_.end_episode();
        state_ = env_.reset();
      } else {
        state_ = r.next_state;
      }
    }
  }

  void train_models(RoundMetrics& m) {
    models_.norm = env::Normalizer::fit(benv_);
    models_.ensure(cfg_, env::step_features(spec_), model_rng_);
    const flow::CfmReport cr = models_.train_flow(benv_, cfg_, model_rng_);
    if (!cr.epochs.empty()) m.parts.cfm = cr.epochs.back().cfm_loss;

    if (cfg_.sample.control_on) {
      const control::ControlReport rep = models_.train_control(benv_, cfg_, spec_, model_rng_);
      if (!rep.epochs.empty()) {
        m.parts.control = rep.epochs.back().loss;
        double sum = 0.0, lo = rep.epochs.front().lambda_min;
        for (const control::ControlEpoch& e : rep.epochs) {
          sum += e.lambda_min;
          lo = std::min(lo, e.lambda_min);
        }
        m.lambda_min_mean = sum / static_cast<double>(rep.epochs.size());
        m.lambda_min_min = lo;
      }
    }

    if (cfg_.sample.guidance_on) {
      const guidance::GuidanceReport rep = models_.train_guidance(benv_, cfg_, spec_, model_rng_);
      if (!rep.epochs.empty()) {
        const guidance::GuidanceEpoch& e = rep.epochs.back();
        m.parts.g = e.loss_g;
        m.parts.z = e.loss_z;
        m.coef_p10 = e.coef_p10;
        m.coef_p50 = e.coef_p50;
        m.coef_p90 = e.coef_p90;
      }
    }
    m.total = total_loss(m.parts, cfg_.sample.guidance_on ? cfg_.zeta : 0.0);
  }


  void generate(RoundMetrics& m) {
    sampler::SampleConfig sc = cfg_.sample;
    sc.batch_size = cfg_.gen_trajectories;
    sc.control_on = sc.control_on && models_.ctrl.has_value();
    sc.guidance_on = sc.guidance_on && models_.bundle.has_value();
    control::GainConfig gain = cfg_.control.gain;
    gain.gamma = spec_.gamma;
    const sampler::Models models(&*models_.cfm, models_.ctrl ? &*models_.ctrl : nullptr,
                                 models_.bundle ? &*models_.bundle : nullptr, gain);
    sampler::GenResult g = sampler::generate(models, *models_.norm, spec_, sc, model_rng_);
    sampler::fill_model_buffer(bmod_, g.trajectories);
    m.gen = g.report;
  }

  void update_agent(RoundMetrics& m) {
    if (benv_.valid_count() < cfg_.sac_batch) return;
    const env::ReplayBuffer* model = cfg_.generation ? &bmod_ : nullptr;
    double model_items = 0.0;
    int actor_steps = 0;
    for (int k = 0; k < cfg_.sac_updates_per_round; ++k) {
      const SacBatch batch = mixed_batch(benv_, model, cfg_.sac_batch, cfg_.mixture_ratio, sac_rng_);
      const SacStepReport rep = sac_update(agent_, batch, sac_rng_);
      m.critic_loss += rep.critic_loss;
      if (rep.actor_updated) {
        m.actor_loss += rep.actor_loss;
        ++actor_steps;
      }
      model_items += rep.n_model;
      ++m.updates;
    }
    if (m.updates > 0) {
      m.critic_loss /= static_cast<double>(m.updates);
      m.model_fraction = model_items / (static_cast<double>(m.updates) * cfg_.sac_batch);
    }
    if (actor_steps > 0) m.actor_loss /= actor_steps;
  }

  RoundMetrics play_round() {
    RoundMetrics m;
    m.round = round_;
    collect();
    if (cfg_.generation && env_steps_ >= cfg_.warmup_steps) train_models(m);
    if (cfg_.generation && models_.cfm && models_.norm) generate(m);
    update_agent(m);
    m.env_steps = env_steps_;
    m.alpha = agent_.alpha();
    const std::vector<double> ev = evaluate_policy(agent_, spec_, cfg_.eval_episodes, eval_seed(cfg_.seed, round_));
    std::tie(m.eval_return_mean, m.eval_return_std) = sampler::mean_std(ev);
    return m;
  }

  LoopConfig cfg_;
  env::EnvSpec spec_;
  std::string dir_;
  env::Env env_;
  Rng act_rng_, sac_rng_, model_rng_;
  SacAgent agent_;
  env::ReplayBuffer benv_, bmod_;
  Vector state_;
  long round_ = 0;
  long env_steps_ = 0;
  std::vector<RoundMetrics> metrics_;

  ModelSet models_;
};

struct DynaResult {
  std::vector<RoundMetrics> metrics;
  long env_steps = 0;
};

/// Runs the whole loop; with `resume` it continues from the run directory's
/// latest checkpoint. `snapshot` is written to config.json when given.
inline DynaResult run_dyna(const LoopConfig& cfg, const env::EnvSpec& spec, const std::string& dir = {},
                           bool resume = false, const nlohmann::json* snapshot = nullptr) {
  if (resume && dir.empty()) throw ConfigError("resume needs a run directory");
  DynaRun run = resume ? DynaRun::resume(cfg, spec, dir) : DynaRun(cfg, spec, dir);
  if (!dir.empty() && snapshot != nullptr) {
    std::ofstream out(dir + "/config.json");
    if (!out) throw IoError("cannot write " + dir + "/config.json");
    out << snapshot->dump(2) << '\n';
  }
  run.run();
  return {run.metrics(), run.env_steps()};
}

/// Standalone SAC baseline: the same collection, update and evaluation
/// schedule with real data only.
inline std::vector<RoundMetrics> run_sac_baseline(const LoopConfig& cfg, const env::EnvSpec& spec) {
  cfg.validate();
  env::Env e(spec, cfg.seed);
  Rng init(cfg.seed, 1), act(cfg.seed, 2), upd(cfg.seed, 3);
  SacAgent agent(spec, cfg.sac, init);
  env::ReplayBuffer buffer(cfg.real_capacity, 1);
  Vector s = e.reset();
  long steps = 0;
  std::vector<RoundMetrics> out;
  for (long round = 0; round < cfg.rounds; ++round) {
    RoundMetrics m;
    m.round = round;
    for (int k = 0; k < cfg.env_steps_per_round; ++k) {
      Vector a(spec.d_a);
      if (steps < cfg.warmup_steps) {
        for (Index i = 0; i < a.size(); ++i) a(i) = act.uniform(spec.action_low(i), spec.action_high(i));
      } else {
        a = agent.act(s, act);
      }
      a = env::clip_action(spec, a);
      bool truncated = false;
      const env::StepResult r = e.step(a, &truncated);
      buffer.add({s, a, r.reward, r.next_state, r.done, true});
      ++steps;
      if (truncated || r.done) {
        buffer.end_episode();
        s = e.reset();
      } else {
        s = r.next_state;
      }
    }
    if (buffer.valid_count() >= cfg.sac_batch) {
      int actor_steps = 0;
      for (int k = 0; k < cfg.sac_updates_per_round; ++k) {
        const SacStepReport rep = sac_update(agent, mixed_batch(buffer, nullptr, cfg.sac_batch, 1.0, upd), upd);
        m.critic_loss += rep.critic_loss;
        if (rep.actor_updated) {
          m.actor_loss += rep.actor_loss;
          ++actor_steps;
        }
        ++m.updates;
      }
      if (m.updates > 0) m.critic_loss /= static_cast<double>(m.updates);
      if (actor_steps > 0) m.actor_loss /= actor_steps;
    }
    m.env_steps = steps;
    m.alpha = agent.alpha();
    const std::vector<double> ev = evaluate_policy(agent, spec, cfg.eval_episodes, eval_seed(cfg.seed, round));
    std::tie(m.eval_return_mean, m.eval_return_std) = sampler::mean_std(ev);
    out.push_back(m);
  }
  return out;
}

/// Env steps at which the eval return first reaches `threshold`; -1 if never.
inline long steps_to_threshold(const std::vector<RoundMetrics>& rows, double threshold) {
  for (const RoundMetrics& m : rows) {
    if (m.eval_return_mean >= threshold) return m.env_steps;
  }
  return -1;
}

}  // namespace ctrlflow::agent
