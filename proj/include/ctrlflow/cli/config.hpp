#pragma once

#include <cstdlib>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctrlflow/agent/dyna.hpp"

extern char** environ;

namespace ctrlflow::cli {

using nlohmann::json;

/// Everything a run needs. Weights that appear in the total loss live in
/// `loop` (control_alpha, beta, zeta, lambda_j, kl_weight).
struct RunConfig {
  std::string env = "point-mass-2d";
  double gamma = 0.99;
  int horizon = 50;
  std::vector<double> goal{1.0, 0.0};
  double noise_std = 0.0;
  agent::LoopConfig loop;
  std::string output_dir = "runs/default";
  int threads = 1;

  env::EnvSpec env_spec() const {
    env::EnvSpec s = env::make_env(env, gamma);
    s.horizon = horizon;
    s.noise_std = noise_std;
    if (s.dynamics == env::Dynamics::point_mass_2d) {
      if (goal.size() != 2) throw ConfigError("env.goal must have two entries");
      s.goal = Eigen::Vector2d(goal[0], goal[1]);
    }
    s.validate();
    return s;
  }

  /// Loop configuration with the environment discount copied into the agent.
  agent::LoopConfig loop_config() const {
    agent::LoopConfig l = loop;
    l.sac.gamma = gamma;
    return l;
  }

  void validate() const {
    if (threads < 1) throw ConfigError("threads must be >= 1");
    env_spec();
    loop_config().validate();
  }
};

namespace detail {

template <class E>
using Choices = std::vector<std::pair<const char*, E>>;

inline std::string type_name(const json& j) { return j.type_name(); }

/// Reads sections of a JSON tree, remembering which keys were consumed.
class Reader {
 public:
  explicit Reader(const json& root) : root_(root) {
    if (!root_.is_object()) throw ConfigError("config root must be an object");
  }

  void section(const std::string& name) {
    close();
    name_ = name;
    if (name.empty()) {
      cur_ = &root_;
    } else if (root_.contains(name)) {
      cur_ = &root_.at(name);
      if (!cur_->is_object()) throw ConfigError("'" + name + "' must be an object");
    } else {
      cur_ = nullptr;
    }
    known_sections_.insert(name);
  }

  template <class T>
  void field(const char* key, T& v) {
    seen_.insert(key);
    if (cur_ == nullptr || !cur_->contains(key)) return;
    const json& j = cur_->at(key);
    try {
      v = j.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + ": value " + j.dump() + " has the wrong type");
    }
  }

  void field(const char* key, std::optional<double>& v) {
    seen_.insert(key);
    if (cur_ == nullptr || !cur_->contains(key)) return;
    const json& j = cur_->at(key);
    if (j.is_null()) {
      v.reset();
    } else if (j.is_number()) {
      v = j.get<double>();
    } else {
      throw ConfigError(where(key) + ": expected a number or null");
    }
  }

  template <class E>
  void choice(const char* key, E& v, const Choices<E>& options) {
    seen_.insert(key);
    if (cur_ == nullptr || !cur_->contains(key)) return;
    const json& j = cur_->at(key);
    std::string names;
    for (const auto& [n, e] : options) {
      if (j.is_string() && j.get<std::string>() == n) {
        v = e;
        return;
      }
      names += names.empty() ? n : std::string(", ") + n;
    }
    throw ConfigError(where(key) + ": " + j.dump() + " is not one of " + names);
  }

  void finish() {
    close();
    for (const auto& [k, _] : root_.items()) {
      if (root_.at(k).is_object() && known_sections_.count(k)) continue;
      if (!root_.at(k).is_object() && top_keys_.count(k)) continue;
      throw ConfigError("unknown key '" + k + "'");
    }
  }

 private:
  std::string where(const char* key) const { return name_.empty() ? key : name_ + "." + key; }

  void close() {
    if (name_.empty()) {
      top_keys_.insert(seen_.begin(), seen_.end());
    } else if (cur_ != nullptr) {
      for (const auto& [k, _] : cur_->items()) {
        if (!seen_.count(k)) throw ConfigError("unknown key '" + name_ + "." + k + "'");
      }
    }
    seen_.clear();
  }

  const json& root_;
  const json* cur_ = nullptr;
  std::string name_;
  std::set<std::string> seen_, known_sections_, top_keys_;
};

class Writer {
 public:
  void section(const std::string& name) { name_ = name; }

  template <class T>
  void field(const char* key, T& v) {
    slot(key) = v;
  }
  void field(const char* key, std::optional<double>& v) {
    slot(key) = v ? json(*v) : json(nullptr);
  }
  template <class E>
  void choice(const char* key, E& v, const Choices<E>& options) {
    for (const auto& [n, e] : options) {
      if (e == v) slot(key) = n;
    }
  }
  void finish() {}

  json out = json::object();

 private:
  json& slot(const char* key) { return name_.empty() ? out[key] : out[name_][key]; }
  std::string name_;
};

inline const Choices<flow::Scheme> kSchemes{
    {"euler", flow::Scheme::euler}, {"midpoint", flow::Scheme::midpoint}, {"rk4", flow::Scheme::rk4}};
inline const Choices<nn::Activation> kActivations{{"identity", nn::Activation::identity},
                                                  {"tanh", nn::Activation::tanh},
                                                  {"relu", nn::Activation::relu},
                                                  {"silu", nn::Activation::silu},
                                                  {"softplus", nn::Activation::softplus}};

/// Single description of the config tree, shared by reading and writing.
template <class V>
void visit(RunConfig& c, V& v) {
  agent::LoopConfig& l = c.loop;
  v.section("");
  v.field("seed", l.seed);
  v.field("output_dir", c.output_dir);
  v.field("threads", c.threads);

  v.section("env");
  v.field("name", c.env);
  v.field("gamma", c.gamma);
  v.field("horizon", c.horizon);
  v.field("goal", c.goal);
  v.field("noise_std", c.noise_std);

  v.section("net");
  v.choice("architecture", l.flow_net.architecture,
           Choices<nn::Architecture>{{"feedforward", nn::Architecture::feedforward},
                                     {"mini-attention", nn::Architecture::mini_attention}});
  v.field("hidden", l.flow_net.hidden);
  v.choice("activation", l.flow_net.activation, kActivations);
  v.field("time_width", l.flow_net.time_width);
  v.field("attention_width", l.flow_net.attention.model_width);
  v.field("attention_heads", l.flow_net.attention.heads);
  v.field("attention_blocks", l.flow_net.attention.blocks);
  v.field("attention_ff_width", l.flow_net.attention.ff_width);
  v.field("attention_pos_width", l.flow_net.attention.pos_width);

  v.section("cfm");
  v.field("epochs", l.cfm.epochs);
  v.field("steps_per_epoch", l.cfm.steps_per_epoch);
  v.field("batch_size", l.cfm.batch_size);
  v.field("sigma", l.cfm.sigma);
  v.field("kl_weight", l.kl_weight);
  v.field("var_floor", l.cfm.var_floor);
  v.field("h_values", l.cfm.h_values);
  v.field("lr", l.cfm.adam.lr);
  v.field("clip_norm", l.cfm.adam.clip_norm);
  v.field("lr_final_fraction", l.cfm.lr_final_fraction);

  v.section("control");
  v.field("alpha", l.control_alpha);
  v.field("epochs", l.control.epochs);
  v.field("steps_per_epoch", l.control.steps_per_epoch);
  v.field("batch_size", l.control.batch_size);
  v.field("h_values", l.control.h_values);
  v.field("rollout_steps", l.control.rollout.steps);
  v.choice("rollout_scheme", l.control.rollout.scheme, kSchemes);
  v.field("jacobian_steps", l.control.jacobian_flow.steps);
  v.choice("jacobian_scheme", l.control.jacobian_flow.scheme, kSchemes);
  v.field("quad_nodes", l.control.quad_nodes);
  v.choice("quadrature", l.control.quadrature,
           Choices<control::QuadratureKind>{{"midpoint", control::QuadratureKind::midpoint},
                                            {"gauss-legendre", control::QuadratureKind::gauss_legendre}});
  v.choice("gain_mode", l.control.gain.mode,
           Choices<control::GainMode>{{"scalar", control::GainMode::scalar},
                                      {"constant", control::GainMode::constant},
                                      {"diagonal", control::GainMode::diagonal}});
  v.field("gain_constant", l.control.gain.constant);
  v.field("eps_pd", l.control.eps_pd);
  v.field("gramian_every", l.control.gramian_every);
  v.choice("pairing", l.control.pairing,
           Choices<control::Pairing>{{"independent", control::Pairing::independent},
                                     {"reverse-flow", control::Pairing::reverse_flow}});
  v.field("fd_step", l.control.fd_step);
  v.field("lr", l.control.adam.lr);

  v.section("guidance");
  v.field("beta", l.beta);
  v.field("zeta", l.zeta);
  v.field("lambda_j", l.lambda_j);
  v.field("epochs", l.guidance.epochs);
  v.field("steps_per_epoch", l.guidance.steps_per_epoch);
  v.field("batch_size", l.guidance.batch_size);
  v.field("sigma", l.guidance.sigma);
  v.field("h_values", l.guidance.h_values);
  v.field("lr", l.guidance.adam.lr);
  v.field("lr_final_fraction", l.guidance.lr_final_fraction);
  v.field("energy_segments", l.energy_segments);

  v.section("sampler");
  v.field("h", l.sample.h);
  v.field("ode_steps", l.sample.ode_steps);
  v.choice("scheme", l.sample.scheme, kSchemes);
  v.field("control", l.sample.control_on);
  v.field("guidance", l.sample.guidance_on);
  v.field("beta", l.sample.beta);
  v.field("recompute_rewards", l.sample.recompute_rewards);
  v.field("batch_size", l.sample.batch_size);
  v.field("trajectories", l.gen_trajectories);

  v.section("agent");
  v.field("hidden", l.sac.hidden);
  v.choice("activation", l.sac.activation, kActivations);
  v.field("tau", l.sac.tau);
  v.field("init_alpha", l.sac.init_alpha);
  v.field("auto_alpha", l.sac.auto_alpha);
  v.field("target_entropy", l.sac.target_entropy);
  v.field("reward_scale", l.sac.reward_scale);
  v.field("actor_every", l.sac.actor_every);
  v.field("lr_actor", l.sac.actor_adam.lr);
  v.field("lr_critic", l.sac.critic_adam.lr);
  v.field("lr_alpha", l.sac.alpha_adam.lr);
  v.field("batch_size", l.sac_batch);

  v.section("loop");
  v.field("rounds", l.rounds);
  v.field("warmup_steps", l.warmup_steps);
  v.field("env_steps_per_round", l.env_steps_per_round);
  v.field("sac_updates_per_round", l.sac_updates_per_round);
  v.field("mixture_ratio", l.mixture_ratio);
  v.field("real_capacity", l.real_capacity);
  v.field("model_capacity", l.model_capacity);
  v.field("eval_episodes", l.eval_episodes);
  v.field("generation", l.generation);
  v.field("checkpoint_every", l.checkpoint_every);
  v.field("pretrained", l.pretrained);
  v.finish();
}

inline std::pair<int, int> line_col(const std::string& text, std::size_t byte) {
  int line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  RunConfig copy = c;
  detail::Writer w;
  detail::visit(copy, w);
  return w.out;
}

/// Builds a config from a tree; absent keys keep their defaults and unknown
/// keys are rejected.
inline RunConfig from_json(const json& j) {
  RunConfig c;
  detail::Reader r(j);
  detail::visit(c, r);
  return c;
}

/// JSON text with // comments allowed. Syntax errors carry line and column.
inline json parse_config_text(const std::string& text, const std::string& origin = "config") {
  try {
    return json::parse(text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    const auto [line, col] = detail::line_col(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": syntax error");
  }
}

/// Applies CTRLFLOW__section__key=value overrides (or CTRLFLOW__key for top
/// level keys). Values are parsed as JSON scalars, falling back to strings.
inline void apply_env_overrides(json& j, const std::vector<std::string>& assignments) {
  static const std::string prefix = "CTRLFLOW__";
  for (const std::string& a : assignments) {
    if (a.rfind(prefix, 0) != 0) continue;
    const std::size_t eq = a.find('=');
    if (eq == std::string::npos) continue;
    const std::string path = a.substr(prefix.size(), eq - prefix.size());
    const std::string text = a.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::exception&) {
      value = text;
    }
    if (value.is_structured()) throw ConfigError("override " + path + " must be a scalar");
    const std::size_t sep = path.find("__");
    if (sep == std::string::npos) {
      j[path] = value;
    } else {
      const std::string section = path.substr(0, sep), key = path.substr(sep + 2);
      if (key.empty() || key.find("__") != std::string::npos) throw ConfigError("bad override name " + path);
      if (j.contains(section) && !j[section].is_object()) throw ConfigError("override target " + section + " is not a section");
      j[section][key] = value;
    }
  }
}

inline std::vector<std::string> process_environment() {
  std::vector<std::string> out;
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) out.emplace_back(*e);
  return out;
}

/// Reads a config file, applies environment overrides and validates.
inline RunConfig load_config(const std::string& path, const std::vector<std::string>& env = process_environment()) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  json j = parse_config_text(ss.str(), path);
  if (!j.is_object()) throw ConfigError(path + ": config root must be an object");
  apply_env_overrides(j, env);
  RunConfig c = from_json(j);
  c.validate();
  return c;
}

}  // namespace ctrlflow::cli
