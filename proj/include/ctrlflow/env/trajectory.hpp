#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "ctrlflow/env/environment.hpp"

namespace ctrlflow::env {

struct Transition {
  Vector state;
  Vector action;
  double reward = 0.0;
  Vector next_state;
  bool done = false;
  /// False for padding and for generated entries whose successor state is
  /// unknown. The gain indicator is 1 exactly on these entries.
  bool valid = true;
};

enum class Source { environment, model };

struct Trajectory {
  std::vector<Transition> transitions;
  Source source = Source::environment;

  std::size_t size() const { return transitions.size(); }
  const Transition& operator[](std::size_t i) const { return transitions[i]; }
};

inline double discounted_return(const Trajectory& traj, double gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw DomainError("gamma must lie in [0, 1)");
  double g = 0.0;
  double w = 1.0;
  for (const Transition& tr : traj.transitions) {
    g += w * tr.reward;
    w *= gamma;
  }
  return g;
}

/// Feature width of one (state, action, reward) step.
inline int step_features(const EnvSpec& spec) { return spec.d_s + spec.d_a + 1; }

/// Column i holds (s_i, a_i, r_i).
inline Matrix to_matrix(const Trajectory& traj) {
  if (traj.size() == 0) return Matrix();
  const Eigen::Index ds = traj[0].state.size();
  const Eigen::Index da = traj[0].action.size();
  Matrix m(ds + da + 1, static_cast<Eigen::Index>(traj.size()));
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    m.col(c).head(ds) = traj[i].state;
    m.col(c).segment(ds, da) = traj[i].action;
    m(ds + da, c) = traj[i].reward;
  }
  return m;
}

/// Inverse of `to_matrix` for generated trajectories: next_state of step i is
/// the state of step i+1, the last step is marked invalid.
inline Trajectory from_matrix(const Matrix& m, int d_s, int d_a, Source source = Source::model) {
  if (m.rows() != d_s + d_a + 1) throw ConfigError("trajectory matrix has wrong feature width");
  Trajectory t;
  t.source = source;
  const Eigen::Index h = m.cols();
  t.transitions.resize(static_cast<std::size_t>(h));
  for (Eigen::Index i = 0; i < h; ++i) {
    Transition& tr = t.transitions[static_cast<std::size_t>(i)];
    tr.state = m.col(i).head(d_s);
    tr.action = m.col(i).segment(d_s, d_a);
    tr.reward = m(d_s + d_a, i);
    if (i + 1 < h) {
      tr.next_state = m.col(i + 1).head(d_s);
    } else {
      tr.next_state = Vector::Zero(d_s);
      tr.valid = false;
    }
  }
  return t;
}

/// Checks next_state[i] == state[i+1] bitwise.
inline bool is_chained(const Trajectory& traj) {
  for (std::size_t i = 0; i + 1 < traj.size(); ++i) {
    if (traj[i].next_state != traj[i + 1].state) return false;
  }
  return true;
}

/// Episode log: one CSV row per transition.
class EpisodeCsv {
 public:
  EpisodeCsv(const std::string& path, int d_s, int d_a) : out_(path), d_s_(d_s), d_a_(d_a) {
    if (!out_) throw IoError("cannot open " + path);
    out_ << "episode,step";
    for (int i = 0; i < d_s; ++i) out_ << ",s" << i;
    for (int i = 0; i < d_a; ++i) out_ << ",a" << i;
    out_ << ",reward,done\n";
    out_.precision(17);
  }

  void write(long episode, const Trajectory& traj) {
    for (std::size_t i = 0; i < traj.size(); ++i) write(episode, static_cast<long>(i), traj[i]);
  }

  void write(long episode, long step, const Transition& tr) {
    if (tr.state.size() != d_s_ || tr.action.size() != d_a_) throw ConfigError("transition shape mismatch");
    out_ << episode << ',' << step;
    for (int i = 0; i < d_s_; ++i) out_ << ',' << tr.state(i);
    for (int i = 0; i < d_a_; ++i) out_ << ',' << tr.action(i);
    out_ << ',' << tr.reward << ',' << (tr.done ? 1 : 0) << '\n';
  }

  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
  int d_s_;
  int d_a_;
};

}  // namespace ctrlflow::env
