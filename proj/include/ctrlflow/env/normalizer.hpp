#pragma once

#include <string>

#include "ctrlflow/core/blob.hpp"
#include "ctrlflow/env/replay_buffer.hpp"

namespace ctrlflow::env {

/// Per-feature affine map on (s, a, r) columns, shared by all time steps.
class Normalizer {
 public:
  Normalizer() = default;
  Normalizer(Vector mean, Vector stddev) : mean_(std::move(mean)), std_(std::move(stddev)) {
    if (mean_.size() != std_.size()) throw ConfigError("normalizer mean/std size mismatch");
  }

  static Normalizer identity(Eigen::Index features) {
    return Normalizer(Vector::Zero(features), Vector::Ones(features));
  }

  /// Moments of every stored (s, a, r) column. Features with spread below
  /// `min_std` keep unit scale.
  static Normalizer fit(const ReplayBuffer& buffer, double min_std = 1e-6) {
    const long n = buffer.size();
    if (n == 0) throw NotReadyError("cannot fit a normalizer on an empty buffer");
    const Transition first = buffer.at(0);
    const Eigen::Index ds = first.state.size(), da = first.action.size();
    Matrix x(ds + da + 1, n);
    for (long i = 0; i < n; ++i) {
      const Transition tr = buffer.at(i);
      x.col(i) << tr.state, tr.action, tr.reward;
    }
    return fit(x, min_std);
  }

  /// Columns of `x` are samples.
  static Normalizer fit(const Matrix& x, double min_std = 1e-6) {
    const Vector mean = x.rowwise().mean();
    const Vector var = (x.colwise() - mean).array().square().rowwise().mean();
    Vector sd = var.cwiseSqrt();
    for (Eigen::Index i = 0; i < sd.size(); ++i) {
      if (sd(i) < min_std) sd(i) = 1.0;
    }
    return Normalizer(mean, sd);
  }

  Eigen::Index features() const { return mean_.size(); }
  const Vector& mean() const { return mean_; }
  const Vector& stddev() const { return std_; }

  /// `x` is features x steps (one trajectory) or features x samples.
  Matrix normalize(const Matrix& x) const {
    check(x);
    return (x.colwise() - mean_).array().colwise() / std_.array();
  }

  Matrix denormalize(const Matrix& x) const {
    check(x);
    return (x.array().colwise() * std_.array()).matrix().colwise() + mean_;
  }

  double reward_mean() const { return mean_(mean_.size() - 1); }
  double reward_std() const { return std_(std_.size() - 1); }
  double denormalize_reward(double r) const { return r * reward_std() + reward_mean(); }

  void save(BlobWriter& w, const std::string& prefix) const {
    w.put_vector(prefix + ".mean", mean_);
    w.put_vector(prefix + ".std", std_);
  }

  static Normalizer load(const BlobReader& r, const std::string& prefix) {
    return Normalizer(r.get_vector(prefix + ".mean"), r.get_vector(prefix + ".std"));
  }

 private:
  void check(const Matrix& x) const {
    if (x.rows() != mean_.size()) throw ConfigError("normalizer feature width mismatch");
  }

  Vector mean_;
  Vector std_;
};

}  // namespace ctrlflow::env
