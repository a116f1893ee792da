#pragma once

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "ctrlflow/core/blob.hpp"
#include "ctrlflow/core/errors.hpp"

namespace ctrlflow::nn {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

/// Adam with bias correction. An all-zero gradient leaves parameters and
/// moments untouched but still counts as a step.
class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig cfg, Eigen::Index n) : cfg_(cfg), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {
    if (!(cfg.lr > 0)) throw ConfigError("learning rate must be positive");
    if (!(cfg.beta1 > 0 && cfg.beta1 < 1) || !(cfg.beta2 > 0 && cfg.beta2 < 1)) {
      throw ConfigError("Adam decay rates must lie in (0, 1)");
    }
  }

  const AdamConfig& config() const { return cfg_; }
  long steps() const { return step_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void step(Eigen::VectorXd& params, Eigen::VectorXd grad) {
    if (grad.size() != params.size() || grad.size() != m_.size()) {
      throw ConfigError("optimizer/parameter size mismatch");
    }
    ++step_;
    if ((grad.array() == 0.0).all()) return;
    if (!grad.allFinite()) throw NumericOverflowError("non-finite gradient", step_);
    if (cfg_.clip_norm > 0) {
      const double n = grad.norm();
      if (n > cfg_.clip_norm) grad *= cfg_.clip_norm / n;
    }
    m_ = cfg_.beta1 * m_ + (1 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (1 - cfg_.beta2) * grad.cwiseAbs2();
    const double c1 = 1 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1 - std::pow(cfg_.beta2, static_cast<double>(step_));
    params.array() -= cfg_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
  }

  void save(BlobWriter& w, const std::string& prefix) const {
    w.put_reals(prefix + ".cfg", {cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.eps, cfg_.clip_norm});
    w.put_int(prefix + ".step", step_);
    w.put_vector(prefix + ".m", m_);
    w.put_vector(prefix + ".v", v_);
  }
  void load(const BlobReader& r, const std::string& prefix) {
    auto c = r.get_reals(prefix + ".cfg");
    if (c.size() != 5) throw IoError("corrupt optimizer config for " + prefix);
    cfg_ = {c[0], c[1], c[2], c[3], c[4]};
    step_ = r.get_int(prefix + ".step");
    m_ = r.get_vector(prefix + ".m");
    v_ = r.get_vector(prefix + ".v");
  }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  Eigen::VectorXd m_, v_;
};

/// Cosine schedule from `base` at epoch 0 to `base * final_fraction` at the
/// last epoch.
inline double cosine_lr(double base, double final_fraction, int epoch, int epochs) {
  if (epochs <= 1) return base;
  const double p = static_cast<double>(epoch) / (epochs - 1);
  return base * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * p)));
}

}  // namespace ctrlflow::nn
