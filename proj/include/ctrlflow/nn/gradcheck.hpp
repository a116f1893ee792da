#pragma once

#include <algorithm>
#include <functional>

#include <Eigen/Dense>

namespace ctrlflow::nn {

struct GradCheckResult {
  double relative_error = 0.0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

/// Compares an analytic gradient with central differences of `loss`
/// around `x`. The error is ||g_a - g_fd|| / max(||g_a||, ||g_fd||, tiny).
inline GradCheckResult check_gradient(const std::function<double(const Eigen::VectorXd&)>& loss,
                                      Eigen::VectorXd x, const Eigen::VectorXd& analytic,
                                      double step = 1e-5) {
  Eigen::VectorXd numeric(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x(i);
    x(i) = keep + step;
    const double up = loss(x);
    x(i) = keep - step;
    const double down = loss(x);
    x(i) = keep;
    numeric(i) = (up - down) / (2 * step);
  }
  GradCheckResult r;
  r.analytic_norm = analytic.norm();
  r.numeric_norm = numeric.norm();
  const double denom = std::max({r.analytic_norm, r.numeric_norm, 1e-300});
  r.relative_error = (analytic - numeric).norm() / denom;
  return r;
}

}  // namespace ctrlflow::nn
