#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "ctrlflow/core/errors.hpp"

namespace ctrlflow::nn {

/// Sinusoidal position codes, one row per position. Column 2i holds
/// sin(p / 10000^(2i/width)) and column 2i+1 the matching cosine, so
/// position 0 maps to (0, 1, 0, 1, ...).
inline Eigen::MatrixXd temporal_encode(const std::vector<long>& positions, long width) {
  if (width <= 0 || width % 2 != 0) {
    throw ConfigError("temporal encoding width must be positive and even, got " +
                      std::to_string(width));
  }
  Eigen::MatrixXd out(static_cast<Eigen::Index>(positions.size()), width);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    if (positions[r] < 0) throw ConfigError("temporal encoding position must be non-negative");
    const double p = static_cast<double>(positions[r]);
    for (long i = 0; i < width / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(width));
      out(static_cast<Eigen::Index>(r), 2 * i) = std::sin(p * freq);
      out(static_cast<Eigen::Index>(r), 2 * i + 1) = std::cos(p * freq);
    }
  }
  return out;
}

/// Embedding of flow times t in [0, 1]: interleaved sin/cos at frequencies
/// spaced geometrically in [1, 100]. Returns width x batch.
inline Eigen::MatrixXd time_embed(const Eigen::RowVectorXd& t, long width) {
  if (width <= 0 || width % 2 != 0) throw ConfigError("time embedding width must be positive and even");
  const long k = width / 2;
  Eigen::MatrixXd out(width, t.size());
  for (long i = 0; i < k; ++i) {
    const double freq = k == 1 ? 1.0 : std::pow(100.0, static_cast<double>(i) / static_cast<double>(k - 1));
    for (Eigen::Index j = 0; j < t.size(); ++j) {
      out(2 * i, j) = std::sin(freq * t(j));
      out(2 * i + 1, j) = std::cos(freq * t(j));
    }
  }
  return out;
}

}  // namespace ctrlflow::nn
