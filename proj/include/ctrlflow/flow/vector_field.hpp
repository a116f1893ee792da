#pragma once

#include <string>
#include <vector>

#include "ctrlflow/flow/ode.hpp"
#include "ctrlflow/nn/param_net.hpp"

namespace ctrlflow::flow {

using nn::Index;
using nn::Tape;
using nn::Var;

/// A trajectory-shaped point: F x h payload, column i = (s_i, a_i, r_i).
struct FlowState {
  Matrix payload;
  double t = 0.0;

  int h() const { return static_cast<int>(payload.cols()); }
  int features() const { return static_cast<int>(payload.rows()); }

  /// Step-major flattening (s_1, a_1, r_1, s_2, ...).
  Vector flatten() const { return Eigen::Map<const Vector>(payload.data(), payload.size()); }

  static FlowState unflatten(const Vector& x, int features, double t = 0.0) {
    if (features < 1 || x.size() % features != 0) throw ConfigError("payload size is not a multiple of F");
    FlowState s;
    s.payload = Eigen::Map<const Matrix>(x.data(), features, x.size() / features);
    s.t = t;
    return s;
  }
};

struct VectorFieldConfig {
  nn::Architecture architecture = nn::Architecture::feedforward;
  std::vector<Index> hidden{128, 128};
  nn::Activation activation = nn::Activation::silu;
  Index time_width = 16;
  nn::AttentionSpec attention;
  double out_scale = 1.0;
};

/// v(x, t) over batched flattened payloads of any length h <= max_h.
///
/// The feed-forward variant zero-pads the payload to max_h steps and appends
/// a step mask, which acts as the length embedding. The attention variant
/// treats steps as tokens with a sinusoidal position code.
class VectorFieldModel {
 public:
  VectorFieldModel() = default;

  /// `scalar_head` replaces the trajectory-shaped output by one value per
  /// sample (mean over tokens for the attention variant).
  VectorFieldModel(const VectorFieldConfig& cfg, int features, int max_h, Rng& rng, bool scalar_head = false)
      : features_(features), max_h_(max_h), out_features_(scalar_head ? 1 : features), scalar_(scalar_head) {
    if (features < 1 || max_h < 1) throw ConfigError("vector field needs F >= 1 and H >= 1");
    if (cfg.architecture == nn::Architecture::feedforward) {
      net_ = nn::ParamNet::feedforward(static_cast<Index>(max_h) * (features + 1), cfg.hidden,
                                       scalar_ ? 1 : static_cast<Index>(max_h) * features, cfg.activation,
                                       nn::Activation::identity, cfg.time_width, rng, cfg.out_scale);
    } else {
      nn::AttentionSpec spec = cfg.attention;
      spec.token_in = features;
      spec.token_out = out_features_;
      net_ = nn::ParamNet::mini_attention(spec, cfg.time_width, rng, cfg.out_scale);
    }
  }

  int features() const { return features_; }
  bool scalar_head() const { return scalar_; }
  int max_h() const { return max_h_; }
  const nn::ParamNet& net() const { return net_; }
  nn::ParamNet& net() { return net_; }
  Index parameter_count() const { return net_.parameter_count(); }
  Vector& parameters() { return net_.parameters(); }
  const Vector& parameters() const { return net_.parameters(); }

  int h_of(const Matrix& X) const {
    if (X.rows() % features_ != 0) throw ConfigError("payload rows are not a multiple of F");
    const int h = static_cast<int>(X.rows() / features_);
    if (h < 1 || h > max_h_) {
      throw ConfigError("trajectory length " + std::to_string(h) + " outside [1, " + std::to_string(max_h_) + "]");
    }
    return h;
  }

  /// X is (h F) x B; returns (h F) x B, or 1 x B for a scalar head.
  Matrix evaluate(const Matrix& X, const RowVector& t) const {
    const int h = h_of(X);
    if (net_.architecture() == nn::Architecture::mini_attention) {
      const Matrix y = net_.forward(X, t);
      return scalar_ ? Matrix(y.colwise().mean()) : y;
    }
    const Matrix y = net_.forward(pad(X, h), t);
    return scalar_ ? y : Matrix(y.topRows(static_cast<Index>(h) * features_));
  }

  Matrix evaluate(const Matrix& X, double t) const {
    return evaluate(X, RowVector::Constant(X.cols(), t));
  }

  Var evaluate(Tape& tape, Var X, const RowVector& t, Vector* sink) const {
    const int h = h_of(X.value());
    if (net_.architecture() == nn::Architecture::mini_attention) {
      const Var y = net_.forward(tape, X, &t, sink);
      return scalar_ ? nn::scale(nn::col_sum(y), 1.0 / static_cast<double>(h)) : y;
    }
    const Index B = X.cols();
    std::vector<Var> parts{X};
    if (h < max_h_) parts.push_back(tape.constant(Matrix::Zero((max_h_ - h) * features_, B)));
    parts.push_back(tape.constant(mask(h, B)));
    const Var y = net_.forward(tape, nn::vcat(parts), &t, sink);
    return scalar_ ? y : nn::rows(y, 0, static_cast<Index>(h) * features_);
  }

  Field field() const {
    return [this](const Matrix& X, double t) { return evaluate(X, t); };
  }

  void save(BlobWriter& w, const std::string& prefix) const {
    w.put_ints(prefix + ".shape", {features_, max_h_, scalar_ ? 1 : 0});
    net_.save(w, prefix + ".net");
  }

  static VectorFieldModel load(const BlobReader& r, const std::string& prefix) {
    VectorFieldModel m;
    const auto shape = r.get_ints(prefix + ".shape");
    if (shape.size() != 3) throw IoError("corrupt vector field header " + prefix);
    m.features_ = static_cast<int>(shape[0]);
    m.max_h_ = static_cast<int>(shape[1]);
    m.scalar_ = shape[2] != 0;
    m.out_features_ = m.scalar_ ? 1 : m.features_;
    m.net_ = nn::ParamNet::load(r, prefix + ".net");
    return m;
  }

  friend bool operator==(const VectorFieldModel& a, const VectorFieldModel& b) {
    return a.features_ == b.features_ && a.max_h_ == b.max_h_ && a.scalar_ == b.scalar_ &&
           a.net_ == b.net_;
  }

 private:
  Matrix mask(int h, Index B) const {
    Matrix m = Matrix::Zero(max_h_, B);
    m.topRows(h).setOnes();
    return m;
  }

  Matrix pad(const Matrix& X, int h) const {
    Matrix in = Matrix::Zero(static_cast<Index>(max_h_) * (features_ + 1), X.cols());
    in.topRows(X.rows()) = X;
    in.bottomRows(max_h_) = mask(h, X.cols());
    return in;
  }

  int features_ = 1;
  int max_h_ = 1;
  Index out_features_ = 1;
  bool scalar_ = false;
  nn::ParamNet net_;
};

}  // namespace ctrlflow::flow
