#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ctrlflow/core/blob.hpp"
#include "ctrlflow/core/errors.hpp"
#include "ctrlflow/core/rng.hpp"
#include "ctrlflow/nn/encoding.hpp"
#include "ctrlflow/nn/tape.hpp"

namespace ctrlflow::nn {

enum class Activation { identity, tanh, relu, silu, softplus };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::silu: return "silu";
    case Activation::softplus: return "softplus";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  for (Activation a : {Activation::identity, Activation::tanh, Activation::relu, Activation::silu,
                       Activation::softplus}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown activation '" + s + "'");
}

enum class Architecture { feedforward, mini_attention };

inline const char* to_string(Architecture a) {
  return a == Architecture::feedforward ? "feedforward" : "mini-attention";
}

inline Architecture architecture_from_string(const std::string& s) {
  if (s == "feedforward") return Architecture::feedforward;
  if (s == "mini-attention") return Architecture::mini_attention;
  throw ConfigError("unknown architecture '" + s + "'");
}

struct LayerSpec {
  Index in = 0;
  Index out = 0;
  Activation act = Activation::identity;
};

/// Token-wise transformer: per-token input projection, `blocks` rounds of
/// (multi-head self-attention + residual, two-layer MLP + residual), and a
/// per-token output projection. Tokens carry a sinusoidal position code.
struct AttentionSpec {
  Index token_in = 0;
  Index token_out = 0;
  Index model_width = 64;
  Index heads = 4;
  Index blocks = 1;
  Index ff_width = 128;
  Index pos_width = 8;
};

namespace detail {

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return std::tanh(x);
    case Activation::relu: return x > 0 ? x : 0.0;
    case Activation::silu: return x * nn::detail::sigmoid(x);
    case Activation::softplus: return nn::detail::softplus(x);
  }
  return x;
}

inline Var activate(Activation a, Var x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return nn::tanh(x);
    case Activation::relu: return nn::relu(x);
    case Activation::silu: return nn::silu(x);
    case Activation::softplus: return nn::softplus(x);
  }
  return x;
}

inline void check_finite(const Matrix& m, Index layer) {
  if (!m.allFinite()) throw NumericOverflowError("non-finite activation in forward pass", layer);
}

}  // namespace detail

/// Parameterised function approximator with a single flat parameter vector.
class ParamNet {
 public:
  ParamNet() = default;

  /// Dense stack. `time_width` > 0 appends a sinusoidal embedding of the
  /// flow time to the input of the first layer.
  static ParamNet feedforward(Index in, const std::vector<Index>& hidden, Index out,
                              Activation hidden_act, Activation out_act, Index time_width,
                              Rng& rng, double out_scale = 1.0) {
    ParamNet net;
    net.arch_ = Architecture::feedforward;
    net.time_width_ = time_width;
    Index prev = in + time_width;
    for (Index w : hidden) {
      net.layers_.push_back({prev, w, hidden_act});
      prev = w;
    }
    net.layers_.push_back({prev, out, out_act});
    net.data_in_ = in;
    net.params_ = Vector::Zero(net.count_params());
    net.init(rng, out_scale);
    return net;
  }

  /// Dense stack with explicit layer specs and all-zero parameters.
  static ParamNet from_layers(std::vector<LayerSpec> layers, Index time_width = 0) {
    if (layers.empty()) throw ConfigError("a net needs at least one layer");
    for (std::size_t i = 1; i < layers.size(); ++i) {
      if (layers[i].in != layers[i - 1].out) throw ConfigError("layer widths do not chain");
    }
    if (layers.front().in <= time_width) throw ConfigError("first layer narrower than time embedding");
    ParamNet net;
    net.arch_ = Architecture::feedforward;
    net.time_width_ = time_width;
    net.data_in_ = layers.front().in - time_width;
    net.layers_ = std::move(layers);
    net.params_ = Vector::Zero(net.count_params());
    return net;
  }

  static ParamNet mini_attention(const AttentionSpec& spec, Index time_width, Rng& rng,
                                 double out_scale = 1.0) {
    if (spec.model_width % spec.heads != 0) throw ConfigError("model width must divide into heads");
    if (spec.pos_width % 2 != 0) throw ConfigError("position width must be even");
    ParamNet net;
    net.arch_ = Architecture::mini_attention;
    net.attn_ = spec;
    net.time_width_ = time_width;
    net.data_in_ = spec.token_in;
    net.params_ = Vector::Zero(net.count_params());
    net.init(rng, out_scale);
    return net;
  }

  Architecture architecture() const { return arch_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const AttentionSpec& attention_spec() const { return attn_; }
  Index time_width() const { return time_width_; }
  bool time_conditioned() const { return time_width_ > 0; }

  /// Declared input width. For the attention variant this is the per-token
  /// width; inputs hold any whole number of tokens.
  Index input_width() const { return data_in_; }
  Index output_width() const {
    return arch_ == Architecture::feedforward ? layers_.back().out : attn_.token_out;
  }
  Index parameter_count() const { return params_.size(); }
  const Vector& parameters() const { return params_; }
  Vector& parameters() { return params_; }

  /// Batched forward; columns of X are samples.
  Matrix forward(const Matrix& X, const RowVector* t = nullptr) const {
    check_time(t, X.cols());
    if (arch_ == Architecture::feedforward) return forward_dense(X, t);
    Tape tape;
    return forward(tape, tape.constant(X), t, nullptr).value();
  }
  Matrix forward(const Matrix& X, const RowVector& t) const { return forward(X, &t); }

  Vector forward(const Vector& x, std::optional<double> t = std::nullopt) const {
    Matrix X = x;
    if (t) {
      RowVector tv = RowVector::Constant(1, *t);
      return forward(X, &tv).col(0);
    }
    return forward(X, nullptr).col(0);
  }

  /// Forward pass recorded on a tape. When `sink` is non-null the parameter
  /// gradient is accumulated into it by Tape::backward.
  Var forward(Tape& tape, Var X, const RowVector* t, Vector* sink) const {
    if (sink != nullptr && sink->size() != parameter_count()) {
      throw ConfigError("gradient sink has " + std::to_string(sink->size()) + " entries, net has " +
                        std::to_string(parameter_count()));
    }
    check_time(t, X.cols());
    if (arch_ == Architecture::feedforward) return forward_dense(tape, X, t, sink);
    return forward_attention(tape, X, t, sink);
  }

  void save(BlobWriter& w, const std::string& prefix) const {
    w.put_string(prefix + ".arch", to_string(arch_));
    w.put_int(prefix + ".time_width", time_width_);
    w.put_int(prefix + ".data_in", data_in_);
    if (arch_ == Architecture::feedforward) {
      std::vector<std::int64_t> spec;
      for (const auto& l : layers_) {
        spec.push_back(l.in);
        spec.push_back(l.out);
        spec.push_back(static_cast<std::int64_t>(l.act));
      }
      w.put_ints(prefix + ".layers", spec);
    } else {
      w.put_ints(prefix + ".attention", {attn_.token_in, attn_.token_out, attn_.model_width, attn_.heads,
                                         attn_.blocks, attn_.ff_width, attn_.pos_width});
    }
    w.put_vector(prefix + ".params", params_);
  }

  static ParamNet load(const BlobReader& r, const std::string& prefix) {
    ParamNet net;
    net.arch_ = architecture_from_string(r.get_string(prefix + ".arch"));
    net.time_width_ = r.get_int(prefix + ".time_width");
    net.data_in_ = r.get_int(prefix + ".data_in");
    if (net.arch_ == Architecture::feedforward) {
      auto spec = r.get_ints(prefix + ".layers");
      if (spec.size() % 3 != 0) throw IoError("corrupt layer spec for " + prefix);
      for (std::size_t i = 0; i < spec.size(); i += 3) {
        net.layers_.push_back({spec[i], spec[i + 1], static_cast<Activation>(spec[i + 2])});
      }
    } else {
      auto a = r.get_ints(prefix + ".attention");
      if (a.size() != 7) throw IoError("corrupt attention spec for " + prefix);
      net.attn_ = {a[0], a[1], a[2], a[3], a[4], a[5], a[6]};
    }
    net.params_ = r.get_vector(prefix + ".params");
    if (net.params_.size() != net.count_params()) {
      throw IoError("parameter count mismatch for " + prefix);
    }
    return net;
  }

  friend bool operator==(const ParamNet& a, const ParamNet& b) {
    if (a.arch_ != b.arch_ || a.time_width_ != b.time_width_ || a.data_in_ != b.data_in_) return false;
    if (a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
      if (a.layers_[i].in != b.layers_[i].in || a.layers_[i].out != b.layers_[i].out ||
          a.layers_[i].act != b.layers_[i].act) {
        return false;
      }
    }
    const auto& x = a.attn_;
    const auto& y = b.attn_;
    if (a.arch_ == Architecture::mini_attention &&
        (x.token_in != y.token_in || x.token_out != y.token_out || x.model_width != y.model_width ||
         x.heads != y.heads || x.blocks != y.blocks || x.ff_width != y.ff_width || x.pos_width != y.pos_width)) {
      return false;
    }
    return a.params_.size() == b.params_.size() &&
           (a.params_.array() == b.params_.array()).all();
  }

 private:
  // Parameter slices are addressed by (offset, rows, cols); W is stored
  // column-major, biases follow their weight matrix.
  struct Slot {
    Index offset, rows, cols;
  };

  Index count_params() const {
    if (arch_ == Architecture::feedforward) {
      Index n = 0;
      for (const auto& l : layers_) n += l.out * l.in + l.out;
      return n;
    }
    const auto& s = attn_;
    const Index in = s.token_in + s.pos_width + time_width_;
    Index n = s.model_width * in + s.model_width;
    n += s.blocks * (4 * s.model_width * s.model_width + s.model_width + s.ff_width * s.model_width +
                     s.ff_width + s.model_width * s.ff_width + s.model_width);
    n += s.token_out * s.model_width + s.token_out;
    return n;
  }

  /// Walks the parameter layout in storage order.
  template <class Fn>
  void for_each_slot(Fn fn) const {
    Index off = 0;
    auto slot = [&](Index r, Index c, bool is_bias, bool is_output) {
      fn(Slot{off, r, c}, is_bias, is_output);
      off += r * c;
    };
    if (arch_ == Architecture::feedforward) {
      for (std::size_t i = 0; i < layers_.size(); ++i) {
        const bool last = i + 1 == layers_.size();
        slot(layers_[i].out, layers_[i].in, false, last);
        slot(layers_[i].out, 1, true, last);
      }
      return;
    }
    const auto& s = attn_;
    const Index in = s.token_in + s.pos_width + time_width_;
    slot(s.model_width, in, false, false);
    slot(s.model_width, 1, true, false);
    for (Index b = 0; b < s.blocks; ++b) {
      for (int k = 0; k < 4; ++k) slot(s.model_width, s.model_width, false, false);
      slot(s.model_width, 1, true, false);
      slot(s.ff_width, s.model_width, false, false);
      slot(s.ff_width, 1, true, false);
      slot(s.model_width, s.ff_width, false, false);
      slot(s.model_width, 1, true, false);
    }
    slot(s.token_out, s.model_width, false, true);
    slot(s.token_out, 1, true, true);
  }

  void init(Rng& rng, double out_scale) {
    for_each_slot([&](Slot s, bool is_bias, bool is_output) {
      if (is_bias) return;
      const double stdv = 1.0 / std::sqrt(static_cast<double>(s.cols)) * (is_output ? out_scale : 1.0);
      for (Index i = 0; i < s.rows * s.cols; ++i) params_(s.offset + i) = stdv * rng.normal();
    });
  }

  Eigen::Map<const Matrix> view(Slot s) const {
    return Eigen::Map<const Matrix>(params_.data() + s.offset, s.rows, s.cols);
  }

  std::vector<Slot> slots() const {
    std::vector<Slot> out;
    for_each_slot([&](Slot s, bool, bool) { out.push_back(s); });
    return out;
  }

  void check_time(const RowVector* t, Index batch) const {
    if (time_conditioned()) {
      if (t == nullptr) throw ConfigError("time-conditioned net evaluated without a time input");
      if (t->size() != batch) throw ConfigError("time vector length does not match batch size");
    }
  }

  Matrix dense_input(const Matrix& X, const RowVector* t) const {
    if (X.rows() != data_in_) {
      throw ConfigError("input width " + std::to_string(X.rows()) + " does not match declared width " +
                        std::to_string(data_in_));
    }
    if (!time_conditioned()) return X;
    Matrix in(data_in_ + time_width_, X.cols());
    in.topRows(data_in_) = X;
    in.bottomRows(time_width_) = time_embed(*t, time_width_);
    return in;
  }

  Matrix forward_dense(const Matrix& X, const RowVector* t) const {
    Matrix h = dense_input(X, t);
    const auto sl = slots();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Matrix z = view(sl[2 * i]) * h;
      z = z.colwise() + view(sl[2 * i + 1]).col(0);
      const Activation a = layers_[i].act;
      h = z.unaryExpr([a](double x) { return detail::activate(a, x); });
      detail::check_finite(h, static_cast<Index>(i));
    }
    return h;
  }

  Var param(Tape& tape, Slot s, Vector* sink) const {
    return tape.parameter(Matrix(view(s)), sink, s.offset);
  }

  Var forward_dense(Tape& tape, Var X, const RowVector* t, Vector* sink) const {
    if (X.rows() != data_in_) {
      throw ConfigError("input width " + std::to_string(X.rows()) + " does not match declared width " +
                        std::to_string(data_in_));
    }
    Var h = X;
    if (time_conditioned()) h = vcat({X, tape.constant(time_embed(*t, time_width_))});
    const auto sl = slots();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Var z = add_col(matmul(param(tape, sl[2 * i], sink), h), param(tape, sl[2 * i + 1], sink));
      h = detail::activate(layers_[i].act, z);
      detail::check_finite(h.value(), static_cast<Index>(i));
    }
    return h;
  }

  Var forward_attention(Tape& tape, Var X, const RowVector* t, Vector* sink) const {
    const auto& s = attn_;
    if (X.rows() % s.token_in != 0) {
      throw ConfigError("input height " + std::to_string(X.rows()) + " is not a multiple of token width " +
                        std::to_string(s.token_in));
    }
    const Index len = X.rows() / s.token_in;
    const Index batch = X.cols();
    const Index ncols = len * batch;

    Var tokens = reshape(X, s.token_in, ncols);
    std::vector<long> pos(static_cast<std::size_t>(len));
    for (Index i = 0; i < len; ++i) pos[static_cast<std::size_t>(i)] = static_cast<long>(i);
    const Matrix pe = temporal_encode(pos, s.pos_width).transpose();  // pos_width x len
    Matrix extra(s.pos_width + time_width_, ncols);
    for (Index b = 0; b < batch; ++b) extra.block(0, b * len, s.pos_width, len) = pe;
    if (time_conditioned()) {
      const Matrix te = time_embed(*t, time_width_);
      for (Index b = 0; b < batch; ++b) {
        extra.block(s.pos_width, b * len, time_width_, len) = te.col(b).replicate(1, len);
      }
    }
    Var in = vcat({tokens, tape.constant(std::move(extra))});

    const auto sl = slots();
    std::size_t k = 0;
    auto next = [&]() { return param(tape, sl[k++], sink); };
    Var W = next();
    Var h = add_col(matmul(W, in), next());
    detail::check_finite(h.value(), 0);
    for (Index b = 0; b < s.blocks; ++b) {
      Var Wq = next(), Wk = next(), Wv = next(), Wo = next(), bo = next();
      Var att = attention(matmul(Wq, h), matmul(Wk, h), matmul(Wv, h), len, s.heads);
      h = h + add_col(matmul(Wo, att), bo);
      Var W1 = next(), b1 = next(), W2 = next(), b2 = next();
      h = h + add_col(matmul(W2, silu(add_col(matmul(W1, h), b1))), b2);
      detail::check_finite(h.value(), b + 1);
    }
    Var Wout = next();
    Var y = add_col(matmul(Wout, h), next());
    detail::check_finite(y.value(), s.blocks + 1);
    return reshape(y, len * s.token_out, batch);
  }

  Architecture arch_ = Architecture::feedforward;
  std::vector<LayerSpec> layers_;
  AttentionSpec attn_;
  Index time_width_ = 0;
  Index data_in_ = 0;
  Vector params_;
};

}  // namespace ctrlflow::nn
