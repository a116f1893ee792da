#pragma once

// Matrix-valued reverse-mode tape.
//
// Every value is an Eigen matrix whose columns are batch entries. Nodes are
// appended in evaluation order, so a reverse sweep over the node list is a
// valid topological order for the backward pass.

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "ctrlflow/core/errors.hpp"

namespace ctrlflow::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Eigen::Index;

class Tape;

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix v) { return push(std::move(v), false, {}); }

  /// Leaf whose gradient is kept on the tape (read it back with grad()).
  Var variable(Matrix v) {
    Var out = push(std::move(v), true, {});
    nodes_[static_cast<std::size_t>(out.id)].keep_grad = true;
    return out;
  }

  /// Leaf bound to a slice of a flat gradient vector. The slice receives
  /// the column-major gradient of this leaf on backward().
  Var parameter(Matrix v, Vector* sink, Index offset) {
    if (sink == nullptr) return constant(std::move(v));
    Var out = push(std::move(v), true, {});
    Node& n = nodes_[static_cast<std::size_t>(out.id)];
    n.sink = sink;
    n.offset = offset;
    return out;
  }

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  /// Gradient of a node after backward(); zero matrix when untouched.
  Matrix grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Reverse sweep from a 1x1 node.
  void backward(Var root, double seed = 1.0) {
    if (root.tape != this) throw ConfigError("backward root belongs to another tape");
    if (value(root).size() != 1) throw ConfigError("backward root must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_ref(root.id).setConstant(seed);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.size() == 0) continue;
      if (n.sink != nullptr) {
        n.sink->segment(n.offset, n.grad.size()) +=
            Eigen::Map<const Vector>(n.grad.data(), n.grad.size());
      }
      if (n.back) n.back(*this, id);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Building blocks for op definitions.
  Var push(Matrix value, bool needs_grad, std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }
  const Matrix& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& upstream(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool wants(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  Matrix& grad_ref(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    bool keep_grad = false;
    std::function<void(Tape&, int)> back;
    Vector* sink = nullptr;
    Index offset = 0;
  };
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

// ---------------------------------------------------------------------------
// Ops

namespace detail {
inline void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ConfigError("operands live on different tapes");
}
inline void same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
  }
}

/// Unary elementwise op given f(x) and f'(x) expressed through x and y=f(x).
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tape& t = *a.tape;
  Matrix y = a.value().unaryExpr(f);
  const int ai = a.id;
  return t.push(std::move(y), t.wants(ai), [ai, df](Tape& tp, int self) {
    const Matrix& x = tp.val(ai);
    const Matrix& yv = tp.val(self);
    Matrix d(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) d.data()[i] = df(x.data()[i], yv.data()[i]);
    tp.grad_ref(ai).array() += tp.upstream(self).array() * d.array();
  });
}

inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.cols() != b.rows()) throw ConfigError("matmul: inner dimensions differ");
  Tape& t = *a.tape;
  const int ai = a.id, bi = b.id;
  return t.push(a.value() * b.value(), t.wants(ai) || t.wants(bi), [ai, bi](Tape& tp, int self) {
    const Matrix& g = tp.upstream(self);
    if (tp.wants(ai)) tp.grad_ref(ai).noalias() += g * tp.val(bi).transpose();
    if (tp.wants(bi)) tp.grad_ref(bi).noalias() += tp.val(ai).transpose() * g;
  });
}

inline Var operator+(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "add");
  Tape& t = *a.tape;
  const int ai = a.id, bi = b.id;
  return t.push(a.value() + b.value(), t.wants(ai) || t.wants(bi), [ai, bi](Tape& tp, int self) {
    if (tp.wants(ai)) tp.grad_ref(ai) += tp.upstream(self);
    if (tp.wants(bi)) tp.grad_ref(bi) += tp.upstream(self);
  });
}

inline Var operator-(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "sub");
  Tape& t = *a.tape;
  const int ai = a.id, bi = b.id;
  return t.push(a.value() - b.value(), t.wants(ai) || t.wants(bi), [ai, bi](Tape& tp, int self) {
    if (tp.wants(ai)) tp.grad_ref(ai) += tp.upstream(self);
    if (tp.wants(bi)) tp.grad_ref(bi) -= tp.upstream(self);
  });
}

/// Elementwise product.
inline Var cmul(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "cmul");
  Tape& t = *a.tape;
  const int ai = a.id, bi = b.id;
  Matrix y = a.value().cwiseProduct(b.value());
  return t.push(std::move(y), t.wants(ai) || t.wants(bi), [ai, bi](Tape& tp, int self) {
    const Matrix& g = tp.upstream(self);
    if (tp.wants(ai)) tp.grad_ref(ai) += g.cwiseProduct(tp.val(bi));
    if (tp.wants(bi)) tp.grad_ref(bi) += g.cwiseProduct(tp.val(ai));
  });
}

/// Elementwise quotient.
inline Var cdiv(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "cdiv");
  Tape& t = *a.tape;
  const int ai = a.id, bi = b.id;
  Matrix y = a.value().cwiseQuotient(b.value());
  return t.push(std::move(y), t.wants(ai) || t.wants(bi), [ai, bi](Tape& tp, int self) {
    const Matrix& g = tp.upstream(self);
    const Matrix& bv = tp.val(bi);
    if (tp.wants(ai)) tp.grad_ref(ai) += g.cwiseQuotient(bv);
    if (tp.wants(bi)) {
      tp.grad_ref(bi).array() -= g.array() * tp.val(self).array() / bv.array();
    }
  });
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.push(a.value() * c, t.wants(ai), [ai, c](Tape& tp, int self) {
    tp.grad_ref(ai) += c * tp.upstream(self);
  });
}
inline Var operator*(double c, Var a) { return scale(a, c); }

inline Var add_scalar(Var a, double c) {
  Tape& t = *a.tape;
  const int ai = a.id;
  Matrix y = a.value().array() + c;
  return t.push(std::move(y), t.wants(ai), [ai](Tape& tp, int self) {
    tp.grad_ref(ai) += tp.upstream(self);
  });
}

/// a (r x c) + column vector b (r x 1) broadcast across columns.
inline Var add_col(Var a, Var b) {
  detail::same_tape(a, b);
  if (b.cols() != 1 || b.rows() != a.rows()) throw ConfigError("add_col: bias shape mismatch");
  Tape& t = *a.tape;
  const int ai = a.id, bi = b.id;
  Matrix y = a.value().colwise() + b.value().col(0);
  return t.push(std::move(y), t.wants(ai) || t.wants(bi), [ai, bi](Tape& tp, int self) {
    const Matrix& g = tp.upstream(self);
    if (tp.wants(ai)) tp.grad_ref(ai) += g;
    if (tp.wants(bi)) tp.grad_ref(bi) += g.rowwise().sum();
  });
}

/// Scales column j of a by r(0, j).
inline Var mul_row(Var a, Var r) {
  detail::same_tape(a, r);
  if (r.rows() != 1 || r.cols() != a.cols()) throw ConfigError("mul_row: shape mismatch");
  Tape& t = *a.tape;
  const int ai = a.id, ri = r.id;
  Matrix y = a.value() * r.value().row(0).asDiagonal();
  return t.push(std::move(y), t.wants(ai) || t.wants(ri), [ai, ri](Tape& tp, int self) {
    const Matrix& g = tp.upstream(self);
    if (tp.wants(ai)) tp.grad_ref(ai) += g * tp.val(ri).row(0).asDiagonal();
    if (tp.wants(ri)) tp.grad_ref(ri) += g.cwiseProduct(tp.val(ai)).colwise().sum();
  });
}

/// Repeats a 1 x c row vector into an n x c matrix.
inline Var broadcast_rows(Var r, Index n) {
  if (r.rows() != 1) throw ConfigError("broadcast_rows expects a row vector");
  Tape& t = *r.tape;
  const int ri = r.id;
  Matrix y = r.value().replicate(n, 1);
  return t.push(std::move(y), t.wants(ri), [ri](Tape& tp, int self) {
    tp.grad_ref(ri) += tp.upstream(self).colwise().sum();
  });
}

/// Sum over all entries -> 1x1.
inline Var sum(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  Matrix y(1, 1);
  y(0, 0) = a.value().sum();
  return t.push(std::move(y), t.wants(ai), [ai](Tape& tp, int self) {
    tp.grad_ref(ai).array() += tp.upstream(self)(0, 0);
  });
}
inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Mean over columns -> r x 1.
inline Var row_mean(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  const double inv = 1.0 / static_cast<double>(a.cols());
  Matrix y = a.value().rowwise().sum() * inv;
  return t.push(std::move(y), t.wants(ai), [ai, inv](Tape& tp, int self) {
    tp.grad_ref(ai).colwise() += tp.upstream(self).col(0) * inv;
  });
}

/// Sum over rows -> 1 x c.
inline Var col_sum(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  Matrix y = a.value().colwise().sum();
  return t.push(std::move(y), t.wants(ai), [ai](Tape& tp, int self) {
    tp.grad_ref(ai).rowwise() += tp.upstream(self).row(0);
  });
}

inline Var rows(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ConfigError("rows: out of range");
  Tape& t = *a.tape;
  const int ai = a.id;
  Matrix y = a.value().middleRows(start, count);
  return t.push(std::move(y), t.wants(ai), [ai, start, count](Tape& tp, int self) {
    tp.grad_ref(ai).middleRows(start, count) += tp.upstream(self);
  });
}

inline Var cols(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ConfigError("cols: out of range");
  Tape& t = *a.tape;
  const int ai = a.id;
  Matrix y = a.value().middleCols(start, count);
  return t.push(std::move(y), t.wants(ai), [ai, start, count](Tape& tp, int self) {
    tp.grad_ref(ai).middleCols(start, count) += tp.upstream(self);
  });
}

/// Vertical concatenation.
inline Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("vcat of nothing");
  Tape& t = *parts.front().tape;
  Index total = 0;
  const Index c = parts.front().cols();
  bool wants = false;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.tape != &t || p.cols() != c) throw ConfigError("vcat: incompatible parts");
    total += p.rows();
    wants = wants || t.wants(p.id);
    ids.push_back(p.id);
  }
  Matrix y(total, c);
  Index r = 0;
  for (const Var& p : parts) {
    y.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.push(std::move(y), wants, [ids](Tape& tp, int self) {
    Index r = 0;
    for (int id : ids) {
      const Index n = tp.val(id).rows();
      if (tp.wants(id)) tp.grad_ref(id) += tp.upstream(self).middleRows(r, n);
      r += n;
    }
  });
}

/// Column-major reinterpretation to a new shape.
inline Var reshape(Var a, Index r, Index c) {
  if (r * c != a.value().size()) throw ConfigError("reshape: size mismatch");
  Tape& t = *a.tape;
  const int ai = a.id;
  Matrix y = Eigen::Map<const Matrix>(a.value().data(), r, c);
  return t.push(std::move(y), t.wants(ai), [ai](Tape& tp, int self) {
    Matrix& g = tp.grad_ref(ai);
    g += Eigen::Map<const Matrix>(tp.upstream(self).data(), g.rows(), g.cols());
  });
}

inline Var cmin(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "cmin");
  Tape& t = *a.tape;
  const int ai = a.id, bi = b.id;
  Matrix y = a.value().cwiseMin(b.value());
  return t.push(std::move(y), t.wants(ai) || t.wants(bi), [ai, bi](Tape& tp, int self) {
    const Matrix& g = tp.upstream(self);
    const Matrix& av = tp.val(ai);
    const Matrix& bv = tp.val(bi);
    for (Index i = 0; i < g.size(); ++i) {
      const bool take_a = av.data()[i] <= bv.data()[i];
      if (take_a && tp.wants(ai)) tp.grad_ref(ai).data()[i] += g.data()[i];
      if (!take_a && tp.wants(bi)) tp.grad_ref(bi).data()[i] += g.data()[i];
    }
  });
}

/// max(a, c) elementwise; gradient is zero where the floor is active.
inline Var max_const(Var a, double c) {
  return detail::unary(
      a, [c](double x) { return x > c ? x : c; },
      [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var tanh(Var a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
inline Var relu(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
inline Var sigmoid(Var a) {
  return detail::unary(
      a, [](double x) { return detail::sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}
inline Var silu(Var a) {
  return detail::unary(
      a, [](double x) { return x * detail::sigmoid(x); },
      [](double x, double) {
        const double s = detail::sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}
inline Var softplus(Var a) {
  return detail::unary(
      a, [](double x) { return detail::softplus(x); }, [](double x, double) { return detail::sigmoid(x); });
}
inline Var exp(Var a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Var log(Var a) {
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Var square(Var a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Grouped multi-head scaled dot-product attention.
///
/// q, k, v are (width x group*count) with tokens of one group stored in
/// consecutive columns. Attention mixes tokens only inside a group; heads
/// split the width into equal row blocks.
inline Var attention(Var q, Var k, Var v, Index group, Index heads) {
  detail::same_shape(q, k, "attention");
  detail::same_shape(q, v, "attention");
  const Index width = q.rows();
  if (heads <= 0 || width % heads != 0) throw ConfigError("attention: width not divisible by heads");
  if (group <= 0 || q.cols() % group != 0) throw ConfigError("attention: columns not divisible by group");
  Tape& t = *q.tape;
  const Index dh = width / heads;
  const Index groups = q.cols() / group;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));

  // Attention weights per (group, head), kept for the backward pass.
  std::vector<Matrix> weights(static_cast<std::size_t>(groups * heads));
  Matrix out(width, q.cols());
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  for (Index g = 0; g < groups; ++g) {
    for (Index hd = 0; hd < heads; ++hd) {
      auto Qb = Q.block(hd * dh, g * group, dh, group);
      auto Kb = K.block(hd * dh, g * group, dh, group);
      auto Vb = V.block(hd * dh, g * group, dh, group);
      Matrix S = (Qb.transpose() * Kb) * inv;  // S(i, j) = q_i . k_j
      for (Index i = 0; i < group; ++i) {
        const double m = S.row(i).maxCoeff();
        S.row(i) = (S.row(i).array() - m).exp().matrix();
        S.row(i) /= S.row(i).sum();
      }
      out.block(hd * dh, g * group, dh, group).noalias() = Vb * S.transpose();
      weights[static_cast<std::size_t>(g * heads + hd)] = std::move(S);
    }
  }
  const int qi = q.id, ki = k.id, vi = v.id;
  const bool wants = t.wants(qi) || t.wants(ki) || t.wants(vi);
  return t.push(std::move(out), wants,
                [qi, ki, vi, group, heads, dh, groups, inv, weights = std::move(weights)](
                    Tape& tp, int self) {
                  const Matrix& G = tp.upstream(self);
                  const Matrix& Qv = tp.val(qi);
                  const Matrix& Kv = tp.val(ki);
                  const Matrix& Vv = tp.val(vi);
                  for (Index g = 0; g < groups; ++g) {
                    for (Index hd = 0; hd < heads; ++hd) {
                      const Matrix& P = weights[static_cast<std::size_t>(g * heads + hd)];
                      auto Gb = G.block(hd * dh, g * group, dh, group);
                      auto Qb = Qv.block(hd * dh, g * group, dh, group);
                      auto Kb = Kv.block(hd * dh, g * group, dh, group);
                      auto Vb = Vv.block(hd * dh, g * group, dh, group);
                      if (tp.wants(vi)) tp.grad_ref(vi).block(hd * dh, g * group, dh, group) += Gb * P;
                      Matrix dP = Gb.transpose() * Vb;  // dP(i, j) = g_i . v_j
                      Matrix dS(group, group);
                      for (Index i = 0; i < group; ++i) {
                        const double dot = dP.row(i).dot(P.row(i));
                        dS.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - dot).matrix());
                      }
                      dS *= inv;
                      if (tp.wants(qi)) tp.grad_ref(qi).block(hd * dh, g * group, dh, group) += Kb * dS.transpose();
                      if (tp.wants(ki)) tp.grad_ref(ki).block(hd * dh, g * group, dh, group) += Qb * dS;
                    }
                  }
                });
}

}  // namespace ctrlflow::nn
