#pragma once

// Reverse-mode differentiation over matrix-level primitives.
//
// A Tape records every primitive applied to Vars in evaluation order, so
// node inputs always precede the node. Leaves are either trainable
// parameters or constants. reverse_grad() walks the tape backwards from a
// scalar output and returns one gradient per parameter, in the order the
// parameters were registered.

#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "infoflow/core/array.hpp"
#include "infoflow/core/ops.hpp"

namespace infoflow {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  int id() const noexcept { return id_; }
  const Array& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Inputs = std::vector<const Array*>;
  using Forward = std::function<Array(const Inputs&)>;
  /// Fills grads[i] for every input with need[i] set. `out` is the node's
  /// value and `g` the upstream gradient (same shape as out).
  using Backward = std::function<void(const Inputs& in, const Array& out, const Matrix& g,
                                      const std::vector<bool>& need, std::vector<Matrix>& grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var parameter(Array v) {
    Var out = leaf(std::make_shared<const Array>(std::move(v)), true);
    params_.push_back(out.id());
    return out;
  }

  Var constant(Array v) { return leaf(std::make_shared<const Array>(std::move(v)), false); }
  /// Shares storage with the caller; avoids copying large design matrices.
  Var constant(std::shared_ptr<const Array> v) { return leaf(std::move(v), false); }

  Var record(std::string_view op, const std::vector<Var>& inputs, Forward fwd, Backward bwd) {
    Node n;
    n.op = op;
    n.requires_grad = false;
    for (const Var& v : inputs) {
      if (v.tape() != this) throw Error("tape: input Var belongs to a different tape");
      n.inputs.push_back(v.id());
      n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.id())].requires_grad;
    }
    n.value = std::make_shared<const Array>(fwd(gather_inputs(n)));
    n.forward = std::move(fwd);
    n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Array& value(int id) const { return *nodes_.at(static_cast<std::size_t>(id)).value; }
  std::string_view op(int id) const { return nodes_.at(static_cast<std::size_t>(id)).op; }
  const std::vector<int>& inputs(int id) const {
    return nodes_.at(static_cast<std::size_t>(id)).inputs;
  }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<int>& parameters() const noexcept { return params_; }

  /// Replaces a leaf value; call replay() to refresh dependent nodes.
  void set_leaf(const Var& v, Array value) {
    Node& n = nodes_.at(static_cast<std::size_t>(v.id()));
    if (n.forward) throw Error("tape: set_leaf on a non-leaf node");
    if (!same_shape(*n.value, value)) throw ShapeError("tape: set_leaf shape mismatch");
    n.value = std::make_shared<const Array>(std::move(value));
  }

  /// Recomputes every non-leaf node in recorded order from current leaves.
  void replay() {
    for (Node& n : nodes_) {
      if (n.forward) n.value = std::make_shared<const Array>(n.forward(gather_inputs(n)));
    }
  }

 private:
  friend std::vector<Array> reverse_grad(const Tape& tape, const Var& output);

  struct Node {
    std::string_view op = "leaf";
    std::vector<int> inputs;
    std::shared_ptr<const Array> value;
    Forward forward;
    Backward backward;
    bool requires_grad = false;
  };

  Var leaf(std::shared_ptr<const Array> v, bool trainable) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = trainable;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  Inputs gather_inputs(const Node& n) const {
    Inputs in;
    in.reserve(n.inputs.size());
    for (int i : n.inputs) in.push_back(nodes_[static_cast<std::size_t>(i)].value.get());
    return in;
  }

  std::vector<Node> nodes_;
  std::vector<int> params_;
};

inline const Array& Var::value() const {
  if (tape_ == nullptr) throw Error("Var: not attached to a tape");
  return tape_->value(id_);
}

/// Exact reverse-accumulated gradient of a scalar output with respect to
/// every registered parameter. Parameters the output does not depend on get
/// zero gradients.
inline std::vector<Array> reverse_grad(const Tape& tape, const Var& output) {
  if (output.tape() != &tape) throw Error("reverse_grad: output is not on this tape");
  const Array& out = tape.value(output.id());
  if (out.rows() != 1 || out.cols() != 1)
    throw ShapeError("reverse_grad: output must be scalar, got " + out.shape_str());

  const auto n = static_cast<std::size_t>(output.id()) + 1;
  std::vector<Matrix> grad(n);
  std::vector<char> has(n, 0);
  grad[n - 1] = Matrix::Ones(1, 1);
  has[n - 1] = 1;

  for (std::size_t k = n; k-- > 0;) {
    const auto& node = tape.nodes_[k];
    if (!has[k] || !node.backward || !node.requires_grad) continue;
    std::vector<bool> need(node.inputs.size());
    for (std::size_t i = 0; i < node.inputs.size(); ++i)
      need[i] = tape.nodes_[static_cast<std::size_t>(node.inputs[i])].requires_grad;
    std::vector<Matrix> g_in(node.inputs.size());
    node.backward(tape.gather_inputs(node), *node.value, grad[k], need, g_in);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (!need[i]) continue;
      const auto src = static_cast<std::size_t>(node.inputs[i]);
      if (has[src]) {
        grad[src] += g_in[i];
      } else {
        grad[src] = std::move(g_in[i]);
        has[src] = 1;
      }
    }
    grad[k] = Matrix();  // release intermediate storage early
  }

  std::vector<Array> result;
  result.reserve(tape.params_.size());
  for (int p : tape.params_) {
    const Array& v = tape.value(p);
    const auto idx = static_cast<std::size_t>(p);
    if (idx < n && has[idx]) {
      result.emplace_back(grad[idx]);
    } else {
      result.emplace_back(v.rows(), v.cols(), 0.0);
    }
  }
  return result;
}

namespace ops {

namespace detail {

inline Tape& tape_of(const Var& a) {
  if (a.tape() == nullptr) throw Error("ops: Var is not attached to a tape");
  return *a.tape();
}

inline Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw Error("ops: Vars belong to different tapes");
  return tape_of(a);
}

}  // namespace detail

/// Brings a constant into the same evaluation mode as `like`.
inline const Array& value_of(const Var& a) { return a.value(); }
inline Array lift(const Array&, Array v) { return v; }
inline Var lift(const Var& like, Array v) { return detail::tape_of(like).constant(std::move(v)); }

inline Var matmul(const Var& a, const Var& b) {
  return detail::tape_of(a, b).record(
      "matmul", {a, b}, [](const Tape::Inputs& in) { return matmul(*in[0], *in[1]); },
      [](const Tape::Inputs& in, const Array&, const Matrix& g, const std::vector<bool>& need,
         std::vector<Matrix>& out) {
        if (need[0]) out[0] = g * in[1]->mat().transpose();
        if (need[1]) out[1] = in[0]->mat().transpose() * g;
      });
}

inline Var add(const Var& a, const Var& b) {
  return detail::tape_of(a, b).record(
      "add", {a, b}, [](const Tape::Inputs& in) { return add(*in[0], *in[1]); },
      [](const Tape::Inputs& in, const Array&, const Matrix& g, const std::vector<bool>& need,
         std::vector<Matrix>& out) {
        if (need[0]) out[0] = detail::reduce_to(g, in[0]->rows(), in[0]->cols());
        if (need[1]) out[1] = detail::reduce_to(g, in[1]->rows(), in[1]->cols());
      });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::tape_of(a, b).record(
      "sub", {a, b}, [](const Tape::Inputs& in) { return sub(*in[0], *in[1]); },
      [](const Tape::Inputs& in, const Array&, const Matrix& g, const std::vector<bool>& need,
         std::vector<Matrix>& out) {
        if (need[0]) out[0] = detail::reduce_to(g, in[0]->rows(), in[0]->cols());
        if (need[1]) out[1] = detail::reduce_to(-g, in[1]->rows(), in[1]->cols());
      });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::tape_of(a, b).record(
      "mul", {a, b}, [](const Tape::Inputs& in) { return mul(*in[0], *in[1]); },
      [](const Tape::Inputs& in, const Array&, const Matrix& g, const std::vector<bool>& need,
         std::vector<Matrix>& out) {
        const Index r = g.rows(), c = g.cols();
        if (need[0])
          out[0] = detail::reduce_to(g.cwiseProduct(detail::expand(in[1]->mat(), r, c)),
                                     in[0]->rows(), in[0]->cols());
        if (need[1])
          out[1] = detail::reduce_to(g.cwiseProduct(detail::expand(in[0]->mat(), r, c)),
                                     in[1]->rows(), in[1]->cols());
      });
}

inline Var div(const Var& a, const Var& b) {
  return detail::tape_of(a, b).record(
      "div", {a, b}, [](const Tape::Inputs& in) { return div(*in[0], *in[1]); },
      [](const Tape::Inputs& in, const Array& y, const Matrix& g, const std::vector<bool>& need,
         std::vector<Matrix>& out) {
        const Index r = g.rows(), c = g.cols();
        const Matrix bx = detail::expand(in[1]->mat(), r, c);
        if (need[0])
          out[0] = detail::reduce_to(g.cwiseQuotient(bx), in[0]->rows(), in[0]->cols());
        if (need[1])
          out[1] = detail::reduce_to(Matrix(-g.cwiseProduct(y.mat()).cwiseQuotient(bx)),
                                     in[1]->rows(), in[1]->cols());
      });
}

inline Var add(const Var& a, const Array& b) { return add(a, lift(a, b)); }
inline Var sub(const Var& a, const Array& b) { return sub(a, lift(a, b)); }
inline Var sub(const Array& a, const Var& b) { return sub(lift(b, a), b); }
inline Var mul(const Var& a, const Array& b) { return mul(a, lift(a, b)); }
inline Var div(const Var& a, const Array& b) { return div(a, lift(a, b)); }
inline Var matmul(const Array& a, const Var& b) { return matmul(lift(b, a), b); }
inline Var matmul(const Var& a, const Array& b) { return matmul(a, lift(a, b)); }

namespace detail {

template <typename F, typename D>
Var unary(const char* name, const Var& a, F f, D dfdx) {
  return tape_of(a).record(
      name, {a}, [f](const Tape::Inputs& in) { return f(*in[0]); },
      [dfdx](const Tape::Inputs& in, const Array& y, const Matrix& g,
             const std::vector<bool>& need, std::vector<Matrix>& out) {
        if (need[0]) out[0] = dfdx(in[0]->mat(), y.mat(), g);
      });
}

}  // namespace detail

inline Var scale(const Var& a, double s) {
  return detail::unary(
      "scale", a, [s](const Array& x) { return scale(x, s); },
      [s](const Matrix&, const Matrix&, const Matrix& g) -> Matrix { return g * s; });
}

inline Var add_scalar(const Var& a, double s) {
  return detail::unary(
      "add_scalar", a, [s](const Array& x) { return add_scalar(x, s); },
      [](const Matrix&, const Matrix&, const Matrix& g) -> Matrix { return g; });
}

inline Var neg(const Var& a) {
  return detail::unary(
      "neg", a, [](const Array& x) { return neg(x); },
      [](const Matrix&, const Matrix&, const Matrix& g) -> Matrix { return -g; });
}

inline Var exp(const Var& a) {
  return detail::unary(
      "exp", a, [](const Array& x) { return exp(x); },
      [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix { return g.cwiseProduct(y); });
}

inline Var log(const Var& a) {
  return detail::unary(
      "log", a, [](const Array& x) { return log(x); },
      [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return g.cwiseQuotient(x);
      });
}

inline Var tanh(const Var& a) {
  return detail::unary(
      "tanh", a, [](const Array& x) { return tanh(x); },
      [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix {
        return g.array() * (1.0 - y.array().square());
      });
}

inline Var relu(const Var& a) {
  return detail::unary(
      "relu", a, [](const Array& x) { return relu(x); },
      [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return (x.array() > 0.0).select(g, 0.0);
      });
}

inline Var square(const Var& a) {
  return detail::unary(
      "square", a, [](const Array& x) { return square(x); },
      [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return 2.0 * x.cwiseProduct(g);
      });
}

inline Var transpose(const Var& a) {
  return detail::unary(
      "transpose", a, [](const Array& x) { return transpose(x); },
      [](const Matrix&, const Matrix&, const Matrix& g) -> Matrix { return g.transpose(); });
}

inline Var sum(const Var& a) {
  return detail::unary(
      "sum", a, [](const Array& x) { return sum(x); },
      [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return Matrix::Constant(x.rows(), x.cols(), g(0, 0));
      });
}

inline Var mean(const Var& a) {
  return detail::unary(
      "mean", a, [](const Array& x) { return mean(x); },
      [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return Matrix::Constant(x.rows(), x.cols(), g(0, 0) / static_cast<double>(x.size()));
      });
}

inline Var row_sum(const Var& a) {
  return detail::unary(
      "row_sum", a, [](const Array& x) { return row_sum(x); },
      [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return g.replicate(1, x.cols());
      });
}

inline Var col_sum(const Var& a) {
  return detail::unary(
      "col_sum", a, [](const Array& x) { return col_sum(x); },
      [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return g.replicate(x.rows(), 1);
      });
}

inline Var col_mean(const Var& a) {
  return detail::unary(
      "col_mean", a, [](const Array& x) { return col_mean(x); },
      [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return g.replicate(x.rows(), 1) / static_cast<double>(x.rows());
      });
}

inline Var gather_cols(const Var& a, const std::vector<Index>& idx) {
  return detail::unary(
      "gather_cols", a, [idx](const Array& x) { return gather_cols(x, idx); },
      [idx](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        Matrix out = Matrix::Zero(x.rows(), x.cols());
        for (std::size_t j = 0; j < idx.size(); ++j) out.col(idx[j]) += g.col(static_cast<Index>(j));
        return out;
      });
}

inline Var gather_rows(const Var& a, const std::vector<Index>& idx) {
  return detail::unary(
      "gather_rows", a, [idx](const Array& x) { return gather_rows(x, idx); },
      [idx](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        Matrix out = Matrix::Zero(x.rows(), x.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) out.row(idx[i]) += g.row(static_cast<Index>(i));
        return out;
      });
}

inline Var scatter_cols(const std::vector<Var>& parts, const std::vector<std::vector<Index>>& dest,
                        Index total) {
  if (parts.empty()) throw ShapeError("scatter_cols: no parts");
  Tape& t = detail::tape_of(parts.front());
  return t.record(
      "scatter_cols", parts,
      [dest, total](const Tape::Inputs& in) {
        std::vector<const Matrix*> raw;
        for (const Array* a : in) raw.push_back(&a->mat());
        return Array(scatter_cols_raw(raw, dest, total));
      },
      [dest](const Tape::Inputs& in, const Array&, const Matrix& g, const std::vector<bool>& need,
             std::vector<Matrix>& out) {
        for (std::size_t p = 0; p < in.size(); ++p) {
          if (!need[p]) continue;
          Matrix gp(g.rows(), static_cast<Index>(dest[p].size()));
          for (std::size_t j = 0; j < dest[p].size(); ++j)
            gp.col(static_cast<Index>(j)) = g.col(dest[p][j]);
          out[p] = std::move(gp);
        }
      });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  std::vector<std::vector<Index>> dest;
  Index at = 0;
  for (const auto& p : parts) {
    std::vector<Index> d(static_cast<std::size_t>(p.cols()));
    std::iota(d.begin(), d.end(), at);
    at += p.cols();
    dest.push_back(std::move(d));
  }
  return scatter_cols(parts, dest, at);
}

inline Var logsumexp_rows(const Var& a) {
  return detail::unary(
      "logsumexp_rows", a, [](const Array& x) { return logsumexp_rows(x); },
      [](const Matrix& x, const Matrix& y, const Matrix& g) -> Matrix {
        Matrix soft = (x.colwise() - y.col(0)).array().exp();
        return soft.array().colwise() * g.col(0).array();
      });
}

inline Var add_identity(const Var& a, double lambda) {
  return detail::unary(
      "add_identity", a, [lambda](const Array& x) { return add_identity(x, lambda); },
      [](const Matrix&, const Matrix&, const Matrix& g) -> Matrix { return g; });
}

/// d ln det M / dM = M^{-T}.
inline Var log_det_pd(const Var& a) {
  return detail::unary(
      "log_det_pd", a, [](const Array& x) { return ops::log_det_pd(x); },
      [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
        return g(0, 0) * Matrix(inverse_pd(x).transpose());
      });
}

/// X = M^{-1} B. Gradients: dB = M^{-T} G, dM = -dB X^T.
inline Var solve_pd(const Var& m, const Var& b) {
  return detail::tape_of(m, b).record(
      "solve_pd", {m, b}, [](const Tape::Inputs& in) { return ops::solve_pd(*in[0], *in[1]); },
      [](const Tape::Inputs& in, const Array& x, const Matrix& g, const std::vector<bool>& need,
         std::vector<Matrix>& out) {
        Matrix gb = infoflow::solve_pd(Matrix(in[0]->mat().transpose()), g);
        if (need[0]) out[0] = -gb * x.mat().transpose();
        if (need[1]) out[1] = std::move(gb);
      });
}

}  // namespace ops

}  // namespace infoflow
