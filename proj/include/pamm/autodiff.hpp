#pragma once

// Reverse-mode differentiation over a closed set of matrix primitives.
//
// Every vector-Jacobian product is itself expressed with the same primitives
// and recorded on the tape, so a gradient can be differentiated again. Forces
// are obtained as -dE/dx and the force loss is then differentiated with
// respect to the parameters through that recorded gradient.

#include "pamm/common.hpp"

#include <Eigen/Sparse>

#include <memory>
#include <span>

namespace pamm::ad {

using pamm::Matrix;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor, std::int64_t>;

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,
  AddScalar,
  MatMul,
  Transpose,
  Exp,
  Sigmoid,
  Tanh,
  Sqrt,
  Reciprocal,
  Sin,
  Cos,
  Abs,
  Clip,
  BroadcastTo,
  SumTo,
  SpMM,
  ConcatCols,
  SliceCols,
  PadCols,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Exp: return "exp";
    case Op::Sigmoid: return "sigmoid";
    case Op::Tanh: return "tanh";
    case Op::Sqrt: return "sqrt";
    case Op::Reciprocal: return "reciprocal";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Abs: return "abs";
    case Op::Clip: return "clip";
    case Op::BroadcastTo: return "broadcast_to";
    case Op::SumTo: return "sum_to";
    case Op::SpMM: return "spmm";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceCols: return "slice_cols";
    case Op::PadCols: return "pad_cols";
  }
  return "?";
}

/// Constant sparse linear map, shared between the forward node and the
/// transposed products its gradients need.
using SparseOperator = std::shared_ptr<const SparseMatrix>;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

struct Node {
  Op op = Op::Constant;
  Matrix value;
  std::vector<int> inputs;
  double p0 = 0.0;
  double p1 = 0.0;
  Eigen::Index i0 = 0;
  Eigen::Index i1 = 0;
  SparseOperator sparse;
  bool transposed = false;
  bool requires_grad = false;
};

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
  }

  Var constant(Matrix value) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  Var push(Node n) {
    for (int in : n.inputs) n.requires_grad = n.requires_grad || node(in).requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
  }

  /// Gradients of a 1x1 output with respect to `wrt`. The gradient
  /// computation is recorded, so the returned Vars are differentiable.
  std::vector<Var> gradient(Var output, std::span<const Var> wrt);

 private:
  void backprop(int id, Var g, std::vector<char>& needed, std::vector<int>& grads);

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void check_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("autodiff: operands live on different tapes");
}

inline void check_same_shape(const Var& a, const Var& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::logic_error(std::string("autodiff: shape mismatch in ") + what + " (" +
                           std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                           std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
  }
}

inline Var unary(Op op, const Var& x, Matrix value, double p0 = 0.0, double p1 = 0.0) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.inputs = {x.id()};
  n.p0 = p0;
  n.p1 = p1;
  return x.tape().push(std::move(n));
}

inline Var binary(Op op, const Var& a, const Var& b, Matrix value) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.inputs = {a.id(), b.id()};
  return a.tape().push(std::move(n));
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "add");
  return detail::binary(Op::Add, a, b, a.value() + b.value());
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "sub");
  return detail::binary(Op::Sub, a, b, a.value() - b.value());
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "mul");
  return detail::binary(Op::Mul, a, b, a.value().cwiseProduct(b.value()));
}

inline Var neg(const Var& x) { return detail::unary(Op::Neg, x, -x.value()); }

inline Var scale(const Var& x, double c) { return detail::unary(Op::Scale, x, c * x.value(), c); }

inline Var add_scalar(const Var& x, double c) {
  return detail::unary(Op::AddScalar, x, (x.value().array() + c).matrix(), c);
}

inline Var matmul(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw std::logic_error("autodiff: matmul inner dimension mismatch (" + std::to_string(a.cols()) + " vs " +
                           std::to_string(b.rows()) + ")");
  }
  Matrix v = a.value() * b.value();
  return detail::binary(Op::MatMul, a, b, std::move(v));
}

inline Var transpose(const Var& x) {
  Matrix v = x.value().transpose();
  return detail::unary(Op::Transpose, x, std::move(v));
}

inline Var exp(const Var& x) { return detail::unary(Op::Exp, x, x.value().array().exp().matrix()); }

inline Var sigmoid(const Var& x) {
  Matrix v = (1.0 / (1.0 + (-x.value().array()).exp())).matrix();
  return detail::unary(Op::Sigmoid, x, std::move(v));
}

inline Var tanh(const Var& x) { return detail::unary(Op::Tanh, x, x.value().array().tanh().matrix()); }

inline Var sqrt(const Var& x) { return detail::unary(Op::Sqrt, x, x.value().array().sqrt().matrix()); }

inline Var reciprocal(const Var& x) {
  return detail::unary(Op::Reciprocal, x, x.value().array().inverse().matrix());
}

inline Var sin(const Var& x) { return detail::unary(Op::Sin, x, x.value().array().sin().matrix()); }

inline Var cos(const Var& x) { return detail::unary(Op::Cos, x, x.value().array().cos().matrix()); }

inline Var abs(const Var& x) { return detail::unary(Op::Abs, x, x.value().array().abs().matrix()); }

// Hard clip. The derivative is 1 on the closed interval [lo, hi], i.e. the
// interior-side value is used at the kinks.
inline Var clip(const Var& x, double lo, double hi) {
  return detail::unary(Op::Clip, x, x.value().cwiseMax(lo).cwiseMin(hi), lo, hi);
}

// Expands a 1x1, Rx1 or 1xC operand to R x C.
inline Var broadcast_to(const Var& x, Eigen::Index rows, Eigen::Index cols) {
  const auto& v = x.value();
  if ((v.rows() != 1 && v.rows() != rows) || (v.cols() != 1 && v.cols() != cols)) {
    throw std::logic_error("autodiff: cannot broadcast " + std::to_string(v.rows()) + "x" +
                           std::to_string(v.cols()) + " to " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (v.rows() == rows && v.cols() == cols) return x;
  Matrix out(rows, cols);
  if (v.rows() == 1 && v.cols() == 1) {
    out.setConstant(v(0, 0));
  } else if (v.rows() == 1) {
    out = v.replicate(rows, 1);
  } else {
    out = v.replicate(1, cols);
  }
  Node n;
  n.op = Op::BroadcastTo;
  n.value = std::move(out);
  n.inputs = {x.id()};
  return x.tape().push(std::move(n));
}

// Sums over the axes where the target extent is 1.
inline Var sum_to(const Var& x, Eigen::Index rows, Eigen::Index cols) {
  const auto& v = x.value();
  if ((rows != 1 && rows != v.rows()) || (cols != 1 && cols != v.cols())) {
    throw std::logic_error("autodiff: cannot sum " + std::to_string(v.rows()) + "x" + std::to_string(v.cols()) +
                           " to " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (rows == v.rows() && cols == v.cols()) return x;
  Matrix out;
  if (rows == 1 && cols == 1) {
    out = Matrix::Constant(1, 1, v.sum());
  } else if (rows == 1) {
    out = v.colwise().sum();
  } else {
    out = v.rowwise().sum();
  }
  Node n;
  n.op = Op::SumTo;
  n.value = std::move(out);
  n.inputs = {x.id()};
  return x.tape().push(std::move(n));
}

// S * x, or S^T * x when `transposed`.
inline Var spmm(const SparseOperator& s, const Var& x, bool transposed = false) {
  const auto inner = transposed ? s->rows() : s->cols();
  if (inner != x.rows()) {
    throw std::logic_error("autodiff: spmm dimension mismatch (" + std::to_string(inner) + " vs " +
                           std::to_string(x.rows()) + ")");
  }
  Matrix out = transposed ? Matrix(s->transpose() * x.value()) : Matrix(*s * x.value());
  Node n;
  n.op = Op::SpMM;
  n.value = std::move(out);
  n.inputs = {x.id()};
  n.sparse = s;
  n.transposed = transposed;
  return x.tape().push(std::move(n));
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::logic_error("autodiff: concat of nothing");
  const auto rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::logic_error("autodiff: concat row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index off = 0;
  Node n;
  n.op = Op::ConcatCols;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
    n.inputs.push_back(p.id());
  }
  n.value = std::move(out);
  return parts.front().tape().push(std::move(n));
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var slice_cols(const Var& x, Eigen::Index offset, Eigen::Index width) {
  if (offset < 0 || width < 0 || offset + width > x.cols()) throw std::logic_error("autodiff: slice out of range");
  Matrix v = x.value().middleCols(offset, width);
  Node n;
  n.op = Op::SliceCols;
  n.value = std::move(v);
  n.inputs = {x.id()};
  n.i0 = offset;
  n.i1 = width;
  return x.tape().push(std::move(n));
}

// Embeds x into a zero matrix of `total` columns starting at `offset`.
inline Var pad_cols(const Var& x, Eigen::Index offset, Eigen::Index total) {
  if (offset < 0 || offset + x.cols() > total) throw std::logic_error("autodiff: pad out of range");
  Matrix v = Matrix::Zero(x.rows(), total);
  v.middleCols(offset, x.cols()) = x.value();
  Node n;
  n.op = Op::PadCols;
  n.value = std::move(v);
  n.inputs = {x.id()};
  n.i0 = offset;
  n.i1 = total;
  return x.tape().push(std::move(n));
}

// Composites.

inline Var silu(const Var& x) { return mul(x, sigmoid(x)); }

inline Var sum(const Var& x) { return sum_to(x, 1, 1); }

// x * b where b is broadcast to x's shape.
inline Var mul_bcast(const Var& x, const Var& b) { return mul(x, broadcast_to(b, x.rows(), x.cols())); }

inline Var add_bcast(const Var& x, const Var& b) { return add(x, broadcast_to(b, x.rows(), x.cols())); }

// x W + b with a 1 x out bias row.
inline Var affine(const Var& x, const Var& w, const Var& b) { return add_bcast(matmul(x, w), b); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

inline std::vector<Var> Tape::gradient(Var output, std::span<const Var> wrt) {
  if (&output.tape() != this) throw std::logic_error("autodiff: output from another tape");
  if (output.rows() != 1 || output.cols() != 1) throw std::logic_error("autodiff: gradient of a non-scalar");
  const int top = output.id();
  const auto n = static_cast<std::size_t>(top) + 1;

  // needed[id]: node lies on a path from some wrt leaf to the output.
  std::vector<char> needed(n, 0);
  for (const auto& w : wrt) {
    if (w.id() <= top) needed[static_cast<std::size_t>(w.id())] = 1;
  }
  for (std::size_t id = 0; id < n; ++id) {
    if (needed[id]) continue;
    for (int in : nodes_[id].inputs) {
      if (needed[static_cast<std::size_t>(in)]) {
        needed[id] = 1;
        break;
      }
    }
  }

  std::vector<int> grads(n, -1);
  grads[n - 1] = constant(1.0).id();
  for (int id = top; id >= 0; --id) {
    const auto uid = static_cast<std::size_t>(id);
    if (grads[uid] < 0 || !needed[uid]) continue;
    if (nodes_[uid].inputs.empty()) continue;
    backprop(id, Var(this, grads[uid]), needed, grads);
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    const int g = w.id() <= top ? grads[static_cast<std::size_t>(w.id())] : -1;
    out.push_back(g >= 0 ? Var(this, g) : constant(Matrix::Zero(w.rows(), w.cols())));
  }
  return out;
}

inline void Tape::backprop(int id, Var g, std::vector<char>& needed, std::vector<int>& grads) {
  // Copy what is needed: pushing new nodes may reallocate nodes_.
  const Op op = nodes_[static_cast<std::size_t>(id)].op;
  const std::vector<int> inputs = nodes_[static_cast<std::size_t>(id)].inputs;
  const double p0 = nodes_[static_cast<std::size_t>(id)].p0;
  const double p1 = nodes_[static_cast<std::size_t>(id)].p1;
  const Eigen::Index i0 = nodes_[static_cast<std::size_t>(id)].i0;
  const SparseOperator sparse = nodes_[static_cast<std::size_t>(id)].sparse;
  const bool transposed = nodes_[static_cast<std::size_t>(id)].transposed;
  const Var y(this, id);

  auto want = [&](std::size_t k) { return needed[static_cast<std::size_t>(inputs[k])] != 0; };
  auto in = [&](std::size_t k) { return Var(this, inputs[k]); };
  auto accumulate = [&](std::size_t k, const Var& contribution) {
    auto& slot = grads[static_cast<std::size_t>(inputs[k])];
    slot = slot < 0 ? contribution.id() : add(Var(this, slot), contribution).id();
  };

  switch (op) {
    case Op::Leaf:
    case Op::Constant:
      break;
    case Op::Add:
      if (want(0)) accumulate(0, g);
      if (want(1)) accumulate(1, g);
      break;
    case Op::Sub:
      if (want(0)) accumulate(0, g);
      if (want(1)) accumulate(1, neg(g));
      break;
    case Op::Mul:
      if (want(0)) accumulate(0, mul(g, in(1)));
      if (want(1)) accumulate(1, mul(g, in(0)));
      break;
    case Op::Neg:
      accumulate(0, neg(g));
      break;
    case Op::Scale:
      accumulate(0, scale(g, p0));
      break;
    case Op::AddScalar:
      accumulate(0, g);
      break;
    case Op::MatMul:
      if (want(0)) accumulate(0, matmul(g, transpose(in(1))));
      if (want(1)) accumulate(1, matmul(transpose(in(0)), g));
      break;
    case Op::Transpose:
      accumulate(0, transpose(g));
      break;
    case Op::Exp:
      accumulate(0, mul(g, y));
      break;
    case Op::Sigmoid:
      accumulate(0, mul(g, mul(y, add_scalar(neg(y), 1.0))));
      break;
    case Op::Tanh:
      accumulate(0, mul(g, add_scalar(neg(mul(y, y)), 1.0)));
      break;
    case Op::Sqrt:
      accumulate(0, mul(g, scale(reciprocal(y), 0.5)));
      break;
    case Op::Reciprocal:
      accumulate(0, mul(g, neg(mul(y, y))));
      break;
    case Op::Sin:
      accumulate(0, mul(g, cos(in(0))));
      break;
    case Op::Cos:
      accumulate(0, neg(mul(g, sin(in(0)))));
      break;
    case Op::Abs: {
      Matrix sign = in(0).value().unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
      accumulate(0, mul(g, constant(std::move(sign))));
      break;
    }
    case Op::Clip: {
      Matrix mask = in(0).value().unaryExpr([p0, p1](double v) { return (v >= p0 && v <= p1) ? 1.0 : 0.0; });
      accumulate(0, mul(g, constant(std::move(mask))));
      break;
    }
    case Op::BroadcastTo: {
      const auto x = in(0);
      accumulate(0, sum_to(g, x.rows(), x.cols()));
      break;
    }
    case Op::SumTo: {
      const auto x = in(0);
      accumulate(0, broadcast_to(g, x.rows(), x.cols()));
      break;
    }
    case Op::SpMM:
      accumulate(0, spmm(sparse, g, !transposed));
      break;
    case Op::ConcatCols: {
      Eigen::Index off = 0;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto w = in(k).cols();
        if (want(k)) accumulate(k, slice_cols(g, off, w));
        off += w;
      }
      break;
    }
    case Op::SliceCols:
      accumulate(0, pad_cols(g, i0, in(0).cols()));
      break;
    case Op::PadCols:
      accumulate(0, slice_cols(g, i0, in(0).cols()));
      break;
  }
}

}  // namespace pamm::ad
