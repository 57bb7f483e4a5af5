#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "depthkit/tensor.hpp"

namespace depthkit {

// ---------------------------------------------------------------------------
// Reverse-mode tape over dense tensors. Nodes are recorded in evaluation
// order (so parents always precede children) and backward walks the list
// once in reverse. Single-threaded by construction; summation order is
// fixed, so repeated runs are bit-identical.
// ---------------------------------------------------------------------------

enum class Op {
  Input,
  Add,
  Sub,
  Mul,
  Scale,
  AddRow,
  MatMul,
  Transpose,
  Softmax,
  Exp,
  Log,
  Gelu,
  Sigmoid,
  Softplus,
  ClampMin,
  LayerNorm,
  Gather,
  SliceCols,
  ConcatCols,
  Sum,
  Mean,
  CrossEntropy,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddRow: return "add_row";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Softmax: return "softmax";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Gelu: return "gelu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::ClampMin: return "clamp_min";
    case Op::LayerNorm: return "layernorm";
    case Op::Gather: return "gather";
    case Op::SliceCols: return "slice_cols";
    case Op::ConcatCols: return "concat_cols";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

template <typename S>
class Tape;

/// Handle to a node on a tape. Copyable, cheap, valid as long as the tape is.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<S>& value() const;
  const std::vector<int64_t>& shape() const { return value().shape(); }
};

namespace detail {

inline constexpr double kGeluCoef = 0.044715;
inline constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)

template <typename S>
S gelu_value(S x) {
  double xd = double(x);
  double u = kGeluScale * (xd + kGeluCoef * xd * xd * xd);
  return S(0.5 * xd * (1.0 + std::tanh(u)));
}

template <typename S>
S gelu_deriv(S x) {
  double xd = double(x);
  double u = kGeluScale * (xd + kGeluCoef * xd * xd * xd);
  double t = std::tanh(u);
  double du = kGeluScale * (1.0 + 3.0 * kGeluCoef * xd * xd);
  return S(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du);
}

template <typename S>
S sigmoid_value(S x) {
  double xd = double(x);
  if (xd >= 0.0) return S(1.0 / (1.0 + std::exp(-xd)));
  double e = std::exp(xd);
  return S(e / (1.0 + e));
}

template <typename S>
S softplus_value(S x) {
  double xd = double(x);
  if (xd > 0.0) return S(xd + std::log1p(std::exp(-xd)));
  return S(std::log1p(std::exp(xd)));
}

}  // namespace detail

template <typename S>
class Tape {
 public:
  struct Node {
    Op op = Op::Input;
    std::vector<int32_t> parents;
    Tensor<S> value;
    bool requires_grad = false;
    // op attributes
    int64_t i0 = 0;  // slice start / causal flag
    int64_t i1 = 0;  // slice width
    S s0 = S(0);     // scale factor / clamp threshold / layernorm eps
    std::vector<int32_t> ids;  // gather indices / cross-entropy targets
  };

  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t size() const { return nodes_.size(); }

  const Node& node(int32_t id) const { return nodes_[size_t(id)]; }

  /// Leaf that participates in gradient computation.
  Var<S> input(Tensor<S> value, bool requires_grad = true) {
    Node n;
    n.op = Op::Input;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  /// Leaf excluded from gradients.
  Var<S> constant(Tensor<S> value) { return input(std::move(value), false); }

  // -- primitives ----------------------------------------------------------

  Var<S> add(Var<S> a, Var<S> b) { return binary_elementwise(Op::Add, a, b); }
  Var<S> sub(Var<S> a, Var<S> b) { return binary_elementwise(Op::Sub, a, b); }
  Var<S> mul(Var<S> a, Var<S> b) { return binary_elementwise(Op::Mul, a, b); }

  Var<S> scale(Var<S> a, S c) {
    Node n = unary_node(Op::Scale, a);
    n.s0 = c;
    n.value = val(a);
    n.value.arr() *= c;
    return push(std::move(n));
  }

  /// a: [n, k], row: [k]; adds row to every row of a.
  Var<S> add_row(Var<S> a, Var<S> row) {
    const Tensor<S>& av = val(a);
    const Tensor<S>& rv = val(row);
    if (av.rank() != 2 || rv.numel() != av.cols()) {
      throw ShapeError(std::string("add_row shape mismatch: ") +
                       shape_str(av.shape()) + " vs " + shape_str(rv.shape()));
    }
    Node n;
    n.op = Op::AddRow;
    n.parents = {a.id, row.id};
    n.value = av;
    auto m = n.value.mat();
    typename Tensor<S>::ConstMatMap rm(rv.data(), 1, rv.numel());
    m.rowwise() += rm.row(0);
    return push_with_grad(std::move(n));
  }

  Var<S> matmul(Var<S> a, Var<S> b) {
    const Tensor<S>& av = val(a);
    const Tensor<S>& bv = val(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
      throw ShapeError(std::string("matmul shape mismatch: ") +
                       shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
    Node n;
    n.op = Op::MatMul;
    n.parents = {a.id, b.id};
    n.value = Tensor<S>({av.dim(0), bv.dim(1)});
    n.value.mat().noalias() = av.mat() * bv.mat();
    return push_with_grad(std::move(n));
  }

  Var<S> transpose(Var<S> a) {
    const Tensor<S>& av = val(a);
    if (av.rank() != 2) {
      throw ShapeError("transpose expects rank-2, got " + shape_str(av.shape()));
    }
    Node n = unary_node(Op::Transpose, a);
    n.value = Tensor<S>({av.dim(1), av.dim(0)});
    n.value.mat() = av.mat().transpose();
    return push(std::move(n));
  }

  /// Row softmax over the last axis; with causal=true entry (i, j) is forced
  /// to exactly zero for j > i (rows and columns must then agree in count).
  Var<S> softmax_rows(Var<S> a, bool causal = false) {
    const Tensor<S>& av = val(a);
    if (av.rank() != 2) {
      throw ShapeError("softmax expects rank-2, got " + shape_str(av.shape()));
    }
    if (causal && av.dim(0) != av.dim(1)) {
      throw ShapeError("causal softmax expects square logits, got " +
                       shape_str(av.shape()));
    }
    Node n = unary_node(Op::Softmax, a);
    n.i0 = causal ? 1 : 0;
    n.value = Tensor<S>(av.shape());
    int64_t rows = av.dim(0), cols = av.dim(1);
    for (int64_t i = 0; i < rows; ++i) {
      int64_t active = causal ? (i + 1) : cols;
      S m = av.at(i, 0);
      for (int64_t j = 1; j < active; ++j) m = std::max(m, av.at(i, j));
      S total = S(0);
      for (int64_t j = 0; j < active; ++j) {
        S e = std::exp(av.at(i, j) - m);
        n.value.at(i, j) = e;
        total += e;
      }
      for (int64_t j = 0; j < active; ++j) n.value.at(i, j) /= total;
      for (int64_t j = active; j < cols; ++j) n.value.at(i, j) = S(0);
    }
    return push(std::move(n));
  }

  Var<S> exp(Var<S> a) {
    Node n = unary_node(Op::Exp, a);
    n.value = val(a);
    n.value.arr() = n.value.arr().exp();
    return push(std::move(n));
  }

  Var<S> log(Var<S> a) {
    Node n = unary_node(Op::Log, a);
    n.value = val(a);
    n.value.arr() = n.value.arr().log();
    return push(std::move(n));
  }

  Var<S> gelu(Var<S> a) {
    Node n = unary_node(Op::Gelu, a);
    n.value = val(a);
    for (int64_t i = 0; i < n.value.numel(); ++i) {
      n.value[i] = detail::gelu_value(n.value[i]);
    }
    return push(std::move(n));
  }

  Var<S> sigmoid(Var<S> a) {
    Node n = unary_node(Op::Sigmoid, a);
    n.value = val(a);
    for (int64_t i = 0; i < n.value.numel(); ++i) {
      n.value[i] = detail::sigmoid_value(n.value[i]);
    }
    return push(std::move(n));
  }

  Var<S> softplus(Var<S> a) {
    Node n = unary_node(Op::Softplus, a);
    n.value = val(a);
    for (int64_t i = 0; i < n.value.numel(); ++i) {
      n.value[i] = detail::softplus_value(n.value[i]);
    }
    return push(std::move(n));
  }

  /// Elementwise max(a, c). Subgradient at the tie goes to the identity side.
  Var<S> clamp_min(Var<S> a, S c) {
    Node n = unary_node(Op::ClampMin, a);
    n.s0 = c;
    n.value = val(a);
    n.value.arr() = n.value.arr().max(c);
    return push(std::move(n));
  }

  /// Row-wise LayerNorm over the last axis. gain has cols entries; bias is
  /// optional (invalid Var for none).
  Var<S> layernorm(Var<S> x, Var<S> gain, Var<S> bias = {}, S eps = S(1e-5)) {
    const Tensor<S>& xv = val(x);
    const Tensor<S>& gv = val(gain);
    if (xv.rank() != 2 || gv.numel() != xv.cols()) {
      throw ShapeError(std::string("layernorm shape mismatch: ") +
                       shape_str(xv.shape()) + " vs gain " + shape_str(gv.shape()));
    }
    bool has_bias = bias.valid();
    if (has_bias && val(bias).numel() != xv.cols()) {
      throw ShapeError("layernorm bias shape mismatch: " +
                       shape_str(val(bias).shape()));
    }
    Node n;
    n.op = Op::LayerNorm;
    n.parents = {x.id, gain.id};
    if (has_bias) n.parents.push_back(bias.id);
    n.s0 = eps;
    n.value = Tensor<S>(xv.shape());
    int64_t rows = xv.dim(0), cols = xv.dim(1);
    for (int64_t i = 0; i < rows; ++i) {
      S mean = S(0);
      for (int64_t j = 0; j < cols; ++j) mean += xv.at(i, j);
      mean /= S(cols);
      S var = S(0);
      for (int64_t j = 0; j < cols; ++j) {
        S d = xv.at(i, j) - mean;
        var += d * d;
      }
      var /= S(cols);
      S rstd = S(1) / std::sqrt(var + eps);
      for (int64_t j = 0; j < cols; ++j) {
        S xhat = (xv.at(i, j) - mean) * rstd;
        S y = xhat * gv[j];
        if (has_bias) y += val(bias)[j];
        n.value.at(i, j) = y;
      }
    }
    return push_with_grad(std::move(n));
  }

  /// table: [R, d], ids in [0, R); result is [|ids|, d].
  Var<S> gather(Var<S> table, const std::vector<int32_t>& ids) {
    const Tensor<S>& tv = val(table);
    if (tv.rank() != 2) {
      throw ShapeError("gather table must be rank-2, got " + shape_str(tv.shape()));
    }
    Node n;
    n.op = Op::Gather;
    n.parents = {table.id};
    n.ids = ids;
    int64_t d = tv.dim(1);
    n.value = Tensor<S>({int64_t(ids.size()), d});
    for (size_t r = 0; r < ids.size(); ++r) {
      int32_t id = ids[r];
      if (id < 0 || int64_t(id) >= tv.dim(0)) {
        throw VocabError("gather index " + std::to_string(id) +
                         " out of range for table " + shape_str(tv.shape()));
      }
      for (int64_t j = 0; j < d; ++j) n.value.at(int64_t(r), j) = tv.at(id, j);
    }
    return push_with_grad(std::move(n));
  }

  Var<S> slice_cols(Var<S> a, int64_t start, int64_t width) {
    const Tensor<S>& av = val(a);
    if (av.rank() != 2 || start < 0 || width < 0 || start + width > av.dim(1)) {
      throw ShapeError("slice_cols [" + std::to_string(start) + ", " +
                       std::to_string(start + width) + ") out of range for " +
                       shape_str(av.shape()));
    }
    Node n = unary_node(Op::SliceCols, a);
    n.i0 = start;
    n.i1 = width;
    n.value = Tensor<S>({av.dim(0), width});
    n.value.mat() = av.mat().block(0, start, av.dim(0), width);
    return push(std::move(n));
  }

  Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols of zero parts");
    int64_t rows = val(parts[0]).dim(0);
    int64_t total = 0;
    for (const auto& p : parts) {
      const Tensor<S>& pv = val(p);
      if (pv.rank() != 2 || pv.dim(0) != rows) {
        throw ShapeError("concat_cols row mismatch: " + shape_str(pv.shape()) +
                         " vs " + shape_str(val(parts[0]).shape()));
      }
      total += pv.dim(1);
    }
    Node n;
    n.op = Op::ConcatCols;
    for (const auto& p : parts) n.parents.push_back(p.id);
    n.value = Tensor<S>({rows, total});
    int64_t off = 0;
    for (const auto& p : parts) {
      const Tensor<S>& pv = val(p);
      n.value.mat().block(0, off, rows, pv.dim(1)) = pv.mat();
      off += pv.dim(1);
    }
    return push_with_grad(std::move(n));
  }

  Var<S> sum(Var<S> a) {
    Node n = unary_node(Op::Sum, a);
    n.value = Tensor<S>::scalar(val(a).arr().sum());
    return push(std::move(n));
  }

  Var<S> mean(Var<S> a) {
    Node n = unary_node(Op::Mean, a);
    n.value = Tensor<S>::scalar(val(a).arr().sum() / S(val(a).numel()));
    return push(std::move(n));
  }

  /// Mean over rows of -log softmax(logits)[target]. logits: [n, V].
  Var<S> cross_entropy(Var<S> logits, const std::vector<int32_t>& targets) {
    const Tensor<S>& lv = val(logits);
    if (lv.rank() != 2 || int64_t(targets.size()) != lv.dim(0)) {
      throw ShapeError("cross_entropy expects [n, V] logits with n targets, got " +
                       shape_str(lv.shape()) + " with " +
                       std::to_string(targets.size()) + " targets");
    }
    Node n;
    n.op = Op::CrossEntropy;
    n.parents = {logits.id};
    n.ids = targets;
    int64_t rows = lv.dim(0), cols = lv.dim(1);
    S total = S(0);
    for (int64_t i = 0; i < rows; ++i) {
      int32_t t = targets[size_t(i)];
      if (t < 0 || int64_t(t) >= cols) {
        throw VocabError("cross_entropy target " + std::to_string(t) +
                         " out of range for " + shape_str(lv.shape()));
      }
      S m = lv.at(i, 0);
      for (int64_t j = 1; j < cols; ++j) m = std::max(m, lv.at(i, j));
      S acc = S(0);
      for (int64_t j = 0; j < cols; ++j) acc += std::exp(lv.at(i, j) - m);
      total += m + std::log(acc) - lv.at(i, t);
    }
    n.value = Tensor<S>::scalar(total / S(rows));
    return push_with_grad(std::move(n));
  }

  // -- backward ------------------------------------------------------------

  /// Accumulates d(loss)/d(node) for every node that requires grad, walking
  /// the tape once in reverse from the loss node.
  void backward(Var<S> loss) {
    if (!loss.valid() || loss.tape != this) {
      throw ContractError("backward: loss is not a node of this tape");
    }
    if (val(loss).numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(val(loss).shape()));
    }
    grads_.assign(nodes_.size(), Tensor<S>());
    grad_of(loss.id) = Tensor<S>::full(val(loss).shape(), S(1));
    for (int32_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!n.requires_grad || grads_[size_t(i)].numel() == 0) continue;
      propagate(i);
    }
  }

  /// Gradient of the last backward() with respect to a node; zeros when the
  /// node was never touched.
  const Tensor<S>& grad(Var<S> v) {
    if (grads_.size() != nodes_.size()) {
      throw ContractError("grad() before backward()");
    }
    Tensor<S>& g = grads_[size_t(v.id)];
    if (g.numel() == 0) g = Tensor<S>(val(v).shape());
    return g;
  }

  const Tensor<S>& value_of(int32_t id) const { return nodes_[size_t(id)].value; }

 private:
  friend struct Var<S>;

  const Tensor<S>& val(Var<S> v) const {
    if (!v.valid() || v.tape != this) {
      throw ContractError("var does not belong to this tape");
    }
    return nodes_[size_t(v.id)].value;
  }

  Node unary_node(Op op, Var<S> a) {
    val(a);  // ownership check
    Node n;
    n.op = op;
    n.parents = {a.id};
    return n;
  }

  Var<S> binary_elementwise(Op op, Var<S> a, Var<S> b) {
    const Tensor<S>& av = val(a);
    const Tensor<S>& bv = val(b);
    bool a_scalar = av.numel() == 1;
    bool b_scalar = bv.numel() == 1;
    if (!av.same_shape(bv) && !a_scalar && !b_scalar) {
      throw ShapeError(std::string(op_name(op)) + " shape mismatch: " +
                       shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
    Node n;
    n.op = op;
    n.parents = {a.id, b.id};
    const Tensor<S>& big = a_scalar && !b_scalar ? bv : av;
    n.value = Tensor<S>(big.shape());
    auto out = n.value.arr();
    if (av.same_shape(bv)) {
      switch (op) {
        case Op::Add: out = av.arr() + bv.arr(); break;
        case Op::Sub: out = av.arr() - bv.arr(); break;
        case Op::Mul: out = av.arr() * bv.arr(); break;
        default: throw ContractError("bad elementwise op");
      }
    } else if (b_scalar) {
      S s = bv[0];
      switch (op) {
        case Op::Add: out = av.arr() + s; break;
        case Op::Sub: out = av.arr() - s; break;
        case Op::Mul: out = av.arr() * s; break;
        default: throw ContractError("bad elementwise op");
      }
    } else {
      S s = av[0];
      switch (op) {
        case Op::Add: out = s + bv.arr(); break;
        case Op::Sub: out = s - bv.arr(); break;
        case Op::Mul: out = s * bv.arr(); break;
        default: throw ContractError("bad elementwise op");
      }
    }
    return push_with_grad(std::move(n));
  }

  Var<S> push_with_grad(Node n) {
    for (int32_t p : n.parents) {
      if (nodes_[size_t(p)].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    return push(std::move(n));
  }

  Var<S> push(Node n) {
    if (n.op != Op::Input && !n.requires_grad) {
      for (int32_t p : n.parents) {
        if (nodes_[size_t(p)].requires_grad) {
          n.requires_grad = true;
          break;
        }
      }
    }
    if (check_finite_ && !n.value.all_finite()) {
      throw NumericalError(std::string("non-finite result in op ") + op_name(n.op));
    }
    nodes_.push_back(std::move(n));
    return Var<S>{this, int32_t(nodes_.size() - 1)};
  }

  Tensor<S>& grad_of(int32_t id) {
    Tensor<S>& g = grads_[size_t(id)];
    if (g.numel() == 0) g = Tensor<S>(nodes_[size_t(id)].value.shape());
    return g;
  }

  void add_grad(int32_t id, const Tensor<S>& contribution) {
    if (!nodes_[size_t(id)].requires_grad) return;
    grad_of(id).arr() += contribution.arr();
  }

  // accumulate `g` into parent, reducing over the broadcast if the parent is
  // scalar-shaped while g is not
  void add_grad_reduced(int32_t id, const Tensor<S>& g, S sign = S(1)) {
    if (!nodes_[size_t(id)].requires_grad) return;
    Tensor<S>& dst = grad_of(id);
    if (dst.numel() == 1 && g.numel() != 1) {
      dst[0] += sign * g.arr().sum();
    } else {
      dst.arr() += sign * g.arr();
    }
  }

  void propagate(int32_t id) {
    Node& n = nodes_[size_t(id)];
    const Tensor<S>& g = grads_[size_t(id)];
    switch (n.op) {
      case Op::Input:
        break;
      case Op::Add: {
        add_grad_reduced(n.parents[0], g);
        add_grad_reduced(n.parents[1], g);
        break;
      }
      case Op::Sub: {
        add_grad_reduced(n.parents[0], g);
        add_grad_reduced(n.parents[1], g, S(-1));
        break;
      }
      case Op::Mul: {
        const Tensor<S>& av = value_of(n.parents[0]);
        const Tensor<S>& bv = value_of(n.parents[1]);
        if (av.same_shape(bv)) {
          if (nodes_[size_t(n.parents[0])].requires_grad) {
            Tensor<S> ga(g.shape());
            ga.arr() = g.arr() * bv.arr();
            add_grad(n.parents[0], ga);
          }
          if (nodes_[size_t(n.parents[1])].requires_grad) {
            Tensor<S> gb(g.shape());
            gb.arr() = g.arr() * av.arr();
            add_grad(n.parents[1], gb);
          }
        } else if (bv.numel() == 1) {
          if (nodes_[size_t(n.parents[0])].requires_grad) {
            Tensor<S> ga(g.shape());
            ga.arr() = g.arr() * bv[0];
            add_grad(n.parents[0], ga);
          }
          if (nodes_[size_t(n.parents[1])].requires_grad) {
            grad_of(n.parents[1])[0] += (g.arr() * av.arr()).sum();
          }
        } else {
          if (nodes_[size_t(n.parents[0])].requires_grad) {
            grad_of(n.parents[0])[0] += (g.arr() * bv.arr()).sum();
          }
          if (nodes_[size_t(n.parents[1])].requires_grad) {
            Tensor<S> gb(g.shape());
            gb.arr() = g.arr() * av[0];
            add_grad(n.parents[1], gb);
          }
        }
        break;
      }
      case Op::Scale: {
        Tensor<S> ga(g.shape());
        ga.arr() = g.arr() * n.s0;
        add_grad(n.parents[0], ga);
        break;
      }
      case Op::AddRow: {
        add_grad(n.parents[0], g);
        if (nodes_[size_t(n.parents[1])].requires_grad) {
          Tensor<S>& dst = grad_of(n.parents[1]);
          typename Tensor<S>::ConstMatMap gm(g.data(), g.rows(), g.cols());
          typename Tensor<S>::MatMap dm(dst.data(), 1, dst.numel());
          dm.row(0) += gm.colwise().sum();
        }
        break;
      }
      case Op::MatMul: {
        const Tensor<S>& av = value_of(n.parents[0]);
        const Tensor<S>& bv = value_of(n.parents[1]);
        if (nodes_[size_t(n.parents[0])].requires_grad) {
          Tensor<S> ga(av.shape());
          ga.mat().noalias() = g.mat() * bv.mat().transpose();
          add_grad(n.parents[0], ga);
        }
        if (nodes_[size_t(n.parents[1])].requires_grad) {
          Tensor<S> gb(bv.shape());
          gb.mat().noalias() = av.mat().transpose() * g.mat();
          add_grad(n.parents[1], gb);
        }
        break;
      }
      case Op::Transpose: {
        const Tensor<S>& av = value_of(n.parents[0]);
        Tensor<S> ga(av.shape());
        ga.mat() = g.mat().transpose();
        add_grad(n.parents[0], ga);
        break;
      }
      case Op::Softmax: {
        const Tensor<S>& s = n.value;
        Tensor<S> gz(s.shape());
        int64_t rows = s.dim(0), cols = s.dim(1);
        for (int64_t i = 0; i < rows; ++i) {
          S dot = S(0);
          for (int64_t j = 0; j < cols; ++j) dot += g.at(i, j) * s.at(i, j);
          for (int64_t j = 0; j < cols; ++j) {
            gz.at(i, j) = s.at(i, j) * (g.at(i, j) - dot);
          }
        }
        add_grad(n.parents[0], gz);
        break;
      }
      case Op::Exp: {
        Tensor<S> ga(g.shape());
        ga.arr() = g.arr() * n.value.arr();
        add_grad(n.parents[0], ga);
        break;
      }
      case Op::Log: {
        const Tensor<S>& av = value_of(n.parents[0]);
        Tensor<S> ga(g.shape());
        ga.arr() = g.arr() / av.arr();
        add_grad(n.parents[0], ga);
        break;
      }
      case Op::Gelu: {
        const Tensor<S>& av = value_of(n.parents[0]);
        Tensor<S> ga(g.shape());
        for (int64_t i = 0; i < ga.numel(); ++i) {
          ga[i] = g[i] * detail::gelu_deriv(av[i]);
        }
        add_grad(n.parents[0], ga);
        break;
      }
      case Op::Sigmoid: {
        Tensor<S> ga(g.shape());
        ga.arr() = g.arr() * n.value.arr() * (S(1) - n.value.arr());
        add_grad(n.parents[0], ga);
        break;
      }
      case Op::Softplus: {
        const Tensor<S>& av = value_of(n.parents[0]);
        Tensor<S> ga(g.shape());
        for (int64_t i = 0; i < ga.numel(); ++i) {
          ga[i] = g[i] * detail::sigmoid_value(av[i]);
        }
        add_grad(n.parents[0], ga);
        break;
      }
      case Op::ClampMin: {
        const Tensor<S>& av = value_of(n.parents[0]);
        Tensor<S> ga(g.shape());
        for (int64_t i = 0; i < ga.numel(); ++i) {
          ga[i] = av[i] >= n.s0 ? g[i] : S(0);
        }
        add_grad(n.parents[0], ga);
        break;
      }
      case Op::LayerNorm: {
        backward_layernorm(n, g);
        break;
      }
      case Op::Gather: {
        if (nodes_[size_t(n.parents[0])].requires_grad) {
          Tensor<S>& dst = grad_of(n.parents[0]);
          int64_t d = dst.cols();
          for (size_t r = 0; r < n.ids.size(); ++r) {
            int32_t id = n.ids[r];
            for (int64_t j = 0; j < d; ++j) {
              dst.at(id, j) += g.at(int64_t(r), j);
            }
          }
        }
        break;
      }
      case Op::SliceCols: {
        if (nodes_[size_t(n.parents[0])].requires_grad) {
          Tensor<S>& dst = grad_of(n.parents[0]);
          dst.mat().block(0, n.i0, dst.rows(), n.i1) += g.mat();
        }
        break;
      }
      case Op::ConcatCols: {
        int64_t off = 0;
        for (int32_t p : n.parents) {
          const Tensor<S>& pv = value_of(p);
          if (nodes_[size_t(p)].requires_grad) {
            Tensor<S> gp(pv.shape());
            gp.mat() = g.mat().block(0, off, pv.dim(0), pv.dim(1));
            add_grad(p, gp);
          }
          off += pv.dim(1);
        }
        break;
      }
      case Op::Sum: {
        const Tensor<S>& av = value_of(n.parents[0]);
        Tensor<S> ga(av.shape());
        ga.arr() = g[0];
        add_grad(n.parents[0], ga);
        break;
      }
      case Op::Mean: {
        const Tensor<S>& av = value_of(n.parents[0]);
        Tensor<S> ga(av.shape());
        ga.arr() = g[0] / S(av.numel());
        add_grad(n.parents[0], ga);
        break;
      }
      case Op::CrossEntropy: {
        const Tensor<S>& lv = value_of(n.parents[0]);
        int64_t rows = lv.dim(0), cols = lv.dim(1);
        Tensor<S> gz(lv.shape());
        S w = g[0] / S(rows);
        for (int64_t i = 0; i < rows; ++i) {
          S m = lv.at(i, 0);
          for (int64_t j = 1; j < cols; ++j) m = std::max(m, lv.at(i, j));
          S total = S(0);
          for (int64_t j = 0; j < cols; ++j) {
            S e = std::exp(lv.at(i, j) - m);
            gz.at(i, j) = e;
            total += e;
          }
          for (int64_t j = 0; j < cols; ++j) gz.at(i, j) = gz.at(i, j) / total * w;
          gz.at(i, n.ids[size_t(i)]) -= w;
        }
        add_grad(n.parents[0], gz);
        break;
      }
    }
  }

  void backward_layernorm(Node& n, const Tensor<S>& g) {
    const Tensor<S>& xv = value_of(n.parents[0]);
    const Tensor<S>& gv = value_of(n.parents[1]);
    bool has_bias = n.parents.size() == 3;
    int64_t rows = xv.dim(0), cols = xv.dim(1);
    bool need_x = nodes_[size_t(n.parents[0])].requires_grad;
    bool need_gain = nodes_[size_t(n.parents[1])].requires_grad;
    bool need_bias = has_bias && nodes_[size_t(n.parents[2])].requires_grad;
    Tensor<S> gx = need_x ? Tensor<S>(xv.shape()) : Tensor<S>();
    std::vector<S> xhat(size_t(cols), S(0));
    for (int64_t i = 0; i < rows; ++i) {
      S mean = S(0);
      for (int64_t j = 0; j < cols; ++j) mean += xv.at(i, j);
      mean /= S(cols);
      S var = S(0);
      for (int64_t j = 0; j < cols; ++j) {
        S d = xv.at(i, j) - mean;
        var += d * d;
      }
      var /= S(cols);
      S rstd = S(1) / std::sqrt(var + n.s0);
      for (int64_t j = 0; j < cols; ++j) xhat[size_t(j)] = (xv.at(i, j) - mean) * rstd;
      if (need_gain) {
        Tensor<S>& dst = grad_of(n.parents[1]);
        for (int64_t j = 0; j < cols; ++j) dst[j] += g.at(i, j) * xhat[size_t(j)];
      }
      if (need_bias) {
        Tensor<S>& dst = grad_of(n.parents[2]);
        for (int64_t j = 0; j < cols; ++j) dst[j] += g.at(i, j);
      }
      if (need_x) {
        S mean_gy = S(0), mean_gyx = S(0);
        for (int64_t j = 0; j < cols; ++j) {
          S gy = g.at(i, j) * gv[j];
          mean_gy += gy;
          mean_gyx += gy * xhat[size_t(j)];
        }
        mean_gy /= S(cols);
        mean_gyx /= S(cols);
        for (int64_t j = 0; j < cols; ++j) {
          S gy = g.at(i, j) * gv[j];
          gx.at(i, j) = (gy - mean_gy - xhat[size_t(j)] * mean_gyx) * rstd;
        }
      }
    }
    if (need_x) add_grad(n.parents[0], gx);
  }

  bool check_finite_;
  std::vector<Node> nodes_;
  std::vector<Tensor<S>> grads_;
};

template <typename S>
const Tensor<S>& Var<S>::value() const {
  if (!valid()) throw ContractError("value() on invalid var");
  return tape->value_of(id);
}

// expression-style sugar for the common arithmetic
template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) { return a.tape->add(a, b); }
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) { return a.tape->sub(a, b); }
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) { return a.tape->mul(a, b); }

}  // namespace depthkit
