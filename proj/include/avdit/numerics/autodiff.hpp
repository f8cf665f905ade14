#pragma once

// Tape-based reverse-mode differentiation over row-major matrices.
//
// A Graph records every operation in creation order; `backward` walks the
// tape in reverse. Nodes that do not depend on a gradient-requiring input
// carry no backward closure, so inference graphs cost only their forward.

#include "avdit/numerics/kernels.hpp"

#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace avdit {

template <typename Scalar>
class Graph;

template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const MatrixX<Scalar>& value() const { return graph->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Graph {
 public:
  using Matrix = MatrixX<Scalar>;
  using BackwardFn = std::function<void(Graph&, const Matrix& out_grad)>;

  Var<Scalar> input(Matrix value, bool requires_grad = false) {
    check_finite(value, "input");
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, false, nullptr, "input"});
    return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Records an op result. The closure is kept only when a parent needs grads.
  Var<Scalar> record(Matrix value, std::initializer_list<Var<Scalar>> parents, BackwardFn fn,
                     const char* op) {
    check_finite(value, op);
    bool needs = false;
    for (const auto& p : parents) needs = needs || nodes_[static_cast<std::size_t>(p.id)].requires_grad;
    nodes_.push_back(Node{std::move(value), Matrix(), needs, false, needs ? std::move(fn) : nullptr, op});
    return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Installs the backward closure of an already-recorded node (for ops whose
  /// backward needs to read their own output).
  void set_backward(Var<Scalar> v, BackwardFn fn) {
    nodes_[static_cast<std::size_t>(v.id)].backward = std::move(fn);
  }

  const Matrix& value(Var<Scalar> v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  bool requires_grad(Var<Scalar> v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  bool has_grad(Var<Scalar> v) const { return nodes_[static_cast<std::size_t>(v.id)].has_grad; }

  /// Gradient of the last `backward` target w.r.t. `v`; zeros if none flowed.
  Matrix grad(Var<Scalar> v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.has_grad) return n.grad;
    return Matrix::Zero(n.value.rows(), n.value.cols());
  }

  template <typename Derived>
  void accumulate(Var<Scalar> v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.has_grad) {
      n.grad += g;
    } else {
      n.grad = g;
      n.has_grad = true;
    }
  }

  /// Seeds d(target)/d(target) = `seed` and propagates to every input.
  void backward(Var<Scalar> target, Scalar seed = Scalar(1)) {
    const Node& t = nodes_[static_cast<std::size_t>(target.id)];
    if (t.value.size() != 1) throw DimensionError("backward target must be a 1x1 scalar");
    accumulate(target, Matrix::Constant(1, 1, seed));
    for (int i = target.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.has_grad || !n.backward) continue;
      if (!n.grad.allFinite()) {
        throw NumericError(std::string("non-finite gradient flowing out of ") + n.op);
      }
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    const char* op = "";
  };

  static void check_finite(const Matrix& m, const char* op) {
    if (!m.allFinite()) throw NumericError(std::string("non-finite value produced by ") + op);
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All take and return Var handles on one graph.

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  return a.graph->record(
      a.value() * b.value(), {a, b},
      [a, b](Graph<Scalar>& g, const MatrixX<Scalar>& dc) {
        if (g.requires_grad(a)) g.accumulate(a, dc * g.value(b).transpose());
        if (g.requires_grad(b)) g.accumulate(b, g.value(a).transpose() * dc);
      },
      "matmul");
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("add: shape mismatch");
  return a.graph->record(
      a.value() + b.value(), {a, b},
      [a, b](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        g.accumulate(a, d);
        g.accumulate(b, d);
      },
      "add");
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("sub: shape mismatch");
  return a.graph->record(
      a.value() - b.value(), {a, b},
      [a, b](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        g.accumulate(a, d);
        g.accumulate(b, -d);
      },
      "sub");
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) { return sub(a, b); }

/// a + row, with `row` (1 x n) broadcast over the rows of a.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: shape mismatch");
  MatrixX<Scalar> out = a.value();
  out.rowwise() += row.value().row(0);
  return a.graph->record(
      std::move(out), {a, row},
      [a, row](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        g.accumulate(a, d);
        if (g.requires_grad(row)) g.accumulate(row, d.colwise().sum());
      },
      "add_row");
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("mul: shape mismatch");
  return a.graph->record(
      a.value().cwiseProduct(b.value()), {a, b},
      [a, b](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        if (g.requires_grad(a)) g.accumulate(a, d.cwiseProduct(g.value(b)));
        if (g.requires_grad(b)) g.accumulate(b, d.cwiseProduct(g.value(a)));
      },
      "mul");
}

/// a * row, with `row` (1 x n) broadcast over the rows of a.
template <typename Scalar>
Var<Scalar> mul_row(Var<Scalar> a, Var<Scalar> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("mul_row: shape mismatch");
  MatrixX<Scalar> out = a.value().array().rowwise() * row.value().row(0).array();
  return a.graph->record(
      std::move(out), {a, row},
      [a, row](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        if (g.requires_grad(a)) {
          MatrixX<Scalar> da = d.array().rowwise() * g.value(row).row(0).array();
          g.accumulate(a, da);
        }
        if (g.requires_grad(row)) g.accumulate(row, d.cwiseProduct(g.value(a)).colwise().sum());
      },
      "mul_row");
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  return a.graph->record(
      a.value() * s, {a}, [a, s](Graph<Scalar>& g, const MatrixX<Scalar>& d) { g.accumulate(a, d * s); },
      "scale");
}

/// x * (1 + scale) + shift, with shift/scale given as 1 x n rows.
template <typename Scalar>
Var<Scalar> modulate(Var<Scalar> x, Var<Scalar> shift, Var<Scalar> scale_row) {
  if (shift.rows() != 1 || scale_row.rows() != 1 || shift.cols() != x.cols() ||
      scale_row.cols() != x.cols()) {
    throw DimensionError("modulate: shape mismatch");
  }
  MatrixX<Scalar> out =
      (x.value().array().rowwise() * (scale_row.value().row(0).array() + Scalar(1))).rowwise() +
      shift.value().row(0).array();
  return x.graph->record(
      std::move(out), {x, shift, scale_row},
      [x, shift, scale_row](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        if (g.requires_grad(x)) {
          MatrixX<Scalar> dx = d.array().rowwise() * (g.value(scale_row).row(0).array() + Scalar(1));
          g.accumulate(x, dx);
        }
        if (g.requires_grad(shift)) g.accumulate(shift, d.colwise().sum());
        if (g.requires_grad(scale_row)) g.accumulate(scale_row, d.cwiseProduct(g.value(x)).colwise().sum());
      },
      "modulate");
}

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  MatrixX<Scalar> out = a.value().unaryExpr([](Scalar v) { return kernels::gelu(v); });
  return a.graph->record(
      std::move(out), {a},
      [a](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        g.accumulate(a, d.cwiseProduct(
                            g.value(a).unaryExpr([](Scalar v) { return kernels::gelu_derivative(v); })));
      },
      "gelu");
}

template <typename Scalar>
Var<Scalar> silu(Var<Scalar> a) {
  MatrixX<Scalar> out = a.value().unaryExpr([](Scalar v) { return v * kernels::sigmoid(v); });
  return a.graph->record(
      std::move(out), {a},
      [a](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        g.accumulate(a, d.cwiseProduct(g.value(a).unaryExpr([](Scalar v) {
          const Scalar s = kernels::sigmoid(v);
          return s * (Scalar(1) + v * (Scalar(1) - s));
        })));
      },
      "silu");
}

/// Affine-free row normalization.
template <typename Scalar>
Var<Scalar> layer_norm_rows(Var<Scalar> a, Scalar eps) {
  auto inv_std = std::make_shared<VectorX<Scalar>>();
  MatrixX<Scalar> y = kernels::layer_norm_rows(a.value(), eps, inv_std.get());
  Graph<Scalar>* graph = a.graph;
  Var<Scalar> out = graph->record(std::move(y), {a}, nullptr, "layer_norm");
  if (graph->requires_grad(out)) {
    // Re-record with a closure that can see its own output value.
    const int out_id = out.id;
    auto fn = [a, inv_std, out_id](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
      const MatrixX<Scalar>& yv = g.value(Var<Scalar>{&g, out_id});
      const Index n = yv.cols();
      MatrixX<Scalar> dx(yv.rows(), n);
      for (Index r = 0; r < yv.rows(); ++r) {
        const Scalar mean_d = d.row(r).sum() / static_cast<Scalar>(n);
        const Scalar mean_dy = d.row(r).dot(yv.row(r)) / static_cast<Scalar>(n);
        dx.row(r) = (d.row(r).array() - mean_d - yv.row(r).array() * mean_dy) * (*inv_std)[r];
      }
      g.accumulate(a, dx);
    };
    graph->set_backward(out, std::move(fn));
  }
  return out;
}

/// Row softmax.
template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
  MatrixX<Scalar> y = a.value();
  kernels::softmax_rows_inplace(y);
  Graph<Scalar>* graph = a.graph;
  Var<Scalar> out = graph->record(std::move(y), {a}, nullptr, "softmax");
  if (graph->requires_grad(out)) {
    const int out_id = out.id;
    graph->set_backward(out, [a, out_id](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
      const MatrixX<Scalar>& yv = g.value(Var<Scalar>{&g, out_id});
      VectorX<Scalar> dots = d.cwiseProduct(yv).rowwise().sum();
      MatrixX<Scalar> dx = yv.cwiseProduct(d - dots.replicate(1, d.cols()));
      g.accumulate(a, dx);
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> concat_rows(Var<Scalar> a, Var<Scalar> b) {
  if (a.cols() != b.cols()) throw DimensionError("concat_rows: column mismatch");
  MatrixX<Scalar> out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a.value();
  out.bottomRows(b.rows()) = b.value();
  const Index na = a.rows();
  return a.graph->record(
      std::move(out), {a, b},
      [a, b, na](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        if (g.requires_grad(a)) g.accumulate(a, d.topRows(na));
        if (g.requires_grad(b)) g.accumulate(b, d.bottomRows(d.rows() - na));
      },
      "concat_rows");
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw DimensionError("slice_rows: out of range");
  const Index rows = a.rows();
  return a.graph->record(
      a.value().middleRows(begin, count), {a},
      [a, begin, count, rows](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        MatrixX<Scalar> full = MatrixX<Scalar>::Zero(rows, d.cols());
        full.middleRows(begin, count) = d;
        g.accumulate(a, full);
      },
      "slice_rows");
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) throw DimensionError("slice_cols: out of range");
  const Index cols = a.cols();
  return a.graph->record(
      a.value().middleCols(begin, count), {a},
      [a, begin, count, cols](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        MatrixX<Scalar> full = MatrixX<Scalar>::Zero(d.rows(), cols);
        full.middleCols(begin, count) = d;
        g.accumulate(a, full);
      },
      "slice_cols");
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return a.graph->record(
      std::move(out), {a},
      [a, r, c](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        g.accumulate(a, MatrixX<Scalar>::Constant(r, c, d(0, 0)));
      },
      "sum");
}

/// Mean of (pred - target)^2 over entries where `keep` is nonzero (all
/// entries when `keep` is empty). Throws when nothing is kept.
template <typename Scalar>
Var<Scalar> masked_mse(Var<Scalar> pred, const MatrixX<Scalar>& target, const MatrixX<Scalar>& keep) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw DimensionError("masked_mse: shape mismatch");
  }
  const bool masked = keep.size() != 0;
  if (masked && (keep.rows() != target.rows() || keep.cols() != target.cols())) {
    throw DimensionError("masked_mse: mask shape mismatch");
  }
  MatrixX<Scalar> diff = pred.value() - target;
  if (masked) diff = diff.cwiseProduct(keep);
  const Scalar count = masked ? keep.sum() : static_cast<Scalar>(target.size());
  if (!(count > Scalar(0))) throw DimensionError("masked_mse: no unmasked elements");
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = diff.squaredNorm() / count;
  return pred.graph->record(
      std::move(out), {pred},
      [pred, diff, count](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        g.accumulate(pred, diff * (Scalar(2) * d(0, 0) / count));
      },
      "masked_mse");
}

/// Rotates channel pairs (2i, 2i+1) of every head by per-row angles:
/// (x, y) -> (x cos - y sin, x sin + y cos). `cos`/`sin` are rows x head_dim/2.
template <typename Scalar>
Var<Scalar> rope_rows(Var<Scalar> a, const MatrixX<Scalar>& cos, const MatrixX<Scalar>& sin, Index n_heads) {
  const Index dim = a.cols();
  if (n_heads <= 0 || dim % n_heads != 0) throw DimensionError("rope_rows: heads do not divide width");
  const Index hd = dim / n_heads;
  if (hd % 2 != 0) throw DimensionError("rope_rows: odd head dim");
  if (cos.rows() != a.rows() || cos.cols() != hd / 2 || sin.rows() != cos.rows() || sin.cols() != cos.cols()) {
    throw DimensionError("rope_rows: angle table shape mismatch");
  }
  auto rotate = [hd, n_heads](const MatrixX<Scalar>& x, const MatrixX<Scalar>& c, const MatrixX<Scalar>& s,
                              Scalar sign) {
    MatrixX<Scalar> y(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
      for (Index h = 0; h < n_heads; ++h) {
        for (Index i = 0; i < hd / 2; ++i) {
          const Index j = h * hd + 2 * i;
          const Scalar cs = c(r, i), sn = sign * s(r, i);
          const Scalar x0 = x(r, j), x1 = x(r, j + 1);
          y(r, j) = x0 * cs - x1 * sn;
          y(r, j + 1) = x0 * sn + x1 * cs;
        }
      }
    }
    return y;
  };
  return a.graph->record(
      rotate(a.value(), cos, sin, Scalar(1)), {a},
      [a, cos, sin, rotate](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        g.accumulate(a, rotate(d, cos, sin, Scalar(-1)));
      },
      "rope");
}

/// Multi-head attention over column-split heads. Q is n x D, K and V are
/// m x D. `mask` (n x m, true = attend) is optional. If `capture` is given it
/// receives the head-averaged attention probabilities.
template <typename Scalar>
Var<Scalar> multihead_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, Index n_heads,
                                const BoolMatrix* mask = nullptr, MatrixX<Scalar>* capture = nullptr) {
  const Index dim = q.cols();
  if (k.cols() != dim || v.cols() != dim) throw DimensionError("attention: width mismatch");
  if (k.rows() != v.rows()) throw DimensionError("attention: key/value count mismatch");
  if (n_heads <= 0 || dim % n_heads != 0) throw DimensionError("attention: heads do not divide width");
  if (mask && (mask->rows() != q.rows() || mask->cols() != k.rows())) {
    throw DimensionError("attention: mask shape mismatch");
  }
  const Index hd = dim / n_heads;
  const Scalar scale_qk = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  auto probs = std::make_shared<std::vector<MatrixX<Scalar>>>();
  probs->reserve(static_cast<std::size_t>(n_heads));
  MatrixX<Scalar> out(q.rows(), dim);
  if (capture) *capture = MatrixX<Scalar>::Zero(q.rows(), k.rows());
  for (Index h = 0; h < n_heads; ++h) {
    probs->push_back(kernels::attention_probs<Scalar>(q.value().middleCols(h * hd, hd),
                                                       k.value().middleCols(h * hd, hd), mask));
    out.middleCols(h * hd, hd) = probs->back() * v.value().middleCols(h * hd, hd);
    if (capture) *capture += probs->back();
  }
  if (capture) *capture /= static_cast<Scalar>(n_heads);
  return q.graph->record(
      std::move(out), {q, k, v},
      [q, k, v, probs, hd, scale_qk](Graph<Scalar>& g, const MatrixX<Scalar>& d) {
        const MatrixX<Scalar>& qv = g.value(q);
        const MatrixX<Scalar>& kv = g.value(k);
        const MatrixX<Scalar>& vv = g.value(v);
        MatrixX<Scalar> dq = MatrixX<Scalar>::Zero(qv.rows(), qv.cols());
        MatrixX<Scalar> dk = MatrixX<Scalar>::Zero(kv.rows(), kv.cols());
        MatrixX<Scalar> dv = MatrixX<Scalar>::Zero(vv.rows(), vv.cols());
        for (std::size_t h = 0; h < probs->size(); ++h) {
          const Index c0 = static_cast<Index>(h) * hd;
          const MatrixX<Scalar>& p = (*probs)[h];
          const auto dout = d.middleCols(c0, hd);
          dv.middleCols(c0, hd).noalias() += p.transpose() * dout;
          MatrixX<Scalar> dp = dout * vv.middleCols(c0, hd).transpose();
          VectorX<Scalar> dots = dp.cwiseProduct(p).rowwise().sum();
          MatrixX<Scalar> ds = p.cwiseProduct(dp - dots.replicate(1, dp.cols())) * scale_qk;
          dq.middleCols(c0, hd).noalias() += ds * kv.middleCols(c0, hd);
          dk.middleCols(c0, hd).noalias() += ds.transpose() * qv.middleCols(c0, hd);
        }
        g.accumulate(q, dq);
        g.accumulate(k, dk);
        g.accumulate(v, dv);
      },
      "attention");
}

// ---------------------------------------------------------------------------

/// Which bound leaves require gradients.
enum class GradMode { trainable, all, none };

/// Lazily exposes ParamStore entries as graph leaves for one forward pass.
template <typename Scalar>
class ParamBinding {
 public:
  ParamBinding(Graph<Scalar>& graph, const ParamStore<Scalar>& store, bool grad_all = false)
      : ParamBinding(graph, store, grad_all ? GradMode::all : GradMode::trainable) {}
  ParamBinding(Graph<Scalar>& graph, const ParamStore<Scalar>& store, GradMode mode)
      : graph_(&graph), store_(&store), mode_(mode), leaves_(static_cast<std::size_t>(store.size())) {}

  Var<Scalar> operator()(Index id) {
    auto& slot = leaves_[static_cast<std::size_t>(id)];
    if (!slot.valid()) {
      const auto& e = (*store_)[id];
      const bool rg = mode_ == GradMode::all || (mode_ == GradMode::trainable && e.trainable);
      slot = graph_->input(MatrixX<Scalar>(e.value.matrix()), rg);
    }
    return slot;
  }

  Graph<Scalar>& graph() { return *graph_; }

  /// Adds every bound leaf's gradient into the matching store entry.
  void accumulate_into(ParamStore<Scalar>& store) const {
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      const auto& leaf = leaves_[i];
      if (!leaf.valid() || !graph_->requires_grad(leaf)) continue;
      store[static_cast<Index>(i)].value.accumulate_grad(graph_->grad(leaf));
    }
  }

  /// Gradient for parameter `id` from the last backward (zeros if unused).
  MatrixX<Scalar> grad(Index id) const {
    const auto& leaf = leaves_[static_cast<std::size_t>(id)];
    const auto& e = (*store_)[id];
    if (!leaf.valid()) return MatrixX<Scalar>::Zero(e.value.rows(), e.value.cols());
    return graph_->grad(leaf);
  }

 private:
  Graph<Scalar>* graph_;
  const ParamStore<Scalar>* store_;
  GradMode mode_;
  std::vector<Var<Scalar>> leaves_;
};

}  // namespace avdit
