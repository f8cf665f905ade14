#pragma once

// Plain (non-differentiating) dense kernels. The autodiff graph reuses
// these for its forward passes, so reduction order is fixed in one place.

#include "avdit/numerics/tensor.hpp"

#include <cmath>
#include <limits>
#include <optional>

namespace avdit {

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace kernels {

/// In-place row softmax with max subtraction. Entries equal to -inf are
/// blocked; a row with every entry blocked becomes all zeros.
template <typename Derived>
void softmax_rows_inplace(Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  for (Index r = 0; r < m.rows(); ++r) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index c = 0; c < m.cols(); ++c) mx = std::max(mx, m(r, c));
    if (!std::isfinite(mx)) {
      m.row(r).setZero();
      continue;
    }
    Scalar sum = 0;
    for (Index c = 0; c < m.cols(); ++c) {
      const Scalar e = std::exp(m(r, c) - mx);
      m(r, c) = e;
      sum += e;
    }
    const Scalar inv = Scalar(1) / sum;
    for (Index c = 0; c < m.cols(); ++c) m(r, c) *= inv;
  }
}

/// Affine-free normalization of each row: (x - mean) / sqrt(var + eps),
/// population variance. Writes the per-row inverse std into `inv_std` if given.
template <typename Scalar>
MatrixX<Scalar> layer_norm_rows(const MatrixX<Scalar>& x, Scalar eps,
                                VectorX<Scalar>* inv_std = nullptr) {
  MatrixX<Scalar> y(x.rows(), x.cols());
  if (inv_std) inv_std->resize(x.rows());
  const Scalar n = static_cast<Scalar>(x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    Scalar mean = 0;
    for (Index c = 0; c < x.cols(); ++c) mean += x(r, c);
    mean /= n;
    Scalar var = 0;
    for (Index c = 0; c < x.cols(); ++c) {
      const Scalar d = x(r, c) - mean;
      var += d * d;
    }
    var /= n;
    const Scalar denom = std::sqrt(var + eps);
    // eps = 0 on a constant row: define the output as zeros.
    const Scalar inv = denom > Scalar(0) ? Scalar(1) / denom : Scalar(0);
    for (Index c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mean) * inv;
    if (inv_std) (*inv_std)[r] = inv;
  }
  return y;
}

template <typename Scalar>
inline Scalar gelu(Scalar x) {
  constexpr Scalar k = Scalar(0.7978845608028654);  // sqrt(2/pi)
  const Scalar inner = k * (x + Scalar(0.044715) * x * x * x);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(inner));
}

template <typename Scalar>
inline Scalar gelu_derivative(Scalar x) {
  constexpr Scalar k = Scalar(0.7978845608028654);
  const Scalar inner = k * (x + Scalar(0.044715) * x * x * x);
  const Scalar th = std::tanh(inner);
  return Scalar(0.5) * (Scalar(1) + th) +
         Scalar(0.5) * x * (Scalar(1) - th * th) * k * (Scalar(1) + Scalar(3 * 0.044715) * x * x);
}

template <typename Scalar>
inline Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

/// Single-head scaled dot-product attention probabilities:
/// softmax(Q K^T / sqrt(d) + bias), blocked entries masked to -inf.
template <typename Scalar, typename DQ, typename DK>
MatrixX<Scalar> attention_probs(const Eigen::MatrixBase<DQ>& q, const Eigen::MatrixBase<DK>& k,
                                const BoolMatrix* mask) {
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  MatrixX<Scalar> s = (q * k.transpose()) * scale;
  if (mask) {
    if (mask->rows() != s.rows() || mask->cols() != s.cols()) {
      throw DimensionError("attention mask shape mismatch");
    }
    for (Index r = 0; r < s.rows(); ++r)
      for (Index c = 0; c < s.cols(); ++c)
        if (!(*mask)(r, c)) s(r, c) = -std::numeric_limits<Scalar>::infinity();
  }
  softmax_rows_inplace(s);
  return s;
}

}  // namespace kernels

// Tensor-level operations.

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects rank-2 tensors");
  if (a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul inner extents differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  return Tensor<Scalar>::from_matrix(a.matrix() * b.matrix());
}

namespace detail {
// Views an axis of a row-major tensor as (outer, axis, inner) strides.
struct AxisLayout {
  Index outer = 1, extent = 1, inner = 1;
};
inline AxisLayout axis_layout(const Shape& shape, Index axis) {
  if (axis < 0) axis += static_cast<Index>(shape.size());
  if (axis < 0 || axis >= static_cast<Index>(shape.size())) throw DimensionError("invalid axis");
  AxisLayout l;
  for (Index i = 0; i < axis; ++i) l.outer *= shape[static_cast<std::size_t>(i)];
  l.extent = shape[static_cast<std::size_t>(axis)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i)
    l.inner *= shape[static_cast<std::size_t>(i)];
  return l;
}
}  // namespace detail

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis) {
  if (!x.all_finite()) throw NumericError("softmax: non-finite input");
  const auto l = detail::axis_layout(x.shape(), axis);
  Tensor<Scalar> out = x;
  MatrixX<Scalar> row(1, l.extent);
  for (Index o = 0; o < l.outer; ++o) {
    for (Index i = 0; i < l.inner; ++i) {
      for (Index a = 0; a < l.extent; ++a) row(0, a) = x[(o * l.extent + a) * l.inner + i];
      kernels::softmax_rows_inplace(row);
      for (Index a = 0; a < l.extent; ++a) out[(o * l.extent + a) * l.inner + i] = row(0, a);
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, Index axis, Scalar eps) {
  const auto l = detail::axis_layout(x.shape(), axis);
  if (l.extent < 1) throw DimensionError("layer_norm: empty axis");
  Tensor<Scalar> out = x;
  MatrixX<Scalar> row(1, l.extent);
  for (Index o = 0; o < l.outer; ++o) {
    for (Index i = 0; i < l.inner; ++i) {
      for (Index a = 0; a < l.extent; ++a) row(0, a) = x[(o * l.extent + a) * l.inner + i];
      const MatrixX<Scalar> y = kernels::layer_norm_rows(row, eps);
      for (Index a = 0; a < l.extent; ++a) out[(o * l.extent + a) * l.inner + i] = y(0, a);
    }
  }
  return out;
}

/// softmax(Q K^T / sqrt(d) + mask bias) V. `mask(i, j) == true` lets query i
/// attend key j; a query with no admissible key yields a zero row.
template <typename Scalar>
Tensor<Scalar> attention_core(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                              const Tensor<Scalar>& v,
                              const std::optional<BoolMatrix>& mask = std::nullopt) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError("attention_core expects rank-2 tensors");
  }
  if (q.extent(1) != k.extent(1)) throw DimensionError("attention_core: head dims differ");
  if (k.extent(0) != v.extent(0)) throw DimensionError("attention_core: key/value counts differ");
  const MatrixX<Scalar> p =
      kernels::attention_probs<Scalar>(q.matrix(), k.matrix(), mask ? &*mask : nullptr);
  return Tensor<Scalar>::from_matrix(p * v.matrix());
}

}  // namespace avdit
