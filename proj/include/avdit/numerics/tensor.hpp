#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace avdit {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised whenever a NaN or Inf shows up in a value or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major tensor. Rank-N data is stored flat; `matrix()` views it
/// as rows = first extent, cols = product of the remaining extents.
template <typename Scalar>
class Tensor {
 public:
  using Matrix = MatrixX<Scalar>;
  using Vector = VectorX<Scalar>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_ = Vector::Zero(shape_numel(shape_));
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  template <typename Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    Tensor out({m.rows(), m.cols()});
    out.matrix() = m;
    return out;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return data_.size(); }
  Index extent(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  bool empty() const { return data_.size() == 0; }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Index offset(std::initializer_list<Index> idx) const {
    if (idx.size() != shape_.size()) throw DimensionError("index rank mismatch");
    Index off = 0;
    std::size_t a = 0;
    for (Index i : idx) {
      if (i < 0 || i >= shape_[a]) throw DimensionError("index out of range");
      off = off * shape_[a] + i;
      ++a;
    }
    return off;
  }
  Scalar& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  Scalar at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  Index rows() const { return shape_.size() < 2 ? 1 : shape_[0]; }
  Index cols() const {
    if (shape_.empty()) return 1;
    if (shape_.size() == 1) return shape_[0];
    return shape_numel(Shape(shape_.begin() + 1, shape_.end()));
  }
  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) throw DimensionError("reshape changes element count");
    return Tensor(std::move(shape), data_);
  }

  template <typename To>
  Tensor<To> cast() const {
    Tensor<To> out(shape_, data_.template cast<To>());
    out.set_requires_grad(requires_grad_);
    return out;
  }

  bool all_finite() const { return data_.allFinite(); }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool flag) { requires_grad_ = flag; }

  const std::optional<Vector>& grad() const { return grad_; }
  void zero_grad() { grad_.reset(); }
  void accumulate_grad(const Matrix& g) {
    if (g.size() != numel()) throw DimensionError("gradient size mismatch");
    Eigen::Map<const Vector> flat(g.data(), g.size());
    if (grad_) {
      *grad_ += flat;
    } else {
      grad_ = flat;
    }
  }

  /// Bitwise comparison of shape and data.
  bool identical(const Tensor& other) const {
    return shape_ == other.shape_ && data_.size() == other.data_.size() &&
           std::equal(data_.data(), data_.data() + data_.size(), other.data_.data(),
                      [](Scalar a, Scalar b) {
                        return std::memcmp(&a, &b, sizeof(Scalar)) == 0;
                      });
  }

 private:
  void check_extents() const {
    for (Index e : shape_) {
      if (e < 0) throw DimensionError("negative extent in shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  Vector data_;
  bool requires_grad_ = false;
  std::optional<Vector> grad_;
};

/// Named parameter tensors in stable insertion order.
template <typename Scalar>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<Scalar> value;
    bool trainable = true;
  };

  Index add(std::string name, Tensor<Scalar> value, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    const Index id = static_cast<Index>(entries_.size());
    index_.emplace(name, id);
    value.set_requires_grad(trainable);
    entries_.push_back(Entry{std::move(name), std::move(value), trainable});
    return id;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Index index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  Index size() const { return static_cast<Index>(entries_.size()); }
  Entry& operator[](Index i) { return entries_[static_cast<std::size_t>(i)]; }
  const Entry& operator[](Index i) const { return entries_[static_cast<std::size_t>(i)]; }
  Entry& at(const std::string& name) { return (*this)[index_of(name)]; }
  const Entry& at(const std::string& name) const { return (*this)[index_of(name)]; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  std::set<std::string> trainable_names() const {
    std::set<std::string> out;
    for (const auto& e : entries_) {
      if (e.trainable) out.insert(e.name);
    }
    return out;
  }

  /// Marks exactly `names` trainable. Unknown names are an error.
  void set_trainable(const std::set<std::string>& names) {
    for (const auto& n : names) index_of(n);
    for (auto& e : entries_) {
      e.trainable = names.count(e.name) != 0;
      e.value.set_requires_grad(e.trainable);
    }
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  template <typename To>
  ParamStore<To> cast() const {
    ParamStore<To> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<To>(), e.trainable);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, Index> index_;
};

}  // namespace avdit
