#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tempal/errors.hpp"

namespace tempal {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

template <typename Scalar>
struct Storage {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  Shape shape;
  Vector value;
  Vector grad;  // empty unless requires_grad
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major n-d array with an optional gradient accumulator.
///
/// Copies share storage (handle semantics); use clone() for a deep copy.
/// Rank-0 scalars are represented with an empty shape and size 1.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() : s_(std::make_shared<detail::Storage<Scalar>>()) { s_->value.resize(0); }

  explicit Tensor(Shape shape, bool requires_grad = false)
      : s_(std::make_shared<detail::Storage<Scalar>>()) {
    for (Index d : shape) {
      if (d < 1) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->value = Vector::Zero(shape_size(s_->shape));
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, Vector data, bool requires_grad = false) : Tensor(std::move(shape), false) {
    if (data.size() != s_->value.size()) {
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(s_->shape));
    }
    s_->value = std::move(data);
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false)
      : Tensor(std::move(shape), Eigen::Map<const Vector>(values.begin(), Index(values.size())),
               requires_grad) {}

  static Tensor scalar(Scalar v) { return Tensor(Shape{}, Vector::Constant(1, v)); }
  static Tensor full(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    t.data().setConstant(v);
    return t;
  }

  const Shape& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  Index dim(int i) const { return s_->shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  Index size() const { return s_->value.size(); }
  bool empty() const { return s_->value.size() == 0; }

  Vector& data() { return s_->value; }
  const Vector& data() const { return s_->value; }
  Scalar* raw() { return s_->value.data(); }
  const Scalar* raw() const { return s_->value.data(); }

  Scalar item() const {
    if (size() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
    return s_->value[0];
  }

  Scalar& operator[](Index i) { return s_->value[i]; }
  Scalar operator[](Index i) const { return s_->value[i]; }

  /// Row-major matrix view of a rank-2 tensor (or rank-1 as a single row).
  MatrixMap matrix() {
    auto [r, c] = matrix_dims();
    return MatrixMap(raw(), r, c);
  }
  ConstMatrixMap matrix() const {
    auto [r, c] = matrix_dims();
    return ConstMatrixMap(raw(), r, c);
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (on && s_->grad.size() != s_->value.size()) s_->grad = Vector::Zero(s_->value.size());
    if (!on) s_->grad.resize(0);
  }
  bool has_grad() const { return s_->grad.size() == s_->value.size() && s_->value.size() > 0; }
  Vector& grad() { return s_->grad; }
  const Vector& grad() const { return s_->grad; }
  void zero_grad() {
    if (has_grad()) s_->grad.setZero();
  }

  /// Deep copy of the values; the copy does not require grad.
  Tensor detach() const { return Tensor(shape(), data()); }
  Tensor clone() const {
    Tensor t(shape(), data());
    if (requires_grad()) {
      t.set_requires_grad(true);
      t.grad() = grad();
    }
    return t;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const std::shared_ptr<detail::Storage<Scalar>>& storage() const { return s_; }

 private:
  std::pair<Index, Index> matrix_dims() const {
    if (rank() == 2) return {dim(0), dim(1)};
    if (rank() <= 1) return {1, size()};
    throw DimensionError("matrix view needs rank <= 2, got " + shape_str(shape()));
  }

  std::shared_ptr<detail::Storage<Scalar>> s_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Cast between scalar types; gradients are not carried over.
template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  return Tensor<To>(t.shape(), t.data().template cast<To>());
}

}  // namespace tempal
