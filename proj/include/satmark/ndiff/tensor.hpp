#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "satmark/errors.hpp"
#include "satmark/rng.hpp"

namespace satmark::ndiff {

using Shape = std::vector<int>;

inline Eigen::Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Eigen::Index{1},
                         [](Eigen::Index a, int b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline void check_shape(const Shape& shape) {
  for (int e : shape)
    if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
}

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

// Dense row-major n-d array. Plain value type: copying copies data and grad.
template <typename Scalar>
struct Tensor {
  using Array = ArrayX<Scalar>;

  Shape shape;
  Array data;
  bool requires_grad = false;
  std::optional<Array> grad;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)) {
    check_shape(shape);
    data = Array::Zero(ndiff::numel(shape));
  }
  Tensor(Shape s, Array values) : shape(std::move(s)), data(std::move(values)) {
    check_shape(shape);
    if (data.size() != ndiff::numel(shape))
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, Scalar v) {
    Tensor t(std::move(s));
    t.data.setConstant(v);
    return t;
  }
  static Tensor from(Shape s, std::initializer_list<Scalar> values) {
    Array a(static_cast<Eigen::Index>(values.size()));
    Eigen::Index i = 0;
    for (Scalar v : values) a[i++] = v;
    return Tensor(std::move(s), std::move(a));
  }
  static Tensor normal(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<Scalar>(stddev * rng.normal());
    return t;
  }
  static Tensor uniform(Shape s, Rng& rng, double lo, double hi) {
    Tensor t(std::move(s));
    for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<Scalar>(rng.uniform(lo, hi));
    return t;
  }

  Eigen::Index numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  Scalar& operator[](Eigen::Index i) { return data[i]; }
  Scalar operator[](Eigen::Index i) const { return data[i]; }

  // (c, y, x) accessor for rank-3 image-like tensors.
  Scalar& at(int c, int y, int x) { return data[(static_cast<Eigen::Index>(c) * shape[1] + y) * shape[2] + x]; }
  Scalar at(int c, int y, int x) const {
    return data[(static_cast<Eigen::Index>(c) * shape[1] + y) * shape[2] + x];
  }

  bool all_finite() const { return data.isFinite().all(); }

  void zero_grad() {
    if (grad) grad->setZero();
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t;
    t.shape = shape;
    t.data = data.template cast<Other>();
    t.requires_grad = requires_grad;
    if (grad) t.grad = grad->template cast<Other>();
    return t;
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace satmark::ndiff
