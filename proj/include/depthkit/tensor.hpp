#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "depthkit/common.hpp"

namespace depthkit {

/// Dense row-major tensor over a real scalar type. Rank is dynamic; shape
/// [r, c] tensors view themselves as Eigen matrices via mat(), everything
/// else flattens to an array view. float for training, double for tests.
template <typename ScalarT>
class Tensor {
 public:
  using Scalar = ScalarT;
  using EigenMat =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<EigenMat>;
  using ConstMatMap = Eigen::Map<const EigenMat>;
  using ArrMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), Scalar(0)) {}

  Tensor(std::vector<int64_t> shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != int64_t(data_.size())) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, Scalar v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(Scalar v) { return Tensor({1}, {v}); }

  static Tensor eye(int64_t n) {
    Tensor t({n, n});
    for (int64_t i = 0; i < n; ++i) t.at(i, i) = Scalar(1);
    return t;
  }

  static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = Scalar(rng.normal() * stddev);
    return t;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  int64_t numel() const { return int64_t(data_.size()); }

  int64_t dim(int i) const { return shape_[size_t(i)]; }

  // last-axis size; leading axes collapse into rows()
  int64_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  int64_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](int64_t i) { return data_[size_t(i)]; }
  Scalar operator[](int64_t i) const { return data_[size_t(i)]; }

  Scalar& at(int64_t r, int64_t c) { return data_[size_t(r * cols() + c)]; }
  Scalar at(int64_t r, int64_t c) const { return data_[size_t(r * cols() + c)]; }

  MatMap mat() { return MatMap(data_.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(data_.data(), rows(), cols()); }

  ArrMap arr() { return ArrMap(data_.data(), numel()); }
  ConstArrMap arr() const { return ConstArrMap(data_.data(), numel()); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (Scalar v : data_) {
      if (!std::isfinite(double(v))) return false;
    }
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = T(data_[size_t(i)]);
    return out;
  }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  static int64_t checked_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
      n *= d;
    }
    return n;
  }

  std::vector<int64_t> shape_;
  std::vector<Scalar> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace depthkit
