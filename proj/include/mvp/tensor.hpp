#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvp {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EVec = Eigen::VectorXd;

// Dense row-major 64-bit float tensor, rank 1 or 2. Value semantics.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    v_.assign(count(shape_), 0.0);
  }

  Tensor(std::vector<int> shape, std::vector<double> values)
      : shape_(std::move(shape)), v_(std::move(values)) {
    check_shape(shape_);
    if (count(shape_) != v_.size())
      throw std::invalid_argument("tensor: shape/value count mismatch");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor vec(std::initializer_list<double> vals) {
    return Tensor({static_cast<int>(vals.size())}, std::vector<double>(vals));
  }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int rows() const { return rank() == 2 ? shape_[0] : 1; }
  int cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0); }
  size_t size() const { return v_.size(); }
  bool empty() const { return v_.empty(); }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double& operator[](size_t i) { return v_[i]; }
  double operator[](size_t i) const { return v_[i]; }
  double& at(int r, int c) { return v_[static_cast<size_t>(r) * shape_[1] + c]; }
  double at(int r, int c) const { return v_[static_cast<size_t>(r) * shape_[1] + c]; }

  void fill(double v) { std::fill(v_.begin(), v_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double sum() const { return std::accumulate(v_.begin(), v_.end(), 0.0); }

  // Eigen views. m() treats rank-1 as a single row.
  Eigen::Map<EMat> m() { return {v_.data(), rows(), cols()}; }
  Eigen::Map<const EMat> m() const { return {v_.data(), rows(), cols()}; }
  Eigen::Map<EVec> v() { return {v_.data(), static_cast<Eigen::Index>(v_.size())}; }
  Eigen::Map<const EVec> v() const { return {v_.data(), static_cast<Eigen::Index>(v_.size())}; }

  const std::vector<double>& values() const { return v_; }
  std::vector<double>& values() { return v_; }

 private:
  static size_t count(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
  }

  static void check_shape(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 2)
      throw std::invalid_argument("tensor: rank must be 1 or 2");
    for (int d : shape)
      if (d <= 0) throw std::invalid_argument("tensor: dimensions must be positive");
  }

  std::vector<int> shape_;
  std::vector<double> v_;
};

// Named learnable parameter with a persistent gradient buffer.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor::zeros(value.shape());
  }

  void zero_grad() { grad.fill(0.0); }
  size_t size() const { return value.size(); }
};

}  // namespace mvp
