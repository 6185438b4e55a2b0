#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace udc {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

/// Dense row-major float64 tensor. The gradient buffer is allocated on
/// first use and always mirrors the value shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::initializer_list<double> data);

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int64_t dim(size_t axis) const { return shape_.at(axis); }
  int rank() const { return static_cast<int>(shape_.size()); }
  bool is_scalar() const { return data_.size() == 1; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  bool has_grad() const { return !grad_.empty(); }
  void ensure_grad();
  void zero_grad();
  void drop_grad() { grad_.clear(); }
  std::span<double> grad();
  std::span<const double> grad() const;
  Tensor grad_tensor() const;

  /// Throws EngineError naming `what` if any element (or gradient
  /// element) is NaN/Inf.
  void check_finite(const std::string& what) const;

  void fill(double value);
  double max_abs() const;
  double sum() const;
  double squared_norm() const;
  int64_t count_nonzero() const;

 private:
  Shape shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
  bool requires_grad_ = false;
};

/// Sums `terms` through a fixed pairwise reduction tree keyed on index,
/// so the result is bitwise independent of how the inputs were produced
/// (the deterministic cross-stream gradient merge contract).
Tensor deterministic_sum(std::span<const Tensor> terms);

}  // namespace udc
