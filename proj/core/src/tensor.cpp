#include "udc/tensor.hpp"

#include <cmath>
#include <sstream>

#include "udc/error.hpp"

namespace udc {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw EngineError("non-positive extent in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
    throw EngineError("element count " + std::to_string(data_.size()) + " does not match shape " +
                      shape_to_string(shape_));
  }
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::from(Shape shape, std::initializer_list<double> data) {
  return Tensor(std::move(shape), std::vector<double>(data));
}

double Tensor::item() const {
  if (data_.size() != 1) throw EngineError("item() on non-scalar tensor " + shape_to_string(shape_));
  return data_[0];
}

void Tensor::ensure_grad() {
  if (grad_.empty()) grad_.assign(data_.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!grad_.empty()) grad_.assign(data_.size(), 0.0);
}

std::span<double> Tensor::grad() {
  ensure_grad();
  return grad_;
}

std::span<const double> Tensor::grad() const {
  if (grad_.empty()) throw EngineError("gradient buffer not allocated");
  return grad_;
}

Tensor Tensor::grad_tensor() const {
  if (grad_.empty()) throw EngineError("gradient buffer not allocated");
  return Tensor(shape_, grad_);
}

void Tensor::check_finite(const std::string& what) const {
  for (double v : data_) {
    if (!std::isfinite(v)) throw EngineError("non-finite value in " + what);
  }
  for (double g : grad_) {
    if (!std::isfinite(g)) throw EngineError("non-finite gradient in " + what);
  }
}

void Tensor::fill(double value) { data_.assign(data_.size(), value); }

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::squared_norm() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return s;
}

int64_t Tensor::count_nonzero() const {
  int64_t n = 0;
  for (double v : data_) n += (v != 0.0);
  return n;
}

Tensor deterministic_sum(std::span<const Tensor> terms) {
  if (terms.empty()) throw EngineError("deterministic_sum of zero terms");
  std::vector<Tensor> level(terms.begin(), terms.end());
  for (const Tensor& t : level) {
    if (!same_shape(t.shape(), level[0].shape())) {
      throw EngineError("deterministic_sum shape mismatch: " + shape_to_string(t.shape()) + " vs " +
                        shape_to_string(level[0].shape()));
    }
  }
  // pairwise tree: (0+1), (2+3), ... repeated until one term remains
  while (level.size() > 1) {
    std::vector<Tensor> next;
    next.reserve((level.size() + 1) / 2);
    for (size_t i = 0; i + 1 < level.size(); i += 2) {
      Tensor s = level[i];
      const Tensor& b = level[i + 1];
      for (int64_t j = 0; j < s.numel(); ++j) s[j] += b[j];
      next.push_back(std::move(s));
    }
    if (level.size() % 2 == 1) next.push_back(std::move(level.back()));
    level = std::move(next);
  }
  return level[0];
}

}  // namespace udc
