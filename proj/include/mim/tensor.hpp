#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mim {

// Dense row-major tensor of 64-bit floats. Values are checked for
// finiteness at construction; shapes are explicit, no broadcasting.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != size_of(shape_))
      throw std::invalid_argument("Tensor: data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
    check_finite();
  }

  explicit Tensor(std::initializer_list<double> values)
      : shape_{values.size()}, data_(values) {
    check_finite();
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    std::vector<double> d(size_of(shape), 0.0);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor vector(std::vector<double> data) {
    std::vector<std::size_t> shape{data.size()};
    return Tensor(std::move(shape), std::move(data));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static std::size_t size_of(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D access, row-major.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double norm() const {
    double s = 0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  static std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }

 private:
  void check_finite() const {
    for (double v : data_)
      if (!std::isfinite(v))
        throw std::invalid_argument("Tensor: non-finite value");
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double cosine(const Tensor& a, const Tensor& b) {
  double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("cosine: zero-norm vector");
  return dot(a, b) / (na * nb);
}

}  // namespace mim
