// Dense row-major tensor. The numeric type is a template parameter: double for
// the "test" profile, float for the "fast" profile.

#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gm/common.hpp"

namespace gm {

template <typename R>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), R(0)) {}

  Tensor(std::vector<std::int64_t> shape, std::vector<R> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
      throw InputError("tensor: shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::int64_t> shape, R v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(R v) { return Tensor({1, 1}, {v}); }

  static Tensor row(std::vector<R> values) {
    auto n = static_cast<std::int64_t>(values.size());
    return Tensor({1, n}, std::move(values));
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  std::int64_t rows() const { return dim(0); }
  std::int64_t cols() const { return dim(1); }

  std::int64_t dim(std::size_t i) const {
    return i < shape_.size() ? shape_[i] : 1;
  }

  bool is_scalar() const { return numel() == 1; }
  R scalar_value() const {
    if (!is_scalar()) throw UsageError("tensor: scalar_value on non-scalar");
    return data_[0];
  }

  R* data() { return data_.data(); }
  const R* data() const { return data_.data(); }
  std::vector<R>& vec() { return data_; }
  const std::vector<R>& vec() const { return data_; }

  R& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  R operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  R& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
  R at(std::int64_t r, std::int64_t c) const { return data_[static_cast<std::size_t>(r * cols() + c)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (R v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  static std::string shape_str(const std::vector<std::int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
  }

  std::string shape_str() const { return shape_str(shape_); }

 private:
  static std::int64_t checked_numel(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) {
      if (d <= 0) throw InputError("tensor: non-positive dimension in " + shape_str(s));
      n *= d;
    }
    return n;
  }

  std::vector<std::int64_t> shape_;
  std::vector<R> data_;
};

}  // namespace gm
