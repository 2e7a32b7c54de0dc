#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "optfusion/errors.hpp"

namespace optfusion {

using real_t = double;

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// Dense row-major real array. The universal numeric carrier: rank 0..2 in
// practice (scalars, vectors, matrices), grad buffers share the same type.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, real_t fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<real_t> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(real_t v) { return Tensor({1}, {v}); }
  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }
  static Tensor row(std::vector<real_t> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<real_t> v) {
    return Tensor({r, c}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-2 helpers; rank-1 tensors count as a single row.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const {
    return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1);
  }

  real_t* data() { return data_.data(); }
  const real_t* data() const { return data_.data(); }
  std::vector<real_t>& vec() { return data_; }
  const std::vector<real_t>& vec() const { return data_; }

  real_t& operator[](std::size_t i) { return data_[i]; }
  real_t operator[](std::size_t i) const { return data_[i]; }
  real_t& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  real_t at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  real_t item() const {
    if (size() != 1)
      throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  void fill(real_t v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (real_t v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool bit_equal(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  Shape shape_;
  std::vector<real_t> data_;
};

}  // namespace optfusion
