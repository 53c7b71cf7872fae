#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rescore {

using Shape = std::vector<int>;

inline long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << " x ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

/// Dense row-major tensor of 64-bit floats. Rank 1 tensors are treated as a
/// single row by the row-wise operations.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<long long>(data_.size()))
      throw std::invalid_argument("tensor data size " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  long long size() const { return static_cast<long long>(data_.size()); }

  // Row/column view for rank-1 and rank-2 tensors.
  int rows() const {
    if (ndim() == 1) return 1;
    if (ndim() == 2) return shape_[0];
    throw std::invalid_argument("rows() on tensor of shape " + shape_str(shape_));
  }
  int cols() const {
    if (ndim() == 1) return shape_[0];
    if (ndim() == 2) return shape_[1];
    throw std::invalid_argument("cols() on tensor of shape " + shape_str(shape_));
  }

  double& operator[](long long i) { return data_[i]; }
  double operator[](long long i) const { return data_[i]; }
  double& at(int r, int c) { return data_[static_cast<long long>(r) * cols() + c]; }
  double at(int r, int c) const { return data_[static_cast<long long>(r) * cols() + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(0.0); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  /// FNV-1a over the raw byte representation; bit-exact identity check.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (double v : data_) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 1099511628211ull;
      }
    }
    for (int d : shape_) {
      h ^= static_cast<std::uint64_t>(d);
      h *= 1099511628211ull;
    }
    return h;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline std::uint64_t combine_hash(std::uint64_t a, std::uint64_t b) {
  a ^= b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2);
  return a;
}

}  // namespace rescore
