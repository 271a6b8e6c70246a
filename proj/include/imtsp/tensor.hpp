#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace imtsp {

// =============================================================================
// Errors
// =============================================================================

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad caller input (sizes, counts, indices).
struct ArgumentError : Error {
  using Error::Error;
};

/// Shape mismatch inside a tensor operation; the message names the op and
/// the offending shapes.
struct ShapeError : Error {
  using Error::Error;
};

/// A published operation produced NaN/Inf or hit a log(0) guard.
struct NumericError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

// =============================================================================
// Tensor: dense row-major array of doubles
// =============================================================================

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw ShapeError("Tensor: shape " + shape_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }
  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Rows/cols view every tensor as a matrix: rank-1 tensors are one row.
  std::size_t rows() const { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("Tensor::item: shape " + shape_string(shape_) + " is not scalar");
    return data_[0];
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != data_.size())
      throw ShapeError("reshape: cannot view " + shape_string(shape_) + " as " + shape_string(s));
    return Tensor(std::move(s), data_);
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace imtsp
