#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "inv/error.hpp"

namespace inv {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array of doubles. 3-D tensors are (channel, row, column).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_)) {
      throw ValidationError("tensor value count " + std::to_string(values_.size()) +
                            " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  const std::vector<double>& vector() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  // Accessors for (C, H, W) tensors.
  std::size_t channels() const { return shape_.at(0); }
  std::size_t height() const { return shape_.at(1); }
  std::size_t width() const { return shape_.at(2); }
  double& at(std::size_t c, std::size_t r, std::size_t col) {
    return values_[(c * shape_[1] + r) * shape_[2] + col];
  }
  double at(std::size_t c, std::size_t r, std::size_t col) const {
    return values_[(c * shape_[1] + r) * shape_[2] + col];
  }
  std::span<double> channel(std::size_t c) {
    const std::size_t plane = shape_[1] * shape_[2];
    return std::span(values_).subspan(c * plane, plane);
  }
  std::span<const double> channel(std::size_t c) const {
    const std::size_t plane = shape_[1] * shape_[2];
    return std::span(values_).subspan(c * plane, plane);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ValidationError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

// Single-channel H x W map, stored row-major.
struct Map2D {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Map2D() = default;
  Map2D(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
  Map2D(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
    if (values.size() != h * w) throw ValidationError("map value count does not match " + std::to_string(h) + "x" + std::to_string(w));
  }

  double& operator()(std::size_t r, std::size_t c) { return values[r * width + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  std::size_t size() const { return values.size(); }

  friend bool operator==(const Map2D&, const Map2D&) = default;
};

}  // namespace inv
