#ifndef LOCSEG_ENGINE_TENSOR_HPP
#define LOCSEG_ENGINE_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace locseg {

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

/// Dense row-major tensor; the last axis varies fastest.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_)) {
      throw std::invalid_argument("tensor: " + std::to_string(values_.size()) + " values do not fill shape " +
                                  shape_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_.size(); }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }
  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::vector<T>& storage() { return values_; }
  const std::vector<T>& storage() const { return values_; }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  T& at(std::size_t i, std::size_t j) { return values_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return values_[i * shape_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) { return values_[(i * shape_[1] + j) * shape_[2] + k]; }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return values_[(i * shape_[1] + j) * shape_[2] + k];
  }
  T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return values_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return values_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  /// Changes the shape without touching values; element count must match.
  void reshape(Shape shape) {
    if (shape_size(shape) != values_.size()) {
      throw std::invalid_argument("tensor: cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  /// Reallocates to a new shape, zero-filled.
  void resize(Shape shape) {
    shape_ = std::move(shape);
    values_.assign(shape_size(shape_), T{0});
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(values_.begin(), values_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.values_ == b.values_; }

 private:
  Shape shape_;
  std::vector<T> values_;
};

/// Throws naming the first axis where `actual` differs from `expected`.
inline void require_shape(const Shape& actual, const Shape& expected, const char* what) {
  if (actual.size() != expected.size()) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(expected.size()) + ", got " +
                                shape_string(actual));
  }
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (actual[i] != expected[i]) {
      throw std::invalid_argument(std::string(what) + ": axis " + std::to_string(i) + " has extent " +
                                  std::to_string(actual[i]) + ", expected " + std::to_string(expected[i]) + " (shape " +
                                  shape_string(actual) + ")");
    }
  }
}

}  // namespace locseg

#endif  // LOCSEG_ENGINE_TENSOR_HPP
