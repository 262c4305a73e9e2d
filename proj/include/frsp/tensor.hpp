#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace frsp {

using Shape = std::vector<std::size_t>;

/// Thrown when tensor shapes disagree; the message names the offending dims.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a kernel produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major f32 tensor with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor from(std::initializer_list<std::size_t> shape,
                     std::initializer_list<float> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  // 4-d accessors for (N, C, H, W) tensors.
  float& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
  float at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

  /// Reinterprets the data under a new shape with the same element count.
  void reshape(Shape shape);
  void fill(float value);

  /// Copy of rows [begin, begin + count) along axis 0.
  Tensor slice0(std::size_t begin, std::size_t count) const;

  double sum() const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Removes the listed indices along `axis`. Indices need not be sorted;
/// duplicates or out-of-range entries throw ShapeError.
Tensor erase_along(const Tensor& t, std::size_t axis,
                   std::span<const std::size_t> indices);

/// Throws NumericError naming `where` if any value is NaN/Inf.
void require_finite(const Tensor& t, const char* where);

void require_shape(const Tensor& t, const Shape& expected, const char* what);

}  // namespace frsp
