#include "frsp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace frsp {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " holds " +
                     std::to_string(shape_numel(shape_)) +
                     " values but data has " + std::to_string(data_.size()));
  }
}

Tensor Tensor::from(std::initializer_list<std::size_t> shape,
                    std::initializer_list<float> values) {
  return Tensor(Shape(shape), std::vector<float>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape_));
  }
  return shape_[axis];
}

float& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

float Tensor::at(std::size_t n, std::size_t c, std::size_t h,
                 std::size_t w) const {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

void Tensor::reshape(Shape shape) {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                     shape_str(shape));
  }
  shape_ = std::move(shape);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::slice0(std::size_t begin, std::size_t count) const {
  if (shape_.empty() || begin + count > shape_[0]) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " +
                     shape_str(shape_));
  }
  const std::size_t row = shape_[0] ? data_.size() / shape_[0] : 0;
  Shape s = shape_;
  s[0] = count;
  std::vector<float> d(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                       data_.begin() +
                           static_cast<std::ptrdiff_t>((begin + count) * row));
  return Tensor(std::move(s), std::move(d));
}

double Tensor::sum() const {
  double acc = 0.0;
  for (float v : data_) acc += v;
  return acc;
}

bool Tensor::all_finite() const {
  // Exponent bits all set means inf or nan.
  std::uint32_t bad = 0;
  const float* p = data_.data();
  for (std::size_t i = 0; i < data_.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, p + i, sizeof bits);
    bad |= static_cast<std::uint32_t>((bits & 0x7f800000u) == 0x7f800000u);
  }
  return bad == 0;
}

Tensor erase_along(const Tensor& t, std::size_t axis,
                   std::span<const std::size_t> indices) {
  const Shape& s = t.shape();
  if (axis >= s.size()) {
    throw ShapeError("erase axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  const std::size_t extent = s[axis];
  std::vector<char> drop(extent, 0);
  for (std::size_t idx : indices) {
    if (idx >= extent) {
      throw ShapeError("erase index " + std::to_string(idx) +
                       " out of range for axis " + std::to_string(axis) +
                       " of " + shape_str(s));
    }
    if (drop[idx]) {
      throw ShapeError("duplicate erase index " + std::to_string(idx));
    }
    drop[idx] = 1;
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

  Shape out_shape = s;
  out_shape[axis] = extent - indices.size();
  std::vector<float> out;
  out.reserve(shape_numel(out_shape));
  const float* src = t.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      if (drop[e]) continue;
      const float* row = src + (o * extent + e) * inner;
      out.insert(out.end(), row, row + inner);
    }
  }
  return Tensor(std::move(out_shape), std::move(out));
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + where);
  }
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected " + shape_str(expected) +
                     ", got " + shape_str(t.shape()));
  }
}

}  // namespace frsp
