#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nmod/error.hpp"
#include "nmod/typesys.hpp"

namespace nmod {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string render_shape(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

/// Dense row-major tensor. A default-constructed tensor is a rank-0 zero.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : data_(1, T{0}) {}

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    for (auto d : shape_) {
      if (d < 0) fail(Errc::ShapeMismatch, "negative dimension in shape " + render_shape(shape_));
    }
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
      fail(Errc::ShapeMismatch, "data size " + std::to_string(data_.size()) +
                                    " does not match shape " + render_shape(shape_));
    }
  }

  static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T item() const {
    if (data_.size() != 1) fail(Errc::NonScalarSink, "tensor of shape " + render_shape(shape_) + " is not a scalar");
    return data_[0];
  }

  /// Number of rows when the last axis is viewed as the feature axis.
  std::int64_t rows() const { return shape_.empty() ? 1 : shape_numel(shape_) / std::max<std::int64_t>(shape_.back(), 1); }

  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != static_cast<std::int64_t>(data_.size())) {
      fail(Errc::ShapeMismatch, "cannot reshape " + render_shape(shape_) + " to " + render_shape(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  /// Bitwise equality of shape and contents.
  bool identical(const BasicTensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

/// Whether `shape` instantiates `type`: equal rank and every fixed dim
/// matching. Root accepts anything; scalars need exactly one element.
inline bool shape_matches(const NeuralType& type, const Shape& shape) {
  switch (type.kind()) {
    case TypeKind::Root: return true;
    case TypeKind::NonTensor: return shape_numel(shape) == 1;
    case TypeKind::Tensor: break;
  }
  if (shape.size() != type.rank()) return false;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const auto& d = type.axes()[i].dim;
    if (d && *d != shape[i]) return false;
  }
  return true;
}

}  // namespace nmod
