#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bowda {

/// (batch, channels, depth, height, width).
struct Shape {
  int n = 1;
  int c = 1;
  int d = 1;
  int h = 1;
  int w = 1;

  std::size_t spatial() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  std::size_t count() const { return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * spatial(); }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{}) : shape_(shape), data_(shape.count(), fill) {
    validate();
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    validate();
    if (data_.size() != shape_.count()) {
      throw std::invalid_argument("Tensor: data size does not match shape " + to_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Start of the (n, c) spatial block.
  T* channel(int n, int c) { return data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.spatial(); }
  const T* channel(int n, int c) const {
    return data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.spatial();
  }
  /// Start of sample n.
  T* sample(int n) { return channel(n, 0); }
  const T* sample(int n) const { return channel(n, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  void validate() const {
    if (shape_.n < 1 || shape_.c < 1 || shape_.d < 1 || shape_.h < 1 || shape_.w < 1) {
      throw std::invalid_argument("Tensor: all extents must be >= 1, got " + to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

}  // namespace bowda
