#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bowda {

/// Voxel counts, axis order (depth, height, width). Depth is the slice axis.
struct Dims {
  int depth = 1;
  int height = 1;
  int width = 1;

  std::size_t count() const {
    return static_cast<std::size_t>(depth) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  int operator[](int axis) const { return axis == 0 ? depth : axis == 1 ? height : width; }
  int& operator[](int axis) { return axis == 0 ? depth : axis == 1 ? height : width; }
  bool operator==(const Dims&) const = default;
};

/// Physical voxel size in millimeters, axis order (depth, height, width).
struct Spacing {
  double depth = 1.0;
  double height = 1.0;
  double width = 1.0;

  double operator[](int axis) const { return axis == 0 ? depth : axis == 1 ? height : width; }
  double& operator[](int axis) { return axis == 0 ? depth : axis == 1 ? height : width; }
  bool operator==(const Spacing&) const = default;
};

std::string to_string(const Dims& d);
std::string to_string(const Spacing& s);

/// Dense 3D scalar field with physical spacing. Row-major, depth slowest.
template <typename T>
class Image {
 public:
  using value_type = T;

  Image() = default;
  Image(Dims dims, Spacing spacing, T fill = T{}) : dims_(dims), spacing_(spacing) {
    validate_geometry();
    values_.assign(dims_.count(), fill);
  }
  Image(Dims dims, Spacing spacing, std::vector<T> values)
      : dims_(dims), spacing_(spacing), values_(std::move(values)) {
    validate_geometry();
    if (values_.size() != dims_.count()) {
      throw std::invalid_argument("Image: value count " + std::to_string(values_.size()) +
                                  " does not match dims " + to_string(dims_));
    }
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::size_t size() const { return values_.size(); }

  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * dims_.height + y) * dims_.width + x;
  }
  T& operator()(int z, int y, int x) { return values_[index(z, y, x)]; }
  const T& operator()(int z, int y, int x) const { return values_[index(z, y, x)]; }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  bool contains(int z, int y, int x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < dims_.depth && y < dims_.height && x < dims_.width;
  }

  const std::vector<T>& values() const { return values_; }
  std::vector<T>& values() { return values_; }

 private:
  void validate_geometry() const {
    if (dims_.depth < 1 || dims_.height < 1 || dims_.width < 1) {
      throw std::invalid_argument("Image: dims must be >= 1, got " + to_string(dims_));
    }
    if (!(spacing_.depth > 0) || !(spacing_.height > 0) || !(spacing_.width > 0)) {
      throw std::invalid_argument("Image: spacing must be > 0, got " + to_string(spacing_));
    }
  }

  Dims dims_;
  Spacing spacing_;
  std::vector<T> values_;
};

using Volume = Image<float>;
/// Nonnegative boundary weights (W_s, W_t).
using WeightMap = Image<float>;
/// Euclidean distance in millimeters to the nearest reference boundary voxel.
using DistanceMap = Image<double>;

/// Binary label volume; every value is exactly 0 or 1.
class Mask : public Image<std::uint8_t> {
 public:
  Mask() = default;
  Mask(Dims dims, Spacing spacing) : Image(dims, spacing, std::uint8_t{0}) {}
  Mask(Dims dims, Spacing spacing, std::vector<std::uint8_t> values);

  /// Voxels with value >= threshold become foreground.
  template <typename T>
  static Mask threshold(const Image<T>& img, double threshold);

  std::size_t foreground_count() const;
  bool empty() const { return foreground_count() == 0; }
  bool full() const { return foreground_count() == size(); }
};

template <typename T>
Mask Mask::threshold(const Image<T>& img, double threshold) {
  Mask m(img.dims(), img.spacing());
  for (std::size_t i = 0; i < img.size(); ++i) {
    m[i] = static_cast<double>(img[i]) >= threshold ? 1 : 0;
  }
  return m;
}

template <typename T, typename U>
void require_same_geometry(const Image<T>& a, const Image<U>& b, const char* what) {
  if (!(a.dims() == b.dims()) || !(a.spacing() == b.spacing())) {
    throw std::invalid_argument(std::string(what) + ": geometry mismatch (" + to_string(a.dims()) +
                                " vs " + to_string(b.dims()) + ")");
  }
}

template <typename T, typename U>
void require_same_dims(const Image<T>& a, const Image<U>& b, const char* what) {
  if (!(a.dims() == b.dims())) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch (" + to_string(a.dims()) +
                                " vs " + to_string(b.dims()) + ")");
  }
}

/// Element-type conversion keeping geometry.
template <typename To, typename From>
Image<To> image_cast(const Image<From>& src) {
  std::vector<To> v(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) v[i] = static_cast<To>(src[i]);
  return Image<To>(src.dims(), src.spacing(), std::move(v));
}

}  // namespace bowda
