#pragma once

#include <array>
#include <functional>
#include <utility>
#include <vector>

#include "bowda/boundary.hpp"
#include "bowda/image.hpp"
#include "bowda/rng.hpp"

namespace bowda {

struct CropSpec {
  Dims size{8, 32, 32};

  static CropSpec paper() { return {Dims{16, 96, 96}}; }
  void validate() const;
};

struct Crop {
  Volume image;
  Mask label;
  VoxelIndex origin{0, 0, 0};
};

/// Copies the block of `size` voxels starting at `origin`.
template <typename T>
Image<T> extract_block(const Image<T>& img, const VoxelIndex& origin, const Dims& size);
Mask extract_block(const Mask& m, const VoxelIndex& origin, const Dims& size);

/// Origin drawn uniformly per axis (depth, height, width order) over the
/// valid range; image and label are cut identically.
Crop random_crop(const Volume& image, const Mask& label, const CropSpec& spec, Rng& rng);

/// Flips (applied first, per axis) followed by `rotations` quarter turns in the
/// height/width plane.
struct AugmentDraw {
  int rotations = 0;
  std::array<bool, 3> flips{false, false, false};

  bool identity() const { return rotations % 4 == 0 && !flips[0] && !flips[1] && !flips[2]; }
};

AugmentDraw sample_augment(Rng& rng);

template <typename T>
Image<T> apply_augment(const Image<T>& img, const AugmentDraw& draw);
Mask apply_augment(const Mask& m, const AugmentDraw& draw);
/// Undoes apply_augment with the same draw.
template <typename T>
Image<T> invert_augment(const Image<T>& img, const AugmentDraw& draw);
Mask invert_augment(const Mask& m, const AugmentDraw& draw);

std::pair<Volume, Mask> augment(const Volume& image, const Mask& label, Rng& rng);

struct WindowSpec {
  Dims window{8, 32, 32};
  Dims stride{4, 16, 16};

  /// Stride of half the window (at least 1) per axis.
  static WindowSpec half_overlap(const Dims& window);
  void validate() const;
};

/// Window start positions along one axis: multiples of the stride, with the
/// last window clamped to end at the volume edge. Requires window <= extent.
std::vector<int> window_origins(int extent, int window, int stride);

/// Number of windows covering each voxel (volume at least window-sized).
Image<int> coverage_counts(const Dims& dims, const WindowSpec& spec);

using Predictor = std::function<Volume(const Volume&)>;

/// Averages overlapping window predictions. Volumes smaller than the window
/// are padded with edge values (split evenly before/after) and cropped back.
/// Predictions may run concurrently; they are merged in window order.
Volume sliding_window_infer(const Predictor& predict, const Volume& vol, const WindowSpec& spec);

/// Edge-replicating pad so every axis is at least `min_dims`; returns the
/// offset of the original volume inside the padded one.
Volume pad_to_at_least(const Volume& vol, const Dims& min_dims, VoxelIndex& offset);

}  // namespace bowda
