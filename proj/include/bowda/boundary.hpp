#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "bowda/image.hpp"

namespace bowda {

using VoxelIndex = std::array<int, 3>;  // (z, y, x)

/// Foreground voxels with at least one 6-neighbor in the background or outside
/// the volume, in increasing linear-index order.
using BoundaryPointSet = std::vector<VoxelIndex>;

BoundaryPointSet morphological_boundary(const Mask& mask);

/// Same set as a 0/1 volume.
Mask boundary_mask(const Mask& mask);

/// Gradient magnitude of the mask under the 3x3x3 Sobel operators, scaled so
/// the maximum is 1 (all zeros when the mask is constant). Borders replicate
/// the edge voxel, which keeps constant masks at zero and makes the result
/// invariant under complement.
WeightMap sobel_contour(const Mask& mask);

/// Normalized 3x3 Gaussian (variance 0.64), row-major, applied in-plane.
std::array<double, 9> boundary_gaussian_kernel();

/// Boundary weight map W: sobel_contour smoothed per axial slice by the 3x3
/// Gaussian kernel.
WeightMap boundary_weight_map(const Mask& mask);

/// Exact Euclidean distance (mm) from every voxel to the nearest
/// morphological_boundary voxel center. Separable lower-envelope transform.
/// Throws std::domain_error for all-foreground or all-background masks.
DistanceMap distance_map(const Mask& mask);

/// Exact Euclidean distance transform to an arbitrary seed set (seed voxels
/// have value 1). Throws std::domain_error when the seed set is empty.
DistanceMap distance_to_seeds(const Mask& seeds);

struct Histogram {
  std::vector<double> edges;  // bins + 1 entries
  std::vector<std::size_t> counts;
  /// Mean of the sampled values (not of the bins).
  double sample_mean = 0.0;

  std::size_t total() const;
};

/// Central-difference gradient magnitude (per mm; one-sided at the volume
/// border) sampled at the morphological boundary of `mask`, binned over
/// [0, max]. A zero maximum puts everything into the first bin of [0, 1].
Histogram boundary_gradient_histogram(const Volume& vol, const Mask& mask, int bins);

/// CSV with columns bin_lower,bin_upper,count.
void write_histogram_csv(const Histogram& h, const std::filesystem::path& path);

}  // namespace bowda
