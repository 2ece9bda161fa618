#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "bowda/image.hpp"

namespace bowda {

/// Recipe for one synthetic domain. Radii are in-plane voxel counts; the
/// axial semi-axis is scaled by the spacing ratio so objects are round in mm.
struct DomainSpec {
  Dims dims{32, 32, 32};
  Spacing spacing{1.5, 1.0, 1.0};
  int count = 18;
  double radius_min = 7.0;
  double radius_max = 10.0;
  /// Amplitude of the radial cosine mode turning around each axis
  /// (fraction of the radius).
  std::array<double, 3> deformation{0.08, 0.08, 0.08};
  double blur_sigma = 1.5;  // mm
  double noise_sigma = 0.2;
  double foreground_level = 1.0;
  double background_level = 0.4;
  double texture_amplitude = 0.3;
  std::uint64_t seed = 0;

  /// Sharp, clean, anisotropic acquisitions.
  static DomainSpec source_preset();
  /// Blurrier, noisier, lower-contrast acquisitions with stronger texture.
  static DomainSpec target_preset();

  void validate() const;
};

/// Mask foreground fraction range implied by the radius and deformation
/// bounds (lattice-point counting bounds of the inner and outer ellipsoids).
std::pair<double, double> foreground_fraction_bounds(const DomainSpec& spec);

struct Phantom {
  Volume image;
  Mask label;
};

/// Deterministic in (spec.seed, index).
Phantom gen_phantom(const DomainSpec& spec, int index);

struct DatasetCase {
  std::string id;
  std::filesystem::path image;
  std::filesystem::path label;
  std::string split;  // train or val
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::string spec_digest;
  double val_fraction = 0.0;
  std::vector<DatasetCase> cases;

  std::vector<DatasetCase> split(const std::string& name) const;
};

/// Writes `count` MetaImage pairs plus manifest.json into `dir`. The last
/// round(count * val_fraction) cases form the validation split.
DatasetManifest gen_dataset(const DomainSpec& spec, int count, const std::filesystem::path& dir,
                            double val_fraction = 0.0);

DatasetManifest read_manifest(const std::filesystem::path& path);

}  // namespace bowda
