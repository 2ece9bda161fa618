#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "bowda/image.hpp"

namespace bowda {

/// Raised for unreadable or unsupported MetaImage files. `key()` names the
/// header key that caused the failure (empty for plain I/O errors).
class MetaImageError : public std::runtime_error {
 public:
  MetaImageError(std::string key, const std::string& what)
      : std::runtime_error(key.empty() ? what : "MetaImage key '" + key + "': " + what),
        key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Reads a 3D MetaImage (.mhd + raw, or .mha with LOCAL data). Supported
/// element types: MET_UCHAR, MET_SHORT, MET_USHORT, MET_FLOAT; uncompressed
/// little-endian payload only. Values are widened to float.
Volume read_metaimage(const std::filesystem::path& path);

/// Reads a label volume; any nonzero voxel becomes foreground.
Mask read_mask(const std::filesystem::path& path);

/// Writes `<stem>.mhd` + `<stem>.raw` next to each other (MET_FLOAT).
void write_metaimage(const Volume& vol, const std::filesystem::path& path);
/// Same as above with MET_UCHAR payload.
void write_metaimage(const Mask& mask, const std::filesystem::path& path);

/// Trilinear resampling onto a new grid covering the same physical extent.
/// Output dims are round(extent / target) (at least 1); samples outside the
/// input grid clamp to the nearest edge voxel.
Volume resample_trilinear(const Volume& vol, const Spacing& target);

/// Nearest-neighbor counterpart for labels. A sample that falls exactly between
/// two input voxel centers takes the higher index.
Mask resample_mask_nearest(const Mask& mask, const Spacing& target);

/// Output dims used by both resamplers.
Dims resampled_dims(const Dims& dims, const Spacing& from, const Spacing& to);

/// Zero mean, unit population variance. Reductions run in double precision in
/// increasing voxel order. Throws std::domain_error when the standard deviation
/// is below 1e-12.
Volume znormalize(const Volume& vol);

/// Mean and population standard deviation with the same accumulation as znormalize.
struct MomentStats {
  double mean = 0.0;
  double stddev = 0.0;
};
MomentStats moments(const Volume& vol);

}  // namespace bowda
