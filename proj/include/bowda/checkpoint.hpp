#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "bowda/config.hpp"
#include "bowda/networks.hpp"

namespace bowda {

/// Binary container: magic "BWDACKPT", uint32 version, config digest, then
/// named float32 blobs in insertion order, then a JSON metadata document.
/// All integers and reals are little-endian.
struct CheckpointBlob {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string digest;
  std::vector<CheckpointBlob> blobs;
  Json metadata = Json::object();

  const CheckpointBlob* find(const std::string& name) const;

  /// Appends every entry of `store` (values only) as prefix + name.
  void add_store(const std::string& prefix, const ParamStore<float>& store);
  /// Copies blobs prefix + name into `store`; every entry must be present
  /// with a matching shape.
  void load_store(const std::string& prefix, ParamStore<float>& store) const;
  bool has_prefix(const std::string& prefix) const;
};

/// Written to a temporary sibling and renamed into place.
void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace bowda
