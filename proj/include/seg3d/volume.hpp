#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "seg3d/common.hpp"

namespace seg3d {

// Dense 3D scalar grid, x-fastest layout: index = (z*ny + y)*nx + x.
struct Volume {
  Index3 dims{0, 0, 0};
  Spacing spacing;
  std::vector<float> data;

  int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  float& at(int64_t x, int64_t y, int64_t z) { return data[(z * dims[1] + y) * dims[0] + x]; }
  float at(int64_t x, int64_t y, int64_t z) const { return data[(z * dims[1] + y) * dims[0] + x]; }
  void validate() const;  // throws DataError on invariant violation
};

// Label grid; values are class indices, 0 = background.
struct SegmentationMap {
  Index3 dims{0, 0, 0};
  Spacing spacing;
  std::vector<uint8_t> labels;

  int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  uint8_t& at(int64_t x, int64_t y, int64_t z) { return labels[(z * dims[1] + y) * dims[0] + x]; }
  uint8_t at(int64_t x, int64_t y, int64_t z) const { return labels[(z * dims[1] + y) * dims[0] + x]; }
  void validate() const;
};

using VolumeOrLabels = std::variant<Volume, SegmentationMap>;

// SVF container: "SVF1\n" magic, u64le header length, JSON header with exactly
// the keys dims/spacing/dtype/layout, then a little-endian payload.
VolumeOrLabels read_volume(const std::filesystem::path& path);
Volume read_image(const std::filesystem::path& path);
SegmentationMap read_labels(const std::filesystem::path& path);
void write_volume(const Volume& v, const std::filesystem::path& path);
void write_volume(const SegmentationMap& m, const std::filesystem::path& path);

struct DatasetManifest {
  struct Case {
    std::string image;                 // resolved absolute path
    std::optional<std::string> label;  // resolved absolute path, if present
  };
  std::string name;
  std::vector<Case> cases;
};

// Parses manifest.json; image/label paths are resolved relative to its directory.
DatasetManifest load_manifest(const std::filesystem::path& manifest_path);

struct DatasetFingerprint {
  Spacing median_spacing;
  Index3 median_shape{0, 0, 0};  // in median-spacing voxels
  int class_count = 0;
  int case_count = 0;

  void validate() const;
  bool operator==(const DatasetFingerprint&) const = default;
};

DatasetFingerprint compute_fingerprint(const DatasetManifest& manifest);

std::string fingerprint_to_json(const DatasetFingerprint& fp);
DatasetFingerprint fingerprint_from_json(const std::string& text);

}  // namespace seg3d
