#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>
#include "seg3d/volume.hpp"

namespace seg3d {

// Index into [0, n) by mirroring across the boundaries without repeating the
// edge sample, for any (possibly far out-of-range) i.
int64_t reflect_index(int64_t i, int64_t n);

// Trilinear (images) / nearest-neighbour (labels) resampling onto a target
// grid. The voxel-centre mapping keeps identity resamples bit-exact and
// preserves constants. The dims overloads force the output grid shape, used
// to restore an exact original geometry.
Volume resample(const Volume& v, const Spacing& target);
Volume resample(const Volume& v, const Spacing& target, const Index3& out_dims);
SegmentationMap resample(const SegmentationMap& m, const Spacing& target);
SegmentationMap resample(const SegmentationMap& m, const Spacing& target, const Index3& out_dims);

Index3 resampled_dims(const Index3& dims, const Spacing& source, const Spacing& target);

// Zero-mean, unit-variance intensity rescale with a variance floor of 1e-8.
Volume normalize(const Volume& v);

struct PatchPair {
  Index3 dims{};
  std::vector<float> image;
  std::vector<uint8_t> labels;
  int case_id = -1;
  Index3 origin{};
  uint64_t seed = 0;
};

// Cut an aligned image/label patch at a seed-determined origin. Axes shorter
// than the patch are centred and mirror-padded.
PatchPair sample_patch(const Volume& image, const SegmentationMap& labels, const Index3& patch_dims,
                       uint64_t rng_seed);

struct AugmentationConfig {
  double transform_probability = 0.15;
  double noise_sigma_min = 0.0;
  double noise_sigma_max = 0.1;
  double rotation_max_deg = 15.0;
  double scale_min = 0.85;
  double scale_max = 1.15;
  int64_t elastic_grid_points = 8;
  double elastic_sigma_mm = 12.0;
  double elastic_magnitude_min_mm = 0.0;
  double elastic_magnitude_max_mm = 6.0;
};

nlohmann::ordered_json augmentation_to_json(const AugmentationConfig& cfg);
AugmentationConfig augmentation_from_json(const nlohmann::json& j);

// Smooth random displacement field over the patch, stored per axis in voxel
// units of that axis. Built on a coarse grid in physical space and smoothed
// with a millimetre-sized kernel, so its statistics are isotropic in world
// coordinates regardless of voxel anisotropy.
struct DeformationField {
  Index3 dims{};
  std::vector<float> dx, dy, dz;  // voxel-unit displacement per axis
};

DeformationField make_elastic_field(const Index3& patch_dims, const Spacing& spacing,
                                    const AugmentationConfig& cfg, uint64_t rng_seed);

// Randomized rotation / scaling / elastic deformation (one interpolation
// pass) followed by additive Gaussian noise, each applied with the
// configured probability. Fully determined by the seed.
PatchPair augment(const PatchPair& patch, const Spacing& spacing, const AugmentationConfig& cfg,
                  uint64_t rng_seed);

}  // namespace seg3d
