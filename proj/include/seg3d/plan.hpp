#pragma once

#include <string>
#include <vector>

#include "seg3d/volume.hpp"

namespace seg3d {

// Per-axis kernel/stride of one level transition: (3,2) downsamples, (1,1) keeps.
struct AxisKS {
  int kernel = 1;
  int stride = 1;
  bool operator==(const AxisKS&) const = default;
};

using Transition = std::array<AxisKS, 3>;

// Everything the architecture and the training/inference geometry need,
// derived from the dataset fingerprint alone.
struct TaskPlan {
  Index3 depths{0, 0, 0};               // downsampling steps per axis, in [0,4]
  int levels = 1;                       // max(depths) + 1
  std::vector<Transition> transitions;  // length max(depths)
  int base_features = 6;
  std::vector<int> channel_widths;      // 6 * 2^l per level
  Index3 train_patch{0, 0, 0};
  Index3 infer_patch_cap{0, 0, 0};      // 512/512/128 mapped to fine/fine/coarse axes
  int head_count = 1;
  Index3 receptive_field{0, 0, 0};      // at the deepest encoder level
  int class_count = 0;
  DatasetFingerprint fingerprint;

  void validate() const;
  bool operator==(const TaskPlan&) const = default;
};

Index3 derive_depths(const DatasetFingerprint& fp);
std::vector<Transition> derive_transitions(const Index3& depths);

// Returns {train_patch, infer_patch_cap}. The 128 caps attach to the axis with
// the coarsest median spacing (ties resolved towards z).
std::pair<Index3, Index3> derive_patch_sizes(const Index3& depths, const Spacing& median_spacing);

// Axis with the largest spacing component; ties pick the later axis.
int coarsest_axis(const Spacing& spacing);

Index3 receptive_field(const TaskPlan& plan);
Index3 receptive_field(const Index3& depths);

TaskPlan make_plan(const DatasetFingerprint& fp);

std::string plan_to_json(const TaskPlan& plan);
TaskPlan plan_from_json(const std::string& text);

}  // namespace seg3d
