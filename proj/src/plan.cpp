#include "seg3d/plan.hpp"

#include <algorithm>
#include <cassert>

#include <json.hpp>

namespace seg3d {

void TaskPlan::validate() const {
  fingerprint.validate();
  int max_depth = 0;
  for (int i = 0; i < 3; ++i) {
    if (depths[i] < 0 || depths[i] > 4) throw DataError("plan: depths out of [0,4]");
    max_depth = std::max<int>(max_depth, static_cast<int>(depths[i]));
  }
  if (levels != max_depth + 1) throw DataError("plan: levels != max(depths)+1");
  if (static_cast<int>(transitions.size()) != max_depth) throw DataError("plan: wrong transition count");
  if (base_features != 6) throw DataError("plan: base_features must be 6");
  if (static_cast<int>(channel_widths.size()) != levels) throw DataError("plan: wrong channel_widths length");
  for (int l = 0; l < levels; ++l)
    if (channel_widths[l] != 6 * (1 << l)) throw DataError("plan: channel_widths must double from 6");
  if (head_count != std::max(max_depth - 1, 1)) throw DataError("plan: head_count mismatch");
  if (class_count < 2) throw DataError("plan: class_count must be >= 2");
  for (int l = 0; l < max_depth; ++l)
    for (int i = 0; i < 3; ++i) {
      const AxisKS expected = l < depths[i] ? AxisKS{3, 2} : AxisKS{1, 1};
      if (!(transitions[l][i] == expected)) throw DataError("plan: transition schedule inconsistent with depths");
    }
}

Index3 derive_depths(const DatasetFingerprint& fp) {
  Index3 d;
  for (int i = 0; i < 3; ++i) d[i] = std::min<int64_t>(fp.median_shape[i] / 8, 4);
  return d;
}

std::vector<Transition> derive_transitions(const Index3& depths) {
  const int max_depth = static_cast<int>(std::max({depths[0], depths[1], depths[2]}));
  std::vector<Transition> ts(max_depth);
  for (int l = 0; l < max_depth; ++l)
    for (int i = 0; i < 3; ++i) ts[l][i] = l < depths[i] ? AxisKS{3, 2} : AxisKS{1, 1};
  return ts;
}

int coarsest_axis(const Spacing& spacing) {
  int coarse = 0;
  for (int i = 1; i < 3; ++i)
    if (spacing[i] >= spacing[coarse]) coarse = i;
  return coarse;
}

std::pair<Index3, Index3> derive_patch_sizes(const Index3& depths, const Spacing& median_spacing) {
  const int coarse = coarsest_axis(median_spacing);
  Index3 train, cap;
  for (int i = 0; i < 3; ++i) {
    const int64_t grown = int64_t{1} << (3 + depths[i]);
    const int64_t clip = i == coarse ? 128 : 256;
    // depths <= 4 keeps 2^(3+d) <= 128, so the 256 clip can never bind
    assert(grown <= 128);
    train[i] = std::min(grown, clip);
    cap[i] = i == coarse ? 128 : 512;
  }
  return {train, cap};
}

Index3 receptive_field(const Index3& depths) {
  // stem 3^3, then per level a residual block of two 3^3 convs, with the
  // per-axis transition conv between levels; r <- r + (k-1)*j, j <- j*s
  const std::vector<Transition> transitions = derive_transitions(depths);
  const int64_t max_depth = *std::max_element(depths.begin(), depths.end());
  Index3 rf;
  for (int axis = 0; axis < 3; ++axis) {
    int64_t r = 1, j = 1;
    auto apply = [&](int k, int s) {
      r += static_cast<int64_t>(k - 1) * j;
      j *= s;
    };
    apply(3, 1);  // stem
    for (int64_t level = 0; level <= max_depth; ++level) {
      apply(3, 1);  // block conv 1
      apply(3, 1);  // block conv 2
      if (level < max_depth) {
        const AxisKS& t = transitions[level][axis];
        apply(t.kernel, t.stride);
      }
    }
    rf[axis] = r;
  }
  return rf;
}

Index3 receptive_field(const TaskPlan& plan) { return receptive_field(plan.depths); }

TaskPlan make_plan(const DatasetFingerprint& fp) {
  fp.validate();
  TaskPlan plan;
  plan.fingerprint = fp;
  plan.depths = derive_depths(fp);
  const int max_depth = static_cast<int>(std::max({plan.depths[0], plan.depths[1], plan.depths[2]}));
  plan.levels = max_depth + 1;
  plan.transitions = derive_transitions(plan.depths);
  plan.base_features = 6;
  plan.channel_widths.clear();
  for (int l = 0; l < plan.levels; ++l) plan.channel_widths.push_back(6 * (1 << l));
  auto [train, cap] = derive_patch_sizes(plan.depths, fp.median_spacing);
  plan.train_patch = train;
  plan.infer_patch_cap = cap;
  plan.head_count = std::max(max_depth - 1, 1);
  plan.class_count = fp.class_count;
  plan.receptive_field = receptive_field(plan);
  plan.validate();
  return plan;
}

std::string plan_to_json(const TaskPlan& plan) {
  nlohmann::ordered_json j;
  j["depths"] = {plan.depths[0], plan.depths[1], plan.depths[2]};
  j["levels"] = plan.levels;
  auto ts = nlohmann::ordered_json::array();
  for (const auto& t : plan.transitions) {
    auto row = nlohmann::ordered_json::array();
    for (int i = 0; i < 3; ++i) row.push_back({t[i].kernel, t[i].stride});
    ts.push_back(row);
  }
  j["transitions"] = ts;
  j["base_features"] = plan.base_features;
  j["channel_widths"] = plan.channel_widths;
  j["train_patch"] = {plan.train_patch[0], plan.train_patch[1], plan.train_patch[2]};
  j["infer_patch_cap"] = {plan.infer_patch_cap[0], plan.infer_patch_cap[1], plan.infer_patch_cap[2]};
  j["head_count"] = plan.head_count;
  j["receptive_field"] = {plan.receptive_field[0], plan.receptive_field[1], plan.receptive_field[2]};
  j["class_count"] = plan.class_count;
  j["fingerprint"] = nlohmann::ordered_json::parse(fingerprint_to_json(plan.fingerprint));
  return j.dump(2) + "\n";
}

TaskPlan plan_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid plan JSON: ") + e.what());
  }
  TaskPlan plan;
  try {
    for (int i = 0; i < 3; ++i) {
      plan.depths[i] = j.at("depths").at(i).get<int64_t>();
      plan.train_patch[i] = j.at("train_patch").at(i).get<int64_t>();
      plan.infer_patch_cap[i] = j.at("infer_patch_cap").at(i).get<int64_t>();
      plan.receptive_field[i] = j.at("receptive_field").at(i).get<int64_t>();
    }
    plan.levels = j.at("levels").get<int>();
    plan.transitions.clear();
    for (const auto& row : j.at("transitions")) {
      Transition t;
      for (int i = 0; i < 3; ++i) t[i] = AxisKS{row.at(i).at(0).get<int>(), row.at(i).at(1).get<int>()};
      plan.transitions.push_back(t);
    }
    plan.base_features = j.at("base_features").get<int>();
    plan.channel_widths = j.at("channel_widths").get<std::vector<int>>();
    plan.head_count = j.at("head_count").get<int>();
    plan.class_count = j.at("class_count").get<int>();
    plan.fingerprint = fingerprint_from_json(j.at("fingerprint").dump());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid plan JSON: ") + e.what());
  }
  plan.validate();
  return plan;
}

}  // namespace seg3d
