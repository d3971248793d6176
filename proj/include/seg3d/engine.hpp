#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "seg3d/datapipe.hpp"
#include "seg3d/network.hpp"
#include "seg3d/plan.hpp"
#include "seg3d/volume.hpp"

namespace seg3d {

struct TrainConfig {
  int64_t iterations = 30000;
  int64_t batch_size = 4;
  uint64_t seed = 0;
  int64_t log_every = 10;
  AugmentationConfig augmentation;

  void validate() const;
};

struct ParamState {
  std::string name;
  Shape shape;
  std::vector<float> values, moment1, moment2;
  int64_t steps = 0;
};

struct Checkpoint {
  int64_t version = 1;
  TaskPlan plan;
  int64_t step = 0;
  uint64_t seed = 0;
  AugmentationConfig augmentation;
  std::vector<ParamState> params;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Fresh training run; throws DataError if the dataset no longer matches the
// plan's fingerprint. Emits one JSON object per line to `log`.
Checkpoint train(const DatasetManifest& data, const TaskPlan& plan, const TrainConfig& cfg,
                 std::ostream* log);

// Continue a run up to cfg.iterations total steps. The checkpoint's seed
// carries the patch stream, so with the original batch size the result is
// identical to an uninterrupted run.
Checkpoint train_from(const Checkpoint& start, const DatasetManifest& data, const TrainConfig& cfg,
                      std::ostream* log);

// Full-volume inference: resample to the plan's working spacing, tile,
// aggregate head-0 probabilities, argmax, and return labels on the exact
// input grid.
SegmentationMap predict(const Checkpoint& ckpt, const Volume& image);

struct DiceReport {
  std::vector<double> per_class;  // index 0 is class 1
  double mean_foreground = 0.0;
};

// Overlap scores per non-background class; empty-vs-empty counts as 1.
DiceReport dice_scores(const SegmentationMap& prediction, const SegmentationMap& reference);

}  // namespace seg3d
