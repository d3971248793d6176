#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "doctest.h"
#include "seg3d/engine.hpp"
#include "test_util.hpp"

using namespace seg3d;
using namespace testutil;

namespace {

// Dataset of small labelled volumes plus its manifest and derived plan.
struct TinyTask {
  TempDir dir{"seg3d-engine"};
  DatasetManifest manifest;
  TaskPlan plan;

  explicit TinyTask(int cases = 4, Index3 dims = {8, 8, 8}, uint64_t seed = 1000) {
    std::vector<Volume> images;
    std::vector<SegmentationMap> labels(static_cast<size_t>(cases));
    std::vector<const SegmentationMap*> label_ptrs;
    for (int i = 0; i < cases; ++i) {
      images.push_back(random_volume(dims, Spacing{}, seed_combine(seed, uint64_t(2 * i))));
      labels[size_t(i)] = random_labels(dims, Spacing{}, 2, seed_combine(seed, uint64_t(2 * i + 1)));
      label_ptrs.push_back(&labels[size_t(i)]);
    }
    write_dataset(dir.path, "tiny", images, label_ptrs);
    manifest = load_manifest(dir.path / "manifest.json");
    plan = make_plan(compute_fingerprint(manifest));
  }
};

void expect_ckpt_equal(const Checkpoint& a, const Checkpoint& b) {
  CHECK(a.version == b.version);
  CHECK(a.plan == b.plan);
  CHECK(a.step == b.step);
  CHECK(a.seed == b.seed);
  CHECK(a.augmentation.transform_probability == b.augmentation.transform_probability);
  CHECK(a.augmentation.noise_sigma_max == b.augmentation.noise_sigma_max);
  REQUIRE(a.params.size() == b.params.size());
  for (size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params[i].name == b.params[i].name);
    CHECK(a.params[i].shape == b.params[i].shape);
    CHECK(a.params[i].steps == b.params[i].steps);
    CHECK(a.params[i].values == b.params[i].values);
    CHECK(a.params[i].moment1 == b.params[i].moment1);
    CHECK(a.params[i].moment2 == b.params[i].moment2);
  }
}

TrainConfig quick_config(int64_t iters, int64_t batch, uint64_t seed) {
  TrainConfig cfg;
  cfg.iterations = iters;
  cfg.batch_size = batch;
  cfg.seed = seed;
  cfg.log_every = 1;
  return cfg;
}

}  // namespace

TEST_CASE("train config validation") {
  CHECK_THROWS_AS(quick_config(0, 2, 1).validate(), RunError);
  CHECK_THROWS_AS(quick_config(5, 0, 1).validate(), RunError);
  TrainConfig bad = quick_config(5, 2, 1);
  bad.log_every = 0;
  CHECK_THROWS_AS(bad.validate(), RunError);
  quick_config(5, 2, 1).validate();
}

TEST_CASE("training logs JSON lines and reproduces bit-identically per seed") {
  TinyTask task;
  REQUIRE(task.plan.depths == Index3{1, 1, 1});
  std::ostringstream log1, log2;
  const Checkpoint a = train(task.manifest, task.plan, quick_config(4, 2, 123), &log1);
  const Checkpoint b = train(task.manifest, task.plan, quick_config(4, 2, 123), &log2);
  expect_ckpt_equal(a, b);
  CHECK(a.step == 4);
  CHECK(a.seed == 123);

  std::istringstream lines(log1.str());
  std::string line;
  int n = 0;
  bool saw_start = false;
  while (std::getline(lines, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    if (n == 0) {
      saw_start = true;
      CHECK(j.at("event") == "start");
      CHECK(j.at("iterations") == 4);
      CHECK(j.at("batch_size") == 2);
      CHECK(j.at("seed") == 123);
      CHECK(j.contains("augmentation"));
    } else {
      CHECK(j.at("step").get<int64_t>() == n);
      CHECK(j.at("lr").get<double>() == 0.0005);
      CHECK(std::isfinite(j.at("loss").get<double>()));
      CHECK(j.contains("patches_per_sec"));
    }
    ++n;
  }
  CHECK(saw_start);
  CHECK(n == 5);  // start line plus one line per step at log_every 1

  const Checkpoint c = train(task.manifest, task.plan, quick_config(4, 2, 124), nullptr);
  bool differs = false;
  for (size_t i = 0; i < a.params.size(); ++i)
    differs = differs || a.params[i].values != c.params[i].values;
  CHECK(differs);
}

TEST_CASE("training updates move the loss downward on average") {
  TinyTask task;
  std::ostringstream log;
  train(task.manifest, task.plan, quick_config(12, 2, 5), &log);
  std::istringstream lines(log.str());
  std::string line;
  std::vector<double> losses;
  while (std::getline(lines, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    if (j.contains("loss")) losses.push_back(j.at("loss").get<double>());
  }
  REQUIRE(losses.size() == 12);
  double early = 0.0, late = 0.0;
  for (int i = 0; i < 4; ++i) {
    early += losses[size_t(i)];
    late += losses[losses.size() - 1 - size_t(i)];
  }
  CHECK(late < early);  // random labels still reward shrinking the loss surface
}

TEST_CASE("checkpoints round-trip bit-exactly through the container format") {
  TinyTask task;
  const Checkpoint ck = train(task.manifest, task.plan, quick_config(3, 2, 7), nullptr);
  TempDir tmp("seg3d-ckpt");
  const std::string path = (tmp.path / "model.ck").string();
  save_checkpoint(ck, path);
  const Checkpoint back = load_checkpoint(path);
  expect_ckpt_equal(ck, back);
  // moments are genuinely populated after optimizer steps
  bool any_moment = false;
  for (const auto& p : back.params)
    for (float m : p.moment1) any_moment = any_moment || m != 0.f;
  CHECK(any_moment);
  // same checkpoint saved twice gives identical bytes
  const std::string path2 = (tmp.path / "model2.ck").string();
  save_checkpoint(back, path2);
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("checkpoint loading rejects damaged files") {
  TinyTask task;
  const Checkpoint ck = train(task.manifest, task.plan, quick_config(2, 1, 9), nullptr);
  TempDir tmp("seg3d-ckpt-bad");
  const std::string good = (tmp.path / "good.ck").string();
  save_checkpoint(ck, good);
  const std::string bytes = slurp(good);

  const auto rewrite = [&](const std::string& name, const std::string& content) {
    const std::string p = (tmp.path / name).string();
    std::ofstream out(p, std::ios::binary);
    out.write(content.data(), std::streamsize(content.size()));
    return p;
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(load_checkpoint(rewrite("magic.ck", bad_magic)), DataError);
  CHECK_THROWS_AS(load_checkpoint(rewrite("trunc.ck", bytes.substr(0, bytes.size() / 2))),
                  DataError);
  CHECK_THROWS_AS(load_checkpoint(rewrite("tiny.ck", bytes.substr(0, 7))), DataError);
  CHECK_THROWS_AS(load_checkpoint((tmp.path / "missing.ck").string()), DataError);
  CHECK_THROWS_AS(save_checkpoint(ck, "/nonexistent-dir-seg3d/x.ck"), RunError);
}

TEST_CASE("resumed training equals the uninterrupted run bit-exactly") {
  TinyTask task;
  const Checkpoint full = train(task.manifest, task.plan, quick_config(6, 2, 31), nullptr);
  const Checkpoint half = train(task.manifest, task.plan, quick_config(3, 2, 31), nullptr);
  CHECK(half.step == 3);
  const Checkpoint resumed = train_from(half, task.manifest, quick_config(6, 2, 31), nullptr);
  expect_ckpt_equal(full, resumed);

  TempDir tmp("seg3d-resume");
  save_checkpoint(full, (tmp.path / "full.ck").string());
  save_checkpoint(resumed, (tmp.path / "resumed.ck").string());
  CHECK(slurp((tmp.path / "full.ck").string()) == slurp((tmp.path / "resumed.ck").string()));

  // a checkpoint past the requested horizon is a usage error
  CHECK_THROWS_AS(train_from(full, task.manifest, quick_config(3, 2, 31), nullptr), RunError);
}

TEST_CASE("training refuses a dataset that no longer matches the plan") {
  TinyTask small;
  TinyTask large(4, {10, 10, 10}, 2000);
  CHECK_THROWS_AS(train(small.manifest, large.plan, quick_config(2, 1, 1), nullptr), DataError);
  const Checkpoint ck = train(small.manifest, small.plan, quick_config(2, 1, 1), nullptr);
  CHECK_THROWS_AS(train_from(ck, large.manifest, quick_config(4, 1, 1), nullptr), DataError);
}

TEST_CASE("prediction returns the exact input geometry") {
  TinyTask task;
  const Checkpoint ck = train(task.manifest, task.plan, quick_config(2, 1, 11), nullptr);
  for (uint64_t s = 0; s < 3; ++s) {
    Rng r(seed_combine(600, s));
    const Index3 dims{3 + r.below(12), 3 + r.below(12), 3 + r.below(12)};
    Spacing sp;
    for (int a = 0; a < 3; ++a) sp[a] = r.uniform(0.6, 2.4);
    const Volume v = random_volume(dims, sp, seed_combine(601, s));
    const SegmentationMap seg = predict(ck, v);
    CHECK(seg.dims == dims);
    CHECK(seg.spacing == sp);
    for (uint8_t l : seg.labels) CHECK(l < 2);
    const SegmentationMap again = predict(ck, v);
    CHECK(again.labels == seg.labels);
  }
}

TEST_CASE("dice identities") {
  const Index3 dims{4, 4, 4};
  SegmentationMap a = random_labels(dims, Spacing{}, 3, 71);
  const DiceReport self = dice_scores(a, a);
  REQUIRE(self.per_class.size() == 2);
  CHECK(self.per_class[0] == 1.0);
  CHECK(self.per_class[1] == 1.0);
  CHECK(self.mean_foreground == 1.0);

  SegmentationMap ones = a, twos = a;
  ones.labels.assign(64, 1);
  twos.labels.assign(64, 2);
  const DiceReport disjoint = dice_scores(ones, twos);
  CHECK(disjoint.per_class[0] == 0.0);
  CHECK(disjoint.per_class[1] == 0.0);
  CHECK(disjoint.mean_foreground == 0.0);

  // sixteen predicted, sixteen reference, eight shared -> dice 1/2
  SegmentationMap p = a, q = a;
  p.labels.assign(64, 0);
  q.labels.assign(64, 0);
  for (size_t i = 0; i < 16; ++i) p.labels[i] = 1;
  for (size_t i = 8; i < 24; ++i) q.labels[i] = 1;
  const DiceReport half = dice_scores(p, q);
  CHECK(half.per_class[0] == 0.5);

  // class 1 absent from both counts as a perfect match
  SegmentationMap e1 = a, e2 = a;
  e1.labels.assign(64, 0);
  e2.labels.assign(64, 0);
  e1.labels[0] = 2;
  e2.labels[0] = 2;
  const DiceReport empty = dice_scores(e1, e2);
  REQUIRE(empty.per_class.size() == 2);
  CHECK(empty.per_class[0] == 1.0);
  CHECK(empty.per_class[1] == 1.0);

  SegmentationMap other = random_labels({5, 4, 4}, Spacing{}, 3, 72);
  CHECK_THROWS_AS(dice_scores(a, other), DataError);
}
