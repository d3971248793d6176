#include "seg3d/engine.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <json.hpp>
#include "seg3d/optim.hpp"

namespace seg3d {

namespace {

constexpr char kCkptMagic[] = "SCK1\n";

// Activation buffers run tens of megabytes; stop glibc from returning them to
// the kernel on every free so they get reused instead of re-faulted.
void retain_large_allocations() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

struct PreparedCase {
  Volume image;
  SegmentationMap labels;
};

std::vector<PreparedCase> prepare_cases(const DatasetManifest& data, const TaskPlan& plan) {
  std::vector<PreparedCase> out;
  out.reserve(data.cases.size());
  for (const auto& c : data.cases) {
    if (!c.label) throw DataError("training case '" + c.image + "' has no label map");
    PreparedCase pc;
    pc.image = normalize(resample(read_image(c.image), plan.fingerprint.median_spacing));
    pc.labels = resample(read_labels(*c.label), plan.fingerprint.median_spacing);
    if (pc.image.dims != pc.labels.dims)
      throw DataError("image and label grids differ for case '" + c.image + "'");
    out.push_back(std::move(pc));
  }
  return out;
}

Checkpoint snapshot(Network<float>& net, int64_t step, uint64_t seed,
                    const AugmentationConfig& aug) {
  Checkpoint c;
  c.plan = net.plan();
  c.step = step;
  c.seed = seed;
  c.augmentation = aug;
  for (auto& p : net.parameters()) {
    ParamState s;
    s.name = p.name;
    s.shape = p.tensor.shape();
    s.values = p.tensor.value();
    const size_t n = size_t(p.tensor.numel());
    s.moment1 = p.m.empty() ? std::vector<float>(n, 0.f) : p.m;
    s.moment2 = p.v.empty() ? std::vector<float>(n, 0.f) : p.v;
    s.steps = p.steps;
    c.params.push_back(std::move(s));
  }
  return c;
}

void load_into(Network<float>& net, const Checkpoint& c) {
  auto& params = net.parameters();
  if (params.size() != c.params.size())
    throw DataError("checkpoint holds " + std::to_string(c.params.size()) +
                    " parameters, architecture needs " + std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const ParamState& s = c.params[i];
    Parameter<float>& p = params[i];
    if (s.name != p.name)
      throw DataError("checkpoint parameter '" + s.name + "' does not match expected '" + p.name + "'");
    if (s.shape != p.tensor.shape())
      throw DataError("checkpoint parameter '" + s.name + "' has shape " + shape_str(s.shape) +
                      ", expected " + shape_str(p.tensor.shape()));
    p.tensor.value() = s.values;
    p.m = s.moment1;
    p.v = s.moment2;
    p.steps = s.steps;
  }
}

Checkpoint run_training(Network<float>& net, const std::vector<PreparedCase>& cases,
                        const TrainConfig& cfg, uint64_t run_seed, int64_t start_step,
                        std::ostream* log) {
  retain_large_allocations();
  const TaskPlan& plan = net.plan();
  const LrSchedule sched;
  if (log) {
    nlohmann::ordered_json j;
    j["event"] = "start";
    j["iterations"] = cfg.iterations;
    j["batch_size"] = cfg.batch_size;
    j["seed"] = run_seed;
    j["start_step"] = start_step;
    j["augmentation"] = augmentation_to_json(cfg.augmentation);
    (*log) << j.dump() << "\n" << std::flush;
  }
  for (int64_t step = start_step; step < cfg.iterations; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    net.zero_grads();
    double loss_sum = 0.0;
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      const uint64_t patch_seed = seed_combine(seed_combine(run_seed, uint64_t(step)), uint64_t(b));
      Rng pr(patch_seed);
      const size_t case_id = size_t(pr.below(cases.size()));
      const uint64_t sample_seed = pr.raw();
      const uint64_t aug_seed = pr.raw();
      const PreparedCase& pc = cases[case_id];
      PatchPair patch = sample_patch(pc.image, pc.labels, plan.train_patch, sample_seed);
      patch.case_id = int(case_id);
      patch = augment(patch, plan.fingerprint.median_spacing, cfg.augmentation, aug_seed);
      Tensor<float> x = Tensor<float>::from({1, 1, patch.dims[0], patch.dims[1], patch.dims[2]},
                                            std::move(patch.image));
      // One graph per sample: gradients accumulate across the batch, scaled
      // to the batch mean. Valid because every layer normalizes per sample.
      Tensor<float> loss = supervised_loss(net.forward(x), patch.labels, patch.dims, plan);
      loss_sum += double(loss.value()[0]);
      backward(scale(loss, 1.0 / double(cfg.batch_size)));
    }
    const double mean_loss = loss_sum / double(cfg.batch_size);
    if (!std::isfinite(mean_loss))
      throw RunError("loss became non-finite at step " + std::to_string(step + 1));
    adam_step(net.parameters(), sched, step);
    const auto t1 = std::chrono::steady_clock::now();
    if (log && ((step + 1 - start_step) % cfg.log_every == 0 || step + 1 == cfg.iterations ||
                step == start_step)) {
      const double dt = std::chrono::duration<double>(t1 - t0).count();
      nlohmann::ordered_json j;
      j["step"] = step + 1;
      j["lr"] = sched.lr(step);
      j["loss"] = mean_loss;
      j["patches_per_sec"] = dt > 0 ? double(cfg.batch_size) / dt : 0.0;
      (*log) << j.dump() << "\n" << std::flush;
    }
  }
  return snapshot(net, cfg.iterations, run_seed, cfg.augmentation);
}

}  // namespace

void TrainConfig::validate() const {
  if (iterations < 1) throw RunError("iterations must be at least 1");
  if (batch_size < 1) throw RunError("batch size must be at least 1");
  if (log_every < 1) throw RunError("log interval must be at least 1");
}

Checkpoint train(const DatasetManifest& data, const TaskPlan& plan, const TrainConfig& cfg,
                 std::ostream* log) {
  cfg.validate();
  plan.validate();
  const DatasetFingerprint fp = compute_fingerprint(data);
  if (!(fp == plan.fingerprint))
    throw DataError("dataset does not match the fingerprint the plan was derived from");
  const auto cases = prepare_cases(data, plan);
  Network<float> net(plan, cfg.seed);
  return run_training(net, cases, cfg, cfg.seed, 0, log);
}

Checkpoint train_from(const Checkpoint& start, const DatasetManifest& data, const TrainConfig& cfg,
                      std::ostream* log) {
  cfg.validate();
  start.plan.validate();
  if (start.step > cfg.iterations)
    throw RunError("checkpoint is already past the requested iteration count");
  const DatasetFingerprint fp = compute_fingerprint(data);
  if (!(fp == start.plan.fingerprint))
    throw DataError("dataset does not match the fingerprint the plan was derived from");
  const auto cases = prepare_cases(data, start.plan);
  Network<float> net(start.plan, start.seed);
  load_into(net, start);
  return run_training(net, cases, cfg, start.seed, start.step, log);
}

SegmentationMap predict(const Checkpoint& ckpt, const Volume& image) {
  retain_large_allocations();
  ckpt.plan.validate();
  image.validate();
  const TaskPlan& plan = ckpt.plan;
  Network<float> net(plan, 0);
  load_into(net, ckpt);
  net.set_requires_grad(false);

  const Volume work = normalize(resample(image, plan.fingerprint.median_spacing));
  Index3 patch{}, padded{};
  std::array<std::vector<int64_t>, 3> offsets;
  for (int a = 0; a < 3; ++a) {
    const int64_t mult = int64_t(1) << plan.depths[a];
    const int64_t grown = (work.dims[a] + mult - 1) / mult * mult;
    patch[a] = std::min(grown, plan.infer_patch_cap[a]);
    padded[a] = std::max(work.dims[a], patch[a]);
    for (int64_t o = 0; o + patch[a] <= padded[a]; o += patch[a]) offsets[a].push_back(o);
    if (offsets[a].back() + patch[a] < padded[a]) offsets[a].push_back(padded[a] - patch[a]);
  }

  // Mirror-pad the working volume once, then cut aligned tiles from it.
  std::vector<float> pad(size_t(padded[0] * padded[1] * padded[2]));
  {
    std::array<std::vector<int64_t>, 3> map;
    for (int a = 0; a < 3; ++a) {
      map[a].resize(padded[a]);
      const int64_t lo = -(padded[a] - work.dims[a]) / 2;
      for (int64_t k = 0; k < padded[a]; ++k) map[a][k] = reflect_index(lo + k, work.dims[a]);
    }
    parallel_for(padded[2], [&](int64_t z) {
      for (int64_t y = 0; y < padded[1]; ++y) {
        const int64_t rbase = (map[2][z] * work.dims[1] + map[1][y]) * work.dims[0];
        float* orow = pad.data() + (z * padded[1] + y) * padded[0];
        for (int64_t x = 0; x < padded[0]; ++x) orow[x] = work.data[rbase + map[0][x]];
      }
    });
  }

  const int64_t C = plan.class_count;
  std::vector<float> votes(size_t(C) * size_t(padded[0] * padded[1] * padded[2]), 0.f);
  const int64_t PS = padded[0] * padded[1] * padded[2];
  for (int64_t oz : offsets[2])
    for (int64_t oy : offsets[1])
      for (int64_t ox : offsets[0]) {
        Tensor<float> x = Tensor<float>::zeros({1, 1, patch[0], patch[1], patch[2]});
        float* xv = x.data();
        for (int64_t z = 0; z < patch[2]; ++z)
          for (int64_t y = 0; y < patch[1]; ++y) {
            const float* src = pad.data() + ((oz + z) * padded[1] + (oy + y)) * padded[0] + ox;
            std::copy(src, src + patch[0], xv + (z * patch[1] + y) * patch[0]);
          }
        Tensor<float> probs = softmax_channels(net.forward(x)[0]);
        const float* pv = probs.data();
        const int64_t TS = patch[0] * patch[1] * patch[2];
        for (int64_t c = 0; c < C; ++c)
          for (int64_t z = 0; z < patch[2]; ++z)
            for (int64_t y = 0; y < patch[1]; ++y) {
              const float* src = pv + c * TS + (z * patch[1] + y) * patch[0];
              float* dst = votes.data() + c * PS + ((oz + z) * padded[1] + (oy + y)) * padded[0] + ox;
              for (int64_t k = 0; k < patch[0]; ++k) dst[k] += src[k];
            }
      }

  SegmentationMap work_seg;
  work_seg.dims = work.dims;
  work_seg.spacing = work.spacing;
  work_seg.labels.resize(size_t(work.voxel_count()));
  const int64_t crop_lo_x = (padded[0] - work.dims[0]) / 2;
  const int64_t crop_lo_y = (padded[1] - work.dims[1]) / 2;
  const int64_t crop_lo_z = (padded[2] - work.dims[2]) / 2;
  parallel_for(work.dims[2], [&](int64_t z) {
    for (int64_t y = 0; y < work.dims[1]; ++y)
      for (int64_t x = 0; x < work.dims[0]; ++x) {
        const int64_t pi = ((z + crop_lo_z) * padded[1] + (y + crop_lo_y)) * padded[0] + x + crop_lo_x;
        int best = 0;
        float bv = votes[pi];
        for (int64_t c = 1; c < C; ++c) {
          const float v = votes[size_t(c) * PS + pi];
          if (v > bv) {
            bv = v;
            best = int(c);
          }
        }
        work_seg.labels[(z * work.dims[1] + y) * work.dims[0] + x] = uint8_t(best);
      }
  });
  return resample(work_seg, image.spacing, image.dims);
}

DiceReport dice_scores(const SegmentationMap& prediction, const SegmentationMap& reference) {
  prediction.validate();
  reference.validate();
  if (prediction.dims != reference.dims)
    throw DataError("prediction and reference grids differ");
  int64_t C = 2;
  for (uint8_t v : prediction.labels) C = std::max<int64_t>(C, int64_t(v) + 1);
  for (uint8_t v : reference.labels) C = std::max<int64_t>(C, int64_t(v) + 1);
  std::vector<int64_t> inter(C, 0), np(C, 0), nr(C, 0);
  for (size_t i = 0; i < prediction.labels.size(); ++i) {
    const uint8_t p = prediction.labels[i];
    const uint8_t r = reference.labels[i];
    ++np[p];
    ++nr[r];
    if (p == r) ++inter[p];
  }
  DiceReport rep;
  double sum = 0.0;
  for (int64_t c = 1; c < C; ++c) {
    const int64_t denom = np[c] + nr[c];
    const double d = denom == 0 ? 1.0 : 2.0 * double(inter[c]) / double(denom);
    rep.per_class.push_back(d);
    sum += d;
  }
  rep.mean_foreground = sum / double(C - 1);
  return rep;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  nlohmann::ordered_json j;
  j["version"] = c.version;
  j["plan"] = nlohmann::ordered_json::parse(plan_to_json(c.plan));
  j["step"] = c.step;
  j["seed"] = c.seed;
  j["augmentation"] = augmentation_to_json(c.augmentation);
  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  uint64_t offset = 0;
  for (const auto& p : c.params) {
    const uint64_t bytes = uint64_t(p.values.size()) * sizeof(float);
    nlohmann::ordered_json e;
    e["name"] = p.name;
    e["shape"] = p.shape;
    e["values_offset"] = offset;
    e["moment1_offset"] = offset + bytes;
    e["moment2_offset"] = offset + 2 * bytes;
    e["steps"] = p.steps;
    dir.push_back(std::move(e));
    offset += 3 * bytes;
  }
  j["parameters"] = std::move(dir);
  const std::string header = j.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunError("cannot open '" + path + "' for writing");
  out.write(kCkptMagic, 5);
  const uint64_t hlen = header.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(header.data(), std::streamsize(header.size()));
  for (const auto& p : c.params) {
    out.write(reinterpret_cast<const char*>(p.values.data()), std::streamsize(p.values.size() * 4));
    out.write(reinterpret_cast<const char*>(p.moment1.data()), std::streamsize(p.moment1.size() * 4));
    out.write(reinterpret_cast<const char*>(p.moment2.data()), std::streamsize(p.moment2.size() * 4));
  }
  if (!out) throw RunError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  char magic[5];
  if (!in.read(magic, 5) || std::string(magic, 5) != kCkptMagic)
    throw DataError("'" + path + "' is not a checkpoint file");
  uint64_t hlen = 0;
  if (!in.read(reinterpret_cast<char*>(&hlen), 8)) throw DataError("truncated checkpoint header");
  std::string header(hlen, '\0');
  if (!in.read(header.data(), std::streamsize(hlen))) throw DataError("truncated checkpoint header");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid checkpoint header: " + std::string(e.what()));
  }
  Checkpoint c;
  try {
    c.version = j.at("version").get<int64_t>();
    if (c.version != 1) throw DataError("unsupported checkpoint version");
    c.plan = plan_from_json(j.at("plan").dump());
    c.step = j.at("step").get<int64_t>();
    c.seed = j.at("seed").get<uint64_t>();
    c.augmentation = augmentation_from_json(j.at("augmentation"));
    const uint64_t payload_start = 5 + 8 + hlen;
    for (const auto& e : j.at("parameters")) {
      ParamState s;
      s.name = e.at("name").get<std::string>();
      s.shape = e.at("shape").get<Shape>();
      s.steps = e.at("steps").get<int64_t>();
      const int64_t n = shape_numel(s.shape);
      const auto read_blob = [&](uint64_t off, std::vector<float>& dst) {
        dst.resize(size_t(n));
        in.seekg(std::streamoff(payload_start + off));
        if (!in.read(reinterpret_cast<char*>(dst.data()), std::streamsize(n * 4)))
          throw DataError("checkpoint payload truncated for parameter '" + s.name + "'");
      };
      read_blob(e.at("values_offset").get<uint64_t>(), s.values);
      read_blob(e.at("moment1_offset").get<uint64_t>(), s.moment1);
      read_blob(e.at("moment2_offset").get<uint64_t>(), s.moment2);
      c.params.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid checkpoint header: " + std::string(e.what()));
  }
  if (c.step < 0) throw DataError("checkpoint step must be non-negative");
  return c;
}

}  // namespace seg3d
