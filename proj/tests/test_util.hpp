#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

#include "seg3d/datapipe.hpp"
#include "seg3d/ops.hpp"
#include "seg3d/plan.hpp"
#include "seg3d/volume.hpp"

namespace testutil {

using namespace seg3d;

// Scratch directory under the system temp root, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           (tag + "-" + std::to_string(uint64_t(::getpid())) + "-" +
            std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline Volume random_volume(const Index3& dims, const Spacing& sp, uint64_t seed) {
  Volume v;
  v.dims = dims;
  v.spacing = sp;
  v.data.resize(size_t(v.voxel_count()));
  Rng r(seed);
  for (auto& x : v.data) x = float(r.normal());
  return v;
}

inline SegmentationMap random_labels(const Index3& dims, const Spacing& sp, int classes,
                                     uint64_t seed) {
  SegmentationMap m;
  m.dims = dims;
  m.spacing = sp;
  m.labels.resize(size_t(m.voxel_count()));
  Rng r(seed);
  for (auto& x : m.labels) x = uint8_t(r.below(uint64_t(classes)));
  return m;
}

// Image with Gaussian background noise plus bright spheres; labels mark the
// spheres. X/Y/Z centre coordinates are kept inside the border.
inline void sphere_case(const Index3& dims, const Spacing& sp, uint64_t seed, Volume& img,
                        SegmentationMap& seg) {
  img.dims = dims;
  img.spacing = sp;
  img.data.assign(size_t(img.voxel_count()), 0.f);
  seg.dims = dims;
  seg.spacing = sp;
  seg.labels.assign(size_t(seg.voxel_count()), 0);
  Rng r(seed);
  for (auto& x : img.data) x = float(r.normal());
  const int spheres = 1 + int(r.below(3));
  for (int s = 0; s < spheres; ++s) {
    const double rad_mm = r.uniform(9.0, 16.0);
    std::array<double, 3> c{};
    for (int a = 0; a < 3; ++a) {
      const double margin = rad_mm / sp[a];
      const double lo = std::min(margin, double(dims[a] - 1) / 2.0);
      c[a] = r.uniform(lo, double(dims[a] - 1) - lo);
    }
    for (int64_t z = 0; z < dims[2]; ++z)
      for (int64_t y = 0; y < dims[1]; ++y)
        for (int64_t x = 0; x < dims[0]; ++x) {
          const double dx = (double(x) - c[0]) * sp[0];
          const double dy = (double(y) - c[1]) * sp[1];
          const double dz = (double(z) - c[2]) * sp[2];
          if (dx * dx + dy * dy + dz * dz <= rad_mm * rad_mm) {
            const size_t i = size_t((z * dims[1] + y) * dims[0] + x);
            img.data[i] += 3.0f;
            seg.labels[i] = 1;
          }
        }
  }
}

// Plan for a synthetic dataset with the given median geometry.
inline TaskPlan tiny_plan(const Index3& median_shape, const Spacing& sp, int classes,
                          int cases = 4) {
  DatasetFingerprint fp;
  fp.median_spacing = sp;
  fp.median_shape = median_shape;
  fp.class_count = classes;
  fp.case_count = cases;
  return make_plan(fp);
}

struct WrittenDataset {
  std::filesystem::path dir;
  std::vector<std::filesystem::path> images, labels;
};

// Writes images/labels plus manifest.json; cases without labels get none.
inline WrittenDataset write_dataset(const std::filesystem::path& dir, const std::string& name,
                                    const std::vector<Volume>& images,
                                    const std::vector<const SegmentationMap*>& labels) {
  std::filesystem::create_directories(dir);
  WrittenDataset ds;
  ds.dir = dir;
  std::string cases;
  for (size_t i = 0; i < images.size(); ++i) {
    const std::string img = "case" + std::to_string(i) + ".svf";
    write_volume(images[i], dir / img);
    ds.images.push_back(dir / img);
    if (!cases.empty()) cases += ",\n";
    if (labels[i]) {
      const std::string lab = "case" + std::to_string(i) + "-labels.svf";
      write_volume(*labels[i], dir / lab);
      ds.labels.push_back(dir / lab);
      cases += "    {\"image\": \"" + img + "\", \"label\": \"" + lab + "\"}";
    } else {
      cases += "    {\"image\": \"" + img + "\"}";
    }
  }
  std::ofstream mf(dir / "manifest.json");
  mf << "{\n  \"name\": \"" << name << "\",\n  \"cases\": [\n" << cases << "\n  ]\n}\n";
  return ds;
}

// Central finite-difference check of a scalar-valued graph builder against
// the reverse-mode gradients, in double precision.
struct GradCheck {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

inline GradCheck check_gradients(const std::function<Tensor<double>()>& build,
                                 std::vector<Tensor<double>> inputs, uint64_t seed,
                                 int64_t samples_per_input = 5, double h = 1e-5) {
  for (auto& t : inputs) {
    t.grad();
    t.zero_grad();
  }
  Tensor<double> loss = build();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());
  GradCheck res;
  Rng pick(seed);
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor<double>& t = inputs[ti];
    const int64_t n = t.numel();
    const int64_t count = std::min(samples_per_input, n);
    for (int64_t k = 0; k < count; ++k) {
      const int64_t i = int64_t(pick.below(uint64_t(n)));
      const double orig = t.value()[i];
      t.value()[i] = orig + h;
      const double fp = build().value()[0];
      t.value()[i] = orig - h;
      const double fm = build().value()[0];
      t.value()[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[ti][i];
      const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4});
      res.max_rel_err = std::max(res.max_rel_err, err);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace testutil
