#include "seg3d/datapipe.hpp"

#include <algorithm>
#include <cmath>

namespace seg3d {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct AxisMap {
  std::vector<int64_t> i0, i1;
  std::vector<double> f;
};

// Voxel-centre source coordinate for output index o: exact integers when the
// grids coincide, so identity resampling reproduces input bits.
AxisMap axis_map(int64_t out_n, int64_t in_n, double ratio) {
  AxisMap m;
  m.i0.resize(out_n);
  m.i1.resize(out_n);
  m.f.resize(out_n);
  for (int64_t o = 0; o < out_n; ++o) {
    const double c = (double(o) + 0.5) * ratio - 0.5;
    if (c <= 0.0 || in_n == 1) {
      m.i0[o] = m.i1[o] = 0;
      m.f[o] = 0.0;
    } else if (c >= double(in_n - 1)) {
      m.i0[o] = m.i1[o] = in_n - 1;
      m.f[o] = 0.0;
    } else {
      const int64_t i = int64_t(c);
      m.i0[o] = i;
      m.i1[o] = i + 1;
      m.f[o] = c - double(i);
    }
  }
  return m;
}

std::vector<int64_t> nearest_map(int64_t out_n, int64_t in_n, double ratio) {
  std::vector<int64_t> m(out_n);
  for (int64_t o = 0; o < out_n; ++o) {
    const double c = (double(o) + 0.5) * ratio - 0.5;
    m[o] = std::clamp(round_half_up(c), int64_t(0), in_n - 1);
  }
  return m;
}

inline double lerp1(double a, double b, double f) { return a + f * (b - a); }

void check_target(const Spacing& target) {
  if (!target.valid()) throw DataError("target spacing must be positive and finite");
}

// Smooth one axis of a cubic grid with a Gaussian kernel, renormalizing the
// kernel where it overhangs the border.
void smooth_axis(std::vector<double>& g, int64_t G, int axis, double sigma) {
  if (!(sigma > 0.0)) return;
  const int64_t R = std::max<int64_t>(1, int64_t(std::ceil(3.0 * sigma)));
  std::vector<double> w(2 * R + 1);
  for (int64_t d = -R; d <= R; ++d) w[d + R] = std::exp(-0.5 * double(d * d) / (sigma * sigma));
  const int64_t stride = axis == 0 ? 1 : (axis == 1 ? G : G * G);
  std::vector<double> line(G);
  for (int64_t a = 0; a < G; ++a)
    for (int64_t b = 0; b < G; ++b) {
      // iterate all lines along `axis`; (a, b) are the other two coordinates
      int64_t base = 0;
      if (axis == 0) base = (a * G + b) * G;      // a=z, b=y
      else if (axis == 1) base = a * G * G + b;   // a=z, b=x
      else base = a * G + b;                      // a=y, b=x
      for (int64_t i = 0; i < G; ++i) line[i] = g[base + i * stride];
      for (int64_t i = 0; i < G; ++i) {
        double acc = 0.0, norm = 0.0;
        const int64_t d0 = std::max(-R, -i), d1 = std::min(R, G - 1 - i);
        for (int64_t d = d0; d <= d1; ++d) {
          acc += w[d + R] * line[i + d];
          norm += w[d + R];
        }
        g[base + i * stride] = acc / norm;
      }
    }
}

inline float sample_trilinear(const std::vector<float>& data, const Index3& dims, double cx,
                              double cy, double cz) {
  const auto prep = [](double c, int64_t n, int64_t& i0, int64_t& i1, double& f) {
    if (c <= 0.0 || n == 1) {
      i0 = i1 = 0;
      f = 0.0;
    } else if (c >= double(n - 1)) {
      i0 = i1 = n - 1;
      f = 0.0;
    } else {
      i0 = int64_t(c);
      i1 = i0 + 1;
      f = c - double(i0);
    }
  };
  int64_t x0, x1, y0, y1, z0, z1;
  double fx, fy, fz;
  prep(cx, dims[0], x0, x1, fx);
  prep(cy, dims[1], y0, y1, fy);
  prep(cz, dims[2], z0, z1, fz);
  const auto at = [&](int64_t x, int64_t y, int64_t z) {
    return double(data[(z * dims[1] + y) * dims[0] + x]);
  };
  const double c00 = lerp1(at(x0, y0, z0), at(x1, y0, z0), fx);
  const double c10 = lerp1(at(x0, y1, z0), at(x1, y1, z0), fx);
  const double c01 = lerp1(at(x0, y0, z1), at(x1, y0, z1), fx);
  const double c11 = lerp1(at(x0, y1, z1), at(x1, y1, z1), fx);
  return float(lerp1(lerp1(c00, c10, fy), lerp1(c01, c11, fy), fz));
}

inline uint8_t sample_nearest(const std::vector<uint8_t>& data, const Index3& dims, double cx,
                              double cy, double cz) {
  const int64_t x = std::clamp(round_half_up(cx), int64_t(0), dims[0] - 1);
  const int64_t y = std::clamp(round_half_up(cy), int64_t(0), dims[1] - 1);
  const int64_t z = std::clamp(round_half_up(cz), int64_t(0), dims[2] - 1);
  return data[(z * dims[1] + y) * dims[0] + x];
}

}  // namespace

int64_t reflect_index(int64_t i, int64_t n) {
  if (n <= 0) throw RunError("reflect_index needs a positive extent");
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  if (i >= n) i = period - i;
  return i;
}

Index3 resampled_dims(const Index3& dims, const Spacing& source, const Spacing& target) {
  Index3 out{};
  for (int a = 0; a < 3; ++a)
    out[a] = std::max<int64_t>(1, round_half_up(double(dims[a]) * source[a] / target[a]));
  return out;
}

Volume resample(const Volume& v, const Spacing& target) {
  return resample(v, target, resampled_dims(v.dims, v.spacing, target));
}

Volume resample(const Volume& v, const Spacing& target, const Index3& out_dims) {
  v.validate();
  check_target(target);
  Volume out;
  out.dims = out_dims;
  out.spacing = target;
  out.data.resize(size_t(out.voxel_count()));
  const AxisMap mx = axis_map(out_dims[0], v.dims[0], target[0] / v.spacing[0]);
  const AxisMap my = axis_map(out_dims[1], v.dims[1], target[1] / v.spacing[1]);
  const AxisMap mz = axis_map(out_dims[2], v.dims[2], target[2] / v.spacing[2]);
  const int64_t nx = v.dims[0], ny = v.dims[1];
  const float* src = v.data.data();
  float* dst = out.data.data();
  parallel_for(out_dims[2], [&](int64_t z) {
    const int64_t z0 = mz.i0[z], z1 = mz.i1[z];
    const double fz = mz.f[z];
    for (int64_t y = 0; y < out_dims[1]; ++y) {
      const int64_t y0 = my.i0[y], y1 = my.i1[y];
      const double fy = my.f[y];
      const int64_t r00 = (z0 * ny + y0) * nx, r10 = (z0 * ny + y1) * nx;
      const int64_t r01 = (z1 * ny + y0) * nx, r11 = (z1 * ny + y1) * nx;
      float* orow = dst + (z * out_dims[1] + y) * out_dims[0];
      for (int64_t x = 0; x < out_dims[0]; ++x) {
        const int64_t x0 = mx.i0[x], x1 = mx.i1[x];
        const double fx = mx.f[x];
        const double c00 = lerp1(src[r00 + x0], src[r00 + x1], fx);
        const double c10 = lerp1(src[r10 + x0], src[r10 + x1], fx);
        const double c01 = lerp1(src[r01 + x0], src[r01 + x1], fx);
        const double c11 = lerp1(src[r11 + x0], src[r11 + x1], fx);
        orow[x] = float(lerp1(lerp1(c00, c10, fy), lerp1(c01, c11, fy), fz));
      }
    }
  });
  return out;
}

SegmentationMap resample(const SegmentationMap& m, const Spacing& target) {
  return resample(m, target, resampled_dims(m.dims, m.spacing, target));
}

SegmentationMap resample(const SegmentationMap& m, const Spacing& target, const Index3& out_dims) {
  m.validate();
  check_target(target);
  SegmentationMap out;
  out.dims = out_dims;
  out.spacing = target;
  out.labels.resize(size_t(out.voxel_count()));
  const std::vector<int64_t> mx = nearest_map(out_dims[0], m.dims[0], target[0] / m.spacing[0]);
  const std::vector<int64_t> my = nearest_map(out_dims[1], m.dims[1], target[1] / m.spacing[1]);
  const std::vector<int64_t> mz = nearest_map(out_dims[2], m.dims[2], target[2] / m.spacing[2]);
  const int64_t nx = m.dims[0], ny = m.dims[1];
  const uint8_t* src = m.labels.data();
  uint8_t* dst = out.labels.data();
  parallel_for(out_dims[2], [&](int64_t z) {
    for (int64_t y = 0; y < out_dims[1]; ++y) {
      const int64_t rbase = (mz[z] * ny + my[y]) * nx;
      uint8_t* orow = dst + (z * out_dims[1] + y) * out_dims[0];
      for (int64_t x = 0; x < out_dims[0]; ++x) orow[x] = src[rbase + mx[x]];
    }
  });
  return out;
}

Volume normalize(const Volume& v) {
  v.validate();
  const int64_t n = v.voxel_count();
  const double mean = lane_sum<double>(v.data.data(), n) / double(n);
  double lane[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) {
      const double d = double(v.data[i + j]) - mean;
      lane[j] += d * d;
    }
  for (; i < n; ++i) {
    const double d = double(v.data[i]) - mean;
    lane[i & 7] += d * d;
  }
  const double var =
      (((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]))) /
      double(n);
  const double scale = 1.0 / std::max(std::sqrt(var), 1e-8);
  Volume out;
  out.dims = v.dims;
  out.spacing = v.spacing;
  out.data.resize(size_t(n));
  const float* src = v.data.data();
  float* dst = out.data.data();
  parallel_for((n + (1 << 16) - 1) >> 16, [&](int64_t c) {
    const int64_t lo = c << 16, hi = std::min(n, lo + (1 << 16));
    for (int64_t k = lo; k < hi; ++k) dst[k] = float((double(src[k]) - mean) * scale);
  });
  return out;
}

PatchPair sample_patch(const Volume& image, const SegmentationMap& labels, const Index3& patch_dims,
                       uint64_t rng_seed) {
  image.validate();
  labels.validate();
  if (image.dims != labels.dims) throw DataError("image and label grids differ");
  for (int a = 0; a < 3; ++a)
    if (patch_dims[a] < 1) throw RunError("patch dims must be positive");
  Rng r(rng_seed);
  PatchPair out;
  out.dims = patch_dims;
  out.seed = rng_seed;
  std::array<int64_t, 3> lo{};
  for (int a = 0; a < 3; ++a) {
    const int64_t scan = image.dims[a], p = patch_dims[a];
    if (scan >= p) {
      out.origin[a] = int64_t(r.below(uint64_t(scan - p + 1)));
      lo[a] = out.origin[a];
    } else {
      lo[a] = -(p - scan) / 2;
      out.origin[a] = 0;
    }
  }
  std::array<std::vector<int64_t>, 3> map;
  for (int a = 0; a < 3; ++a) {
    map[a].resize(patch_dims[a]);
    for (int64_t k = 0; k < patch_dims[a]; ++k) map[a][k] = reflect_index(lo[a] + k, image.dims[a]);
  }
  const int64_t n = patch_dims[0] * patch_dims[1] * patch_dims[2];
  out.image.resize(size_t(n));
  out.labels.resize(size_t(n));
  const int64_t nx = image.dims[0], ny = image.dims[1];
  parallel_for(patch_dims[2], [&](int64_t z) {
    const int64_t sz = map[2][z];
    for (int64_t y = 0; y < patch_dims[1]; ++y) {
      const int64_t rbase = (sz * ny + map[1][y]) * nx;
      const int64_t obase = (z * patch_dims[1] + y) * patch_dims[0];
      for (int64_t x = 0; x < patch_dims[0]; ++x) {
        const int64_t s = rbase + map[0][x];
        out.image[obase + x] = image.data[s];
        out.labels[obase + x] = labels.labels[s];
      }
    }
  });
  return out;
}

nlohmann::ordered_json augmentation_to_json(const AugmentationConfig& cfg) {
  nlohmann::ordered_json j;
  j["transform_probability"] = cfg.transform_probability;
  j["noise_sigma"] = {cfg.noise_sigma_min, cfg.noise_sigma_max};
  j["rotation_max_deg"] = cfg.rotation_max_deg;
  j["scale"] = {cfg.scale_min, cfg.scale_max};
  j["elastic_grid_points"] = cfg.elastic_grid_points;
  j["elastic_sigma_mm"] = cfg.elastic_sigma_mm;
  j["elastic_magnitude_mm"] = {cfg.elastic_magnitude_min_mm, cfg.elastic_magnitude_max_mm};
  return j;
}

AugmentationConfig augmentation_from_json(const nlohmann::json& j) {
  AugmentationConfig c;
  c.transform_probability = j.at("transform_probability").get<double>();
  c.noise_sigma_min = j.at("noise_sigma").at(0).get<double>();
  c.noise_sigma_max = j.at("noise_sigma").at(1).get<double>();
  c.rotation_max_deg = j.at("rotation_max_deg").get<double>();
  c.scale_min = j.at("scale").at(0).get<double>();
  c.scale_max = j.at("scale").at(1).get<double>();
  c.elastic_grid_points = j.at("elastic_grid_points").get<int64_t>();
  c.elastic_sigma_mm = j.at("elastic_sigma_mm").get<double>();
  c.elastic_magnitude_min_mm = j.at("elastic_magnitude_mm").at(0).get<double>();
  c.elastic_magnitude_max_mm = j.at("elastic_magnitude_mm").at(1).get<double>();
  return c;
}

DeformationField make_elastic_field(const Index3& patch_dims, const Spacing& spacing,
                                    const AugmentationConfig& cfg, uint64_t rng_seed) {
  const int64_t G = cfg.elastic_grid_points;
  if (G < 2) throw RunError("elastic grid needs at least two points per axis");
  Rng r(rng_seed);
  const double mag = r.uniform(cfg.elastic_magnitude_min_mm, cfg.elastic_magnitude_max_mm);
  std::array<std::vector<double>, 3> grid;
  for (int c = 0; c < 3; ++c) {
    grid[c].resize(size_t(G * G * G));
    for (auto& v : grid[c]) v = r.normal() * mag;
  }
  std::array<double, 3> step{};
  for (int a = 0; a < 3; ++a)
    step[a] = patch_dims[a] > 1 ? double(patch_dims[a] - 1) * spacing[a] / double(G - 1) : spacing[a];
  for (int c = 0; c < 3; ++c)
    for (int a = 0; a < 3; ++a) smooth_axis(grid[c], G, a, cfg.elastic_sigma_mm / step[a]);

  DeformationField f;
  f.dims = patch_dims;
  const int64_t n = patch_dims[0] * patch_dims[1] * patch_dims[2];
  f.dx.resize(size_t(n));
  f.dy.resize(size_t(n));
  f.dz.resize(size_t(n));
  std::array<std::vector<float>*, 3> comp{&f.dx, &f.dy, &f.dz};
  std::array<double, 3> gscale{};
  for (int a = 0; a < 3; ++a)
    gscale[a] = patch_dims[a] > 1 ? double(G - 1) / double(patch_dims[a] - 1) : 0.0;
  parallel_for(patch_dims[2], [&](int64_t z) {
    const double gz = double(z) * gscale[2];
    for (int64_t y = 0; y < patch_dims[1]; ++y) {
      const double gy = double(y) * gscale[1];
      const int64_t obase = (z * patch_dims[1] + y) * patch_dims[0];
      for (int64_t x = 0; x < patch_dims[0]; ++x) {
        const double gx = double(x) * gscale[0];
        const auto prep = [G](double c, int64_t& i0, int64_t& i1, double& fr) {
          if (c >= double(G - 1)) {
            i0 = i1 = G - 1;
            fr = 0.0;
          } else {
            i0 = int64_t(c);
            i1 = i0 + 1;
            fr = c - double(i0);
          }
        };
        int64_t x0, x1, y0, y1, z0, z1;
        double fx, fy, fz;
        prep(gx, x0, x1, fx);
        prep(gy, y0, y1, fy);
        prep(gz, z0, z1, fz);
        for (int c = 0; c < 3; ++c) {
          const std::vector<double>& g = grid[c];
          const auto at = [&](int64_t xi, int64_t yi, int64_t zi) {
            return g[(zi * G + yi) * G + xi];
          };
          const double c00 = lerp1(at(x0, y0, z0), at(x1, y0, z0), fx);
          const double c10 = lerp1(at(x0, y1, z0), at(x1, y1, z0), fx);
          const double c01 = lerp1(at(x0, y0, z1), at(x1, y0, z1), fx);
          const double c11 = lerp1(at(x0, y1, z1), at(x1, y1, z1), fx);
          const double mm = lerp1(lerp1(c00, c10, fy), lerp1(c01, c11, fy), fz);
          (*comp[c])[obase + x] = float(mm / spacing[c]);
        }
      }
    }
  });
  return f;
}

PatchPair augment(const PatchPair& patch, const Spacing& spacing, const AugmentationConfig& cfg,
                  uint64_t rng_seed) {
  Rng r(rng_seed);
  const double p = cfg.transform_probability;
  const bool do_noise = r.u01() < p;
  const bool do_rot = r.u01() < p;
  const bool do_scale = r.u01() < p;
  const bool do_elastic = r.u01() < p;
  PatchPair out = patch;
  const Index3 dims = patch.dims;
  if (do_rot || do_scale || do_elastic) {
    double ax = 0.0, ay = 0.0, az = 0.0, s = 1.0;
    if (do_rot) {
      const double d = cfg.rotation_max_deg * kPi / 180.0;
      ax = r.uniform(-d, d);
      ay = r.uniform(-d, d);
      az = r.uniform(-d, d);
    }
    if (do_scale) s = r.uniform(cfg.scale_min, cfg.scale_max);
    DeformationField field;
    if (do_elastic) field = make_elastic_field(dims, spacing, cfg, r.raw());
    // Inverse of the forward map (rotate about the centre, then scale):
    // pull each target voxel from M^T u / s plus the elastic displacement.
    const double cx = std::cos(ax), sx = std::sin(ax);
    const double cy = std::cos(ay), sy = std::sin(ay);
    const double cz = std::cos(az), sz = std::sin(az);
    // M = Rz * Ry * Rx, rows of M written out
    const double m00 = cz * cy, m01 = cz * sy * sx - sz * cx, m02 = cz * sy * cx + sz * sx;
    const double m10 = sz * cy, m11 = sz * sy * sx + cz * cx, m12 = sz * sy * cx - cz * sx;
    const double m20 = -sy, m21 = cy * sx, m22 = cy * cx;
    const std::array<double, 3> centre{double(dims[0] - 1) / 2.0, double(dims[1] - 1) / 2.0,
                                       double(dims[2] - 1) / 2.0};
    parallel_for(dims[2], [&](int64_t z) {
      for (int64_t y = 0; y < dims[1]; ++y) {
        const int64_t obase = (z * dims[1] + y) * dims[0];
        for (int64_t x = 0; x < dims[0]; ++x) {
          const double ux = (double(x) - centre[0]) * spacing[0];
          const double uy = (double(y) - centre[1]) * spacing[1];
          const double uz = (double(z) - centre[2]) * spacing[2];
          // transpose(M) * u / s
          const double wx = (m00 * ux + m10 * uy + m20 * uz) / s;
          const double wy = (m01 * ux + m11 * uy + m21 * uz) / s;
          const double wz = (m02 * ux + m12 * uy + m22 * uz) / s;
          double sxv = wx / spacing[0] + centre[0];
          double syv = wy / spacing[1] + centre[1];
          double szv = wz / spacing[2] + centre[2];
          if (do_elastic) {
            sxv += double(field.dx[obase + x]);
            syv += double(field.dy[obase + x]);
            szv += double(field.dz[obase + x]);
          }
          out.image[obase + x] = sample_trilinear(patch.image, dims, sxv, syv, szv);
          out.labels[obase + x] = sample_nearest(patch.labels, dims, sxv, syv, szv);
        }
      }
    });
  }
  if (do_noise) {
    const double sigma = r.uniform(cfg.noise_sigma_min, cfg.noise_sigma_max);
    const uint64_t base = r.raw();
    parallel_for(dims[2], [&](int64_t z) {
      Rng rz(seed_combine(base, uint64_t(z)));
      const int64_t zbase = z * dims[1] * dims[0];
      for (int64_t i = 0; i < dims[1] * dims[0]; ++i)
        out.image[zbase + i] = float(double(out.image[zbase + i]) + rz.normal() * sigma);
    });
  }
  return out;
}

}  // namespace seg3d
