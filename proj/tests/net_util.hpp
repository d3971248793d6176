#pragma once

#include "seg3d/network.hpp"
#include "test_util.hpp"

namespace testutil {

// Count, per axis, the input positions whose gradient becomes nonzero when a
// single coarse-grid voxel of the encoder output is probed. With the probe far
// enough from the borders this equals the architecture's receptive field.
inline Index3 measure_footprint(const Index3& depths, const Index3& input_dims,
                                const Index3& probe_voxel, uint64_t seed) {
  Index3 ms{};
  for (int a = 0; a < 3; ++a) ms[a] = depths[a] > 0 ? depths[a] * 8 : 4;
  TaskPlan plan = tiny_plan(ms, Spacing{}, 2);
  NetworkOptions opts;
  opts.identity_norm = true;
  Network<double> net(plan, seed, opts);
  Tensor<double> x =
      Tensor<double>::zeros({1, 1, input_dims[0], input_dims[1], input_dims[2]}, true);
  Rng r(seed_combine(seed, 1));
  for (auto& v : x.value()) v = r.normal();
  Tensor<double> feat = net.encode(x);
  const Shape& fs = feat.shape();
  Tensor<double> mask = Tensor<double>::zeros(fs);
  for (int64_t c = 0; c < fs[1]; ++c)
    mask.value()[((c * fs[4] + probe_voxel[2]) * fs[3] + probe_voxel[1]) * fs[2] +
                 probe_voxel[0]] = r.normal();
  backward(sum_all(mul(feat, mask)));
  const std::vector<double>& g = x.grad();
  const int64_t X = input_dims[0], Y = input_dims[1], Z = input_dims[2];
  std::vector<char> occx(X, 0), occy(Y, 0), occz(Z, 0);
  for (int64_t z = 0; z < Z; ++z)
    for (int64_t y = 0; y < Y; ++y)
      for (int64_t xx = 0; xx < X; ++xx)
        if (g[(z * Y + y) * X + xx] != 0.0) {
          occx[xx] = 1;
          occy[y] = 1;
          occz[z] = 1;
        }
  Index3 counts{0, 0, 0};
  for (char o : occx) counts[0] += o;
  for (char o : occy) counts[1] += o;
  for (char o : occz) counts[2] += o;
  return counts;
}

}  // namespace testutil
