#include "seg3d/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace seg3d {

namespace {

constexpr int64_t kElemChunk = 1 << 15;

template <class F>
void parallel_elems(int64_t n, F&& f) {
  const int64_t chunks = (n + kElemChunk - 1) / kElemChunk;
  parallel_for(chunks, [&](int64_t c) {
    const int64_t lo = c * kElemChunk;
    const int64_t hi = std::min(n, lo + kElemChunk);
    for (int64_t i = lo; i < hi; ++i) f(i);
  });
}

template <class Acc, class T>
Acc lane_dot_stride(const T* a, const T* b, int64_t n, int64_t bstride) {
  if (bstride == 1) return lane_dot<Acc>(a, b, n);
  Acc lane[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) lane[j] += Acc(a[i + j]) * Acc(b[(i + j) * bstride]);
  for (; i < n; ++i) lane[i & 7] += Acc(a[i]) * Acc(b[i * bstride]);
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

// Accumulates a dot product into caller-held lanes so row-by-row passes pay
// the lane reduction only once per accumulator instead of once per row.
template <class Acc, class T>
inline void lane_dot_into(Acc* lane, const T* a, const T* b, int64_t n) {
  Acc l[8];
  for (int j = 0; j < 8; ++j) l[j] = lane[j];
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) l[j] += Acc(a[i + j]) * Acc(b[i + j]);
  for (int j = 0; i + j < n; ++j) l[j] += Acc(a[i + j]) * Acc(b[i + j]);
  for (int j = 0; j < 8; ++j) lane[j] = l[j];
}

template <class Acc>
inline Acc lane_reduce(const Acc* lane) {
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw RunError(msg);
}

struct ConvGeom {
  int64_t N, Ci, X, Y, Z;
  int64_t Co, Kx, Ky, Kz;
  int64_t sx, sy, sz, px, py, pz;
  int64_t OX, OY, OZ;

  int64_t in_off(int64_t n, int64_t c, int64_t y, int64_t z) const {
    return (((n * Ci + c) * Z + z) * Y + y) * X;
  }
  int64_t out_off(int64_t n, int64_t c, int64_t y, int64_t z) const {
    return (((n * Co + c) * OZ + z) * OY + y) * OX;
  }
  int64_t w_off(int64_t co, int64_t ci, int64_t ky, int64_t kz) const {
    return (((co * Ci + ci) * Kz + kz) * Ky + ky) * Kx;
  }
  // Output range on one axis where the input column o*s + k - p stays in bounds.
  static void axis_range(int64_t k, int64_t p, int64_t s, int64_t in, int64_t out, int64_t& lo,
                         int64_t& hi) {
    lo = std::max<int64_t>(0, (p - k + s - 1) / s);
    const int64_t top = in - 1 + p - k;
    hi = top < 0 ? 0 : std::min(out, top / s + 1);
    if (hi < lo) hi = lo;
  }
  void ox_range(int64_t kx, int64_t& ox0, int64_t& ox1) const {
    axis_range(kx, px, sx, X, OX, ox0, ox1);
  }
};

template <class T>
ConvGeom conv_geom(const Tensor<T>& x, const Tensor<T>& w, const Stride3& stride, const Stride3& padding) {
  require(x.shape().size() == 5, "conv3d input must be rank 5, got " + shape_str(x.shape()));
  require(w.shape().size() == 5, "conv3d weight must be rank 5, got " + shape_str(w.shape()));
  ConvGeom g{};
  g.N = x.shape()[0];
  g.Ci = x.shape()[1];
  g.X = x.shape()[2];
  g.Y = x.shape()[3];
  g.Z = x.shape()[4];
  g.Co = w.shape()[0];
  require(w.shape()[1] == g.Ci, "conv3d channel mismatch: input " + shape_str(x.shape()) +
                                    " weight " + shape_str(w.shape()));
  g.Kx = w.shape()[2];
  g.Ky = w.shape()[3];
  g.Kz = w.shape()[4];
  g.sx = stride[0];
  g.sy = stride[1];
  g.sz = stride[2];
  g.px = padding[0];
  g.py = padding[1];
  g.pz = padding[2];
  require(g.sx >= 1 && g.sy >= 1 && g.sz >= 1, "conv3d stride must be positive");
  require(g.px >= 0 && g.py >= 0 && g.pz >= 0, "conv3d padding must be non-negative");
  g.OX = (g.X + 2 * g.px - g.Kx) / g.sx + 1;
  g.OY = (g.Y + 2 * g.py - g.Ky) / g.sy + 1;
  g.OZ = (g.Z + 2 * g.pz - g.Kz) / g.sz + 1;
  require(g.X + 2 * g.px >= g.Kx && g.Y + 2 * g.py >= g.Ky && g.Z + 2 * g.pz >= g.Kz,
          "conv3d kernel larger than padded input");
  return g;
}

// The x-stride-2 fast paths split rows into even/odd phases so every access
// in the hot loops is contiguous. Helpers below give, for a kernel offset
// `base` = kx - px relative to the row start, the phase and the index shift
// into the compacted phase row.
inline int64_t phase_of(int64_t base) { return base & 1; }
inline int64_t phase_shift(int64_t base) { return (base - (base & 1)) / 2; }

template <class T>
inline void split_phases(const T* __restrict row, int64_t n, T* __restrict even,
                         T* __restrict odd) {
  const int64_t pairs = n / 2;
  for (int64_t j = 0; j < pairs; ++j) {
    even[j] = row[2 * j];
    odd[j] = row[2 * j + 1];
  }
  if (n & 1) even[pairs] = row[n - 1];
}

// Convolution core for x-stride 1 or 2 (any y/z stride). Accumulates four
// output channels per input row pass; per output element the contribution
// order stays (ci, kz, ky, kx). With Accum the result adds into `out`.
template <class T, bool Accum>
void conv3d_forward_fast(const ConvGeom& g, const T* __restrict x, const T* __restrict w,
                         const T* __restrict b, T* __restrict out) {
  constexpr int64_t kCoBlock = 4;
  std::vector<int64_t> xr(size_t(2 * g.Kx));
  for (int64_t kx = 0; kx < g.Kx; ++kx) g.ox_range(kx, xr[size_t(2 * kx)], xr[size_t(2 * kx + 1)]);
  const int64_t phase_len = g.X / 2 + 1;
  parallel_for(g.N * g.OZ, [&](int64_t t) {
    const int64_t n = t / g.OZ;
    const int64_t oz = t % g.OZ;
    std::vector<T> scratch(size_t(kCoBlock * g.OX));
    std::vector<T> phases(g.sx == 2 ? size_t(2 * phase_len) : size_t(0));
    for (int64_t oy = 0; oy < g.OY; ++oy) {
      for (int64_t co0 = 0; co0 < g.Co; co0 += kCoBlock) {
        const int64_t cb = std::min(kCoBlock, g.Co - co0);
        for (int64_t c = 0; c < cb; ++c) {
          T* __restrict arow = scratch.data() + c * g.OX;
          const T bias = b ? b[co0 + c] : T(0);
          for (int64_t ox = 0; ox < g.OX; ++ox) arow[ox] = bias;
        }
        for (int64_t ci = 0; ci < g.Ci; ++ci) {
          for (int64_t kz = 0; kz < g.Kz; ++kz) {
            const int64_t iz = oz * g.sz + kz - g.pz;
            if (iz < 0 || iz >= g.Z) continue;
            for (int64_t ky = 0; ky < g.Ky; ++ky) {
              const int64_t iy = oy * g.sy + ky - g.py;
              if (iy < 0 || iy >= g.Y) continue;
              const T* __restrict irow = x + g.in_off(n, ci, iy, iz);
              if (g.sx == 2)
                split_phases(irow, g.X, phases.data(), phases.data() + phase_len);
              const int64_t wbase = g.w_off(co0, ci, ky, kz);
              const int64_t wstep = g.Ci * g.Kz * g.Ky * g.Kx;
              for (int64_t kx = 0; kx < g.Kx; ++kx) {
                const int64_t ox0 = xr[size_t(2 * kx)], ox1 = xr[size_t(2 * kx + 1)];
                if (ox1 <= ox0) continue;
                const int64_t base = kx - g.px;
                const T* __restrict ip =
                    g.sx == 1 ? irow : phases.data() + phase_of(base) * phase_len;
                const int64_t shift = g.sx == 1 ? base : phase_shift(base);
                if (cb == kCoBlock) {
                  const T w0 = w[wbase + kx];
                  const T w1 = w[wbase + wstep + kx];
                  const T w2 = w[wbase + 2 * wstep + kx];
                  const T w3 = w[wbase + 3 * wstep + kx];
                  T* __restrict a0 = scratch.data();
                  T* __restrict a1 = a0 + g.OX;
                  T* __restrict a2 = a1 + g.OX;
                  T* __restrict a3 = a2 + g.OX;
                  for (int64_t ox = ox0; ox < ox1; ++ox) {
                    const T v = ip[ox + shift];
                    a0[ox] += w0 * v;
                    a1[ox] += w1 * v;
                    a2[ox] += w2 * v;
                    a3[ox] += w3 * v;
                  }
                } else {
                  for (int64_t c = 0; c < cb; ++c) {
                    const T wv = w[wbase + c * wstep + kx];
                    T* __restrict arow = scratch.data() + c * g.OX;
                    for (int64_t ox = ox0; ox < ox1; ++ox) arow[ox] += wv * ip[ox + shift];
                  }
                }
              }
            }
          }
        }
        for (int64_t c = 0; c < cb; ++c) {
          T* __restrict orow = out + g.out_off(n, co0 + c, oy, oz);
          const T* __restrict arow = scratch.data() + c * g.OX;
          if (Accum)
            for (int64_t ox = 0; ox < g.OX; ++ox) orow[ox] += arow[ox];
          else
            for (int64_t ox = 0; ox < g.OX; ++ox) orow[ox] = arow[ox];
        }
      }
    }
  });
}

template <class T>
void conv3d_forward(const ConvGeom& g, const T* x, const T* w, const T* b, T* out) {
  if (g.sx == 1 || g.sx == 2) {
    conv3d_forward_fast<T, false>(g, x, w, b, out);
    return;
  }
  parallel_for(g.N * g.OZ, [&](int64_t t) {
    const int64_t n = t / g.OZ;
    const int64_t oz = t % g.OZ;
    for (int64_t oy = 0; oy < g.OY; ++oy) {
      for (int64_t co = 0; co < g.Co; ++co) {
        T* orow = out + g.out_off(n, co, oy, oz);
        const T bias = b ? b[co] : T(0);
        for (int64_t ox = 0; ox < g.OX; ++ox) orow[ox] = bias;
        for (int64_t ci = 0; ci < g.Ci; ++ci) {
          for (int64_t kz = 0; kz < g.Kz; ++kz) {
            const int64_t iz = oz * g.sz + kz - g.pz;
            if (iz < 0 || iz >= g.Z) continue;
            for (int64_t ky = 0; ky < g.Ky; ++ky) {
              const int64_t iy = oy * g.sy + ky - g.py;
              if (iy < 0 || iy >= g.Y) continue;
              const T* irow = x + g.in_off(n, ci, iy, iz);
              const T* wrow = w + g.w_off(co, ci, ky, kz);
              for (int64_t kx = 0; kx < g.Kx; ++kx) {
                const T wv = wrow[kx];
                int64_t ox0, ox1;
                g.ox_range(kx, ox0, ox1);
                for (int64_t ox = ox0; ox < ox1; ++ox) orow[ox] += wv * irow[ox * g.sx + kx - g.px];
              }
            }
          }
        }
      }
    }
  });
}

template <class T>
void conv3d_backward_input_strided(const ConvGeom& g, const T* __restrict w,
                                   const T* __restrict go, T* __restrict gx) {
  std::vector<int64_t> xr(size_t(2 * g.Kx));
  for (int64_t kx = 0; kx < g.Kx; ++kx) g.ox_range(kx, xr[size_t(2 * kx)], xr[size_t(2 * kx + 1)]);
  const int64_t phase_len = g.X / 2 + 1;
  parallel_for(g.N * g.Ci * g.Z, [&](int64_t t) {
    const int64_t iz = t % g.Z;
    const int64_t nc = t / g.Z;
    const int64_t n = nc / g.Ci;
    const int64_t ci = nc % g.Ci;
    std::vector<T> acc(size_t(2 * phase_len));
    for (int64_t iy = 0; iy < g.Y; ++iy) {
      std::fill(acc.begin(), acc.end(), T(0));
      for (int64_t co = 0; co < g.Co; ++co) {
        for (int64_t kz = 0; kz < g.Kz; ++kz) {
          const int64_t tz = iz + g.pz - kz;
          if (tz < 0 || tz % g.sz != 0) continue;
          const int64_t oz = tz / g.sz;
          if (oz >= g.OZ) continue;
          for (int64_t ky = 0; ky < g.Ky; ++ky) {
            const int64_t ty = iy + g.py - ky;
            if (ty < 0 || ty % g.sy != 0) continue;
            const int64_t oy = ty / g.sy;
            if (oy >= g.OY) continue;
            const T* __restrict grow = go + g.out_off(n, co, oy, oz);
            const T* __restrict wrow = w + g.w_off(co, ci, ky, kz);
            for (int64_t kx = 0; kx < g.Kx; ++kx) {
              const int64_t ox0 = xr[size_t(2 * kx)], ox1 = xr[size_t(2 * kx + 1)];
              if (ox1 <= ox0) continue;
              const int64_t base = kx - g.px;
              T* __restrict arow = acc.data() + phase_of(base) * phase_len;
              const int64_t shift = phase_shift(base);
              const T wv = wrow[kx];
              for (int64_t ox = ox0; ox < ox1; ++ox) arow[ox + shift] += wv * grow[ox];
            }
          }
        }
      }
      T* __restrict grow_in = gx + g.in_off(n, ci, iy, iz);
      const T* __restrict even = acc.data();
      const T* __restrict odd = acc.data() + phase_len;
      const int64_t pairs = g.X / 2;
      for (int64_t j = 0; j < pairs; ++j) {
        grow_in[2 * j] += even[j];
        grow_in[2 * j + 1] += odd[j];
      }
      if (g.X & 1) grow_in[g.X - 1] += even[pairs];
    }
  });
}

template <class T>
void conv3d_backward_input(const ConvGeom& g, const T* w, const T* go, T* gx) {
  if (g.sx == 2) {
    conv3d_backward_input_strided(g, w, go, gx);
    return;
  }
  if (g.sx == 1 && g.sy == 1 && g.sz == 1 && g.px < g.Kx && g.py < g.Ky && g.pz < g.Kz) {
    // Correlating the output gradient with the channel-swapped, spatially
    // flipped kernel under full padding lands exactly on the input gradient.
    std::vector<T> wf(size_t(g.Co * g.Ci * g.Kx * g.Ky * g.Kz));
    for (int64_t co = 0; co < g.Co; ++co)
      for (int64_t ci = 0; ci < g.Ci; ++ci)
        for (int64_t kz = 0; kz < g.Kz; ++kz)
          for (int64_t ky = 0; ky < g.Ky; ++ky)
            for (int64_t kx = 0; kx < g.Kx; ++kx)
              wf[size_t((((ci * g.Co + co) * g.Kz + (g.Kz - 1 - kz)) * g.Ky + (g.Ky - 1 - ky)) *
                            g.Kx +
                        (g.Kx - 1 - kx))] = w[g.w_off(co, ci, ky, kz) + kx];
    ConvGeom gf{};
    gf.N = g.N;
    gf.Ci = g.Co;
    gf.X = g.OX;
    gf.Y = g.OY;
    gf.Z = g.OZ;
    gf.Co = g.Ci;
    gf.Kx = g.Kx;
    gf.Ky = g.Ky;
    gf.Kz = g.Kz;
    gf.sx = gf.sy = gf.sz = 1;
    gf.px = g.Kx - 1 - g.px;
    gf.py = g.Ky - 1 - g.py;
    gf.pz = g.Kz - 1 - g.pz;
    gf.OX = g.X;
    gf.OY = g.Y;
    gf.OZ = g.Z;
    conv3d_forward_fast<T, true>(gf, go, wf.data(), nullptr, gx);
    return;
  }
  parallel_for(g.N * g.Ci * g.Z, [&](int64_t t) {
    const int64_t iz = t % g.Z;
    const int64_t nc = t / g.Z;
    const int64_t n = nc / g.Ci;
    const int64_t ci = nc % g.Ci;
    for (int64_t iy = 0; iy < g.Y; ++iy) {
      T* grow_in = gx + g.in_off(n, ci, iy, iz);
      for (int64_t co = 0; co < g.Co; ++co) {
        for (int64_t kz = 0; kz < g.Kz; ++kz) {
          const int64_t tz = iz + g.pz - kz;
          if (tz < 0 || tz % g.sz != 0) continue;
          const int64_t oz = tz / g.sz;
          if (oz >= g.OZ) continue;
          for (int64_t ky = 0; ky < g.Ky; ++ky) {
            const int64_t ty = iy + g.py - ky;
            if (ty < 0 || ty % g.sy != 0) continue;
            const int64_t oy = ty / g.sy;
            if (oy >= g.OY) continue;
            const T* grow_out = go + g.out_off(n, co, oy, oz);
            const T* wrow = w + g.w_off(co, ci, ky, kz);
            for (int64_t kx = 0; kx < g.Kx; ++kx) {
              const T wv = wrow[kx];
              int64_t ox0, ox1;
              g.ox_range(kx, ox0, ox1);
              if (g.sx == 1) {
                T* gp = grow_in + kx - g.px;
                for (int64_t ox = ox0; ox < ox1; ++ox) gp[ox] += wv * grow_out[ox];
              } else {
                for (int64_t ox = ox0; ox < ox1; ++ox)
                  grow_in[ox * g.sx + kx - g.px] += wv * grow_out[ox];
              }
            }
          }
        }
      }
    }
  });
}

template <class T>
void conv3d_backward_weight(const ConvGeom& g, const T* x, const T* go, T* gw, T* gb) {
  if (g.sx == 1 && g.sy == 1 && g.sz == 1 && g.Kx <= 8) {
    // rows outer, taps inner: each volume row is read once per output channel
    // and all kernel taps consume it from cache; lanes accumulate in working
    // precision across rows and reduce once per weight
    std::vector<int64_t> xr(size_t(2 * g.Kx));
    for (int64_t kx = 0; kx < g.Kx; ++kx)
      g.ox_range(kx, xr[size_t(2 * kx)], xr[size_t(2 * kx + 1)]);
    const int64_t taps = g.Ci * g.Kz * g.Ky * g.Kx;
    parallel_for(g.Co, [&](int64_t co) {
      if (gb) {
        double bacc = 0.0;
        for (int64_t n = 0; n < g.N; ++n)
          bacc += lane_sum<double>(go + g.out_off(n, co, 0, 0), g.OX * g.OY * g.OZ);
        gb[co] += T(bacc);
      }
      std::vector<T> lanes(size_t(taps * 8), T(0));
      for (int64_t n = 0; n < g.N; ++n) {
        for (int64_t oz = 0; oz < g.OZ; ++oz) {
          const int64_t kz0 = std::max<int64_t>(0, g.pz - oz);
          const int64_t kz1 = std::min(g.Kz, g.Z + g.pz - oz);
          for (int64_t oy = 0; oy < g.OY; ++oy) {
            const int64_t ky0 = std::max<int64_t>(0, g.py - oy);
            const int64_t ky1 = std::min(g.Ky, g.Y + g.py - oy);
            const T* __restrict grow = go + g.out_off(n, co, oy, oz);
            for (int64_t ci = 0; ci < g.Ci; ++ci) {
              for (int64_t kz = kz0; kz < kz1; ++kz) {
                for (int64_t ky = ky0; ky < ky1; ++ky) {
                  const T* __restrict irow = x + g.in_off(n, ci, oy + ky - g.py, oz + kz - g.pz);
                  T* __restrict lrow = lanes.data() + (((ci * g.Kz + kz) * g.Ky + ky) * g.Kx) * 8;
                  for (int64_t kx = 0; kx < g.Kx; ++kx) {
                    const int64_t ox0 = xr[size_t(2 * kx)], ox1 = xr[size_t(2 * kx + 1)];
                    if (ox1 <= ox0) continue;
                    lane_dot_into<T>(lrow + kx * 8, grow + ox0, irow + ox0 + kx - g.px, ox1 - ox0);
                  }
                }
              }
            }
          }
        }
      }
      for (int64_t ci = 0; ci < g.Ci; ++ci)
        for (int64_t kz = 0; kz < g.Kz; ++kz)
          for (int64_t ky = 0; ky < g.Ky; ++ky)
            for (int64_t kx = 0; kx < g.Kx; ++kx)
              gw[g.w_off(co, ci, ky, kz) + kx] +=
                  T(lane_reduce(lanes.data() + (((ci * g.Kz + kz) * g.Ky + ky) * g.Kx + kx) * 8));
    });
    return;
  }
  if ((g.sx == 1 || g.sx == 2) && g.Kx <= 8) {
    std::vector<int64_t> xr(size_t(2 * g.Kx));
    for (int64_t kx = 0; kx < g.Kx; ++kx)
      g.ox_range(kx, xr[size_t(2 * kx)], xr[size_t(2 * kx + 1)]);
    const int64_t phase_len = g.X / 2 + 1;
    parallel_for(g.Co, [&](int64_t co) {
      if (gb) {
        double bacc = 0.0;
        for (int64_t n = 0; n < g.N; ++n)
          bacc += lane_sum<double>(go + g.out_off(n, co, 0, 0), g.OX * g.OY * g.OZ);
        gb[co] += T(bacc);
      }
      std::vector<T> phases(g.sx == 2 ? size_t(2 * phase_len) : size_t(0));
      // lanes persist across every row, one set per x-tap, so the reduction
      // happens once per weight instead of once per row
      for (int64_t ci = 0; ci < g.Ci; ++ci) {
        for (int64_t kz = 0; kz < g.Kz; ++kz) {
          int64_t oz0, oz1;
          ConvGeom::axis_range(kz, g.pz, g.sz, g.Z, g.OZ, oz0, oz1);
          for (int64_t ky = 0; ky < g.Ky; ++ky) {
            int64_t oy0, oy1;
            ConvGeom::axis_range(ky, g.py, g.sy, g.Y, g.OY, oy0, oy1);
            double lanes[8 * 8] = {};
            if (oy1 > oy0 && oz1 > oz0)
              for (int64_t n = 0; n < g.N; ++n)
                for (int64_t oz = oz0; oz < oz1; ++oz)
                  for (int64_t oy = oy0; oy < oy1; ++oy) {
                    const T* __restrict grow = go + g.out_off(n, co, oy, oz);
                    const T* __restrict irow =
                        x + g.in_off(n, ci, oy * g.sy + ky - g.py, oz * g.sz + kz - g.pz);
                    if (g.sx == 2)
                      split_phases(irow, g.X, phases.data(), phases.data() + phase_len);
                    for (int64_t kx = 0; kx < g.Kx; ++kx) {
                      const int64_t ox0 = xr[size_t(2 * kx)], ox1 = xr[size_t(2 * kx + 1)];
                      if (ox1 <= ox0) continue;
                      const int64_t base = kx - g.px;
                      const T* __restrict ip =
                          g.sx == 1 ? irow + ox0 + base
                                    : phases.data() + phase_of(base) * phase_len + ox0 +
                                          phase_shift(base);
                      lane_dot_into<double>(lanes + 8 * kx, grow + ox0, ip, ox1 - ox0);
                    }
                  }
            for (int64_t kx = 0; kx < g.Kx; ++kx)
              gw[g.w_off(co, ci, ky, kz) + kx] += T(lane_reduce(lanes + 8 * kx));
          }
        }
      }
    });
    return;
  }
  parallel_for(g.Co, [&](int64_t co) {
    std::vector<double> acc(g.Ci * g.Kz * g.Ky * g.Kx, 0.0);
    double bacc = 0.0;
    for (int64_t n = 0; n < g.N; ++n) {
      for (int64_t oz = 0; oz < g.OZ; ++oz) {
        for (int64_t oy = 0; oy < g.OY; ++oy) {
          const T* grow = go + g.out_off(n, co, oy, oz);
          if (gb) bacc += lane_sum<double>(grow, g.OX);
          for (int64_t ci = 0; ci < g.Ci; ++ci) {
            for (int64_t kz = 0; kz < g.Kz; ++kz) {
              const int64_t iz = oz * g.sz + kz - g.pz;
              if (iz < 0 || iz >= g.Z) continue;
              for (int64_t ky = 0; ky < g.Ky; ++ky) {
                const int64_t iy = oy * g.sy + ky - g.py;
                if (iy < 0 || iy >= g.Y) continue;
                const T* irow = x + g.in_off(n, ci, iy, iz);
                double* arow = acc.data() + ((ci * g.Kz + kz) * g.Ky + ky) * g.Kx;
                for (int64_t kx = 0; kx < g.Kx; ++kx) {
                  int64_t ox0, ox1;
                  g.ox_range(kx, ox0, ox1);
                  if (ox1 <= ox0) continue;
                  arow[kx] += lane_dot_stride<double>(grow + ox0, irow + ox0 * g.sx + kx - g.px,
                                                      ox1 - ox0, g.sx);
                }
              }
            }
          }
        }
      }
    }
    for (int64_t ci = 0; ci < g.Ci; ++ci)
      for (int64_t kz = 0; kz < g.Kz; ++kz)
        for (int64_t ky = 0; ky < g.Ky; ++ky) {
          const double* arow = acc.data() + ((ci * g.Kz + kz) * g.Ky + ky) * g.Kx;
          T* wrow = gw + g.w_off(co, ci, ky, kz);
          for (int64_t kx = 0; kx < g.Kx; ++kx) wrow[kx] += T(arow[kx]);
        }
    if (gb) gb[co] += T(bacc);
  });
}

template <class T>
Tensor<T> conv3d_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                      const Stride3& stride, const Stride3& padding) {
  const ConvGeom g = conv_geom(x, w, stride, padding);
  if (bias)
    require(bias->shape() == Shape{g.Co}, "conv3d bias must have shape (" + std::to_string(g.Co) +
                                              "), got " + shape_str(bias->shape()));
  std::vector<std::shared_ptr<Node<T>>> parents{x.node(), w.node()};
  if (bias) parents.push_back(bias->node());
  auto xn = x.node();
  auto wn = w.node();
  auto bn = bias ? bias->node() : nullptr;
  Tensor<T> out = make_result<T>(
      {g.N, g.Co, g.OX, g.OY, g.OZ}, std::move(parents), [g, xn, wn, bn](Node<T>& self) {
        const T* go = self.grad.data();
        if (xn->requires_grad) {
          xn->ensure_grad();
          conv3d_backward_input<T>(g, wn->value.data(), go, xn->grad.data());
        }
        if (wn->requires_grad || (bn && bn->requires_grad)) {
          T* gw = nullptr;
          T* gb = nullptr;
          if (wn->requires_grad) {
            wn->ensure_grad();
            gw = wn->grad.data();
          }
          if (bn && bn->requires_grad) {
            bn->ensure_grad();
            gb = bn->grad.data();
          }
          if (gw)
            conv3d_backward_weight<T>(g, xn->value.data(), go, gw, gb);
          else if (gb)
            parallel_for(g.Co, [&](int64_t co) {
              double bacc = 0.0;
              for (int64_t n = 0; n < g.N; ++n)
                bacc += lane_sum<double>(go + g.out_off(n, co, 0, 0), g.OX * g.OY * g.OZ);
              gb[co] += T(bacc);
            });
        }
      });
  conv3d_forward<T>(g, x.data(), w.data(), bias ? bias->data() : nullptr, out.data());
  return out;
}

}  // namespace

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Stride3& stride,
                 const Stride3& padding) {
  return conv3d_impl(x, w, &b, stride, padding);
}

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Stride3& stride, const Stride3& padding) {
  return conv3d_impl(x, w, static_cast<const Tensor<T>*>(nullptr), stride, padding);
}

template <class T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& w, const Stride3& stride) {
  require(x.shape().size() == 5, "conv_transpose3d input must be rank 5, got " + shape_str(x.shape()));
  require(w.shape().size() == 5, "conv_transpose3d weight must be rank 5, got " + shape_str(w.shape()));
  const int64_t N = x.shape()[0], Ci = x.shape()[1], X = x.shape()[2], Y = x.shape()[3], Z = x.shape()[4];
  require(w.shape()[0] == Ci, "conv_transpose3d channel mismatch: input " + shape_str(x.shape()) +
                                  " weight " + shape_str(w.shape()));
  const int64_t Co = w.shape()[1];
  const int64_t Kx = w.shape()[2], Ky = w.shape()[3], Kz = w.shape()[4];
  require(stride[0] == Kx && stride[1] == Ky && stride[2] == Kz,
          "conv_transpose3d requires kernel == stride");
  const int64_t OX = X * Kx, OY = Y * Ky, OZ = Z * Kz;
  const auto in_off = [=](int64_t n, int64_t c, int64_t y, int64_t z) {
    return (((n * Ci + c) * Z + z) * Y + y) * X;
  };
  const auto out_off = [=](int64_t n, int64_t c, int64_t y, int64_t z) {
    return (((n * Co + c) * OZ + z) * OY + y) * OX;
  };
  const auto w_off = [=](int64_t ci, int64_t co, int64_t ky, int64_t kz) {
    return (((ci * Co + co) * Kz + kz) * Ky + ky) * Kx;
  };
  auto xn = x.node();
  auto wn = w.node();
  Tensor<T> out = make_result<T>(
      {N, Co, OX, OY, OZ}, {xn, wn}, [=](Node<T>& self) {
        const T* go = self.grad.data();
        if (xn->requires_grad) {
          xn->ensure_grad();
          T* gx = xn->grad.data();
          const T* wv = wn->value.data();
          parallel_for(N * Z, [&](int64_t t) {
            const int64_t n = t / Z;
            const int64_t iz = t % Z;
            for (int64_t iy = 0; iy < Y; ++iy) {
              for (int64_t ci = 0; ci < Ci; ++ci) {
                T* grow = gx + in_off(n, ci, iy, iz);
                for (int64_t co = 0; co < Co; ++co) {
                  for (int64_t kz = 0; kz < Kz; ++kz) {
                    for (int64_t ky = 0; ky < Ky; ++ky) {
                      const T* orow = go + out_off(n, co, iy * Ky + ky, iz * Kz + kz);
                      const T* wrow = wv + w_off(ci, co, ky, kz);
                      for (int64_t kx = 0; kx < Kx; ++kx) {
                        const T wgt = wrow[kx];
                        for (int64_t ix = 0; ix < X; ++ix) grow[ix] += wgt * orow[ix * Kx + kx];
                      }
                    }
                  }
                }
              }
            }
          });
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          T* gw = wn->grad.data();
          const T* xv = xn->value.data();
          parallel_for(Ci, [&](int64_t ci) {
            std::vector<double> acc(Co * Kz * Ky * Kx, 0.0);
            for (int64_t n = 0; n < N; ++n)
              for (int64_t iz = 0; iz < Z; ++iz)
                for (int64_t iy = 0; iy < Y; ++iy) {
                  const T* irow = xv + in_off(n, ci, iy, iz);
                  for (int64_t co = 0; co < Co; ++co)
                    for (int64_t kz = 0; kz < Kz; ++kz)
                      for (int64_t ky = 0; ky < Ky; ++ky) {
                        const T* orow = go + out_off(n, co, iy * Ky + ky, iz * Kz + kz);
                        double* arow = acc.data() + ((co * Kz + kz) * Ky + ky) * Kx;
                        for (int64_t kx = 0; kx < Kx; ++kx)
                          arow[kx] += lane_dot_stride<double>(irow, orow + kx, X, Kx);
                      }
                }
            for (int64_t co = 0; co < Co; ++co)
              for (int64_t kz = 0; kz < Kz; ++kz)
                for (int64_t ky = 0; ky < Ky; ++ky) {
                  const double* arow = acc.data() + ((co * Kz + kz) * Ky + ky) * Kx;
                  T* wrow = gw + w_off(ci, co, ky, kz);
                  for (int64_t kx = 0; kx < Kx; ++kx) wrow[kx] += T(arow[kx]);
                }
          });
        }
      });
  T* ov = out.data();
  const T* xv = x.data();
  const T* wv = w.data();
  parallel_for(N * OZ, [&](int64_t t) {
    const int64_t n = t / OZ;
    const int64_t oz = t % OZ;
    const int64_t iz = oz / Kz, kz = oz % Kz;
    for (int64_t oy = 0; oy < OY; ++oy) {
      const int64_t iy = oy / Ky, ky = oy % Ky;
      for (int64_t co = 0; co < Co; ++co) {
        T* orow = ov + out_off(n, co, oy, oz);
        for (int64_t ox = 0; ox < OX; ++ox) orow[ox] = T(0);
        for (int64_t ci = 0; ci < Ci; ++ci) {
          const T* irow = xv + in_off(n, ci, iy, iz);
          const T* wrow = wv + w_off(ci, co, ky, kz);
          for (int64_t kx = 0; kx < Kx; ++kx) {
            const T wgt = wrow[kx];
            for (int64_t ix = 0; ix < X; ++ix) orow[ix * Kx + kx] += wgt * irow[ix];
          }
        }
      }
    }
  });
  return out;
}

template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& offset, double eps) {
  require(x.shape().size() == 5, "instance_norm input must be rank 5, got " + shape_str(x.shape()));
  const int64_t N = x.shape()[0], C = x.shape()[1];
  const int64_t M = x.shape()[2] * x.shape()[3] * x.shape()[4];
  require(gain.shape() == Shape{C} && offset.shape() == Shape{C},
          "instance_norm gain/offset must have shape (" + std::to_string(C) + ")");
  auto xn = x.node();
  auto gn = gain.node();
  auto on = offset.node();
  auto means = std::make_shared<std::vector<double>>(N * C);
  auto istds = std::make_shared<std::vector<double>>(N * C);
  {
    const T* xv = x.data();
    parallel_for(N * C, [&](int64_t t) {
      const T* chunk = xv + t * M;
      const double mean = lane_sum<double>(chunk, M) / double(M);
      double lane[8] = {};
      int64_t i = 0;
      for (; i + 8 <= M; i += 8)
        for (int j = 0; j < 8; ++j) {
          const double d = double(chunk[i + j]) - mean;
          lane[j] += d * d;
        }
      for (; i < M; ++i) {
        const double d = double(chunk[i]) - mean;
        lane[i & 7] += d * d;
      }
      const double var = (((lane[0] + lane[1]) + (lane[2] + lane[3])) +
                          ((lane[4] + lane[5]) + (lane[6] + lane[7]))) /
                         double(M);
      (*means)[t] = mean;
      (*istds)[t] = 1.0 / std::sqrt(var + eps);
    });
  }
  Tensor<T> out = make_result<T>(
      x.shape(), {xn, gn, on}, [=](Node<T>& self) {
        const T* go = self.grad.data();
        const T* xv = xn->value.data();
        const T* gv = gn->value.data();
        std::vector<double> s1(N * C), s2(N * C);
        parallel_for(N * C, [&](int64_t t) {
          const T* gch = go + t * M;
          const T* xch = xv + t * M;
          const double mean = (*means)[t];
          const double istd = (*istds)[t];
          double l1[8] = {}, l2[8] = {};
          int64_t i = 0;
          for (; i + 8 <= M; i += 8)
            for (int j = 0; j < 8; ++j) {
              const double g = double(gch[i + j]);
              const double xh = (double(xch[i + j]) - mean) * istd;
              l1[j] += g;
              l2[j] += g * xh;
            }
          for (; i < M; ++i) {
            const double g = double(gch[i]);
            const double xh = (double(xch[i]) - mean) * istd;
            l1[i & 7] += g;
            l2[i & 7] += g * xh;
          }
          s1[t] = (((l1[0] + l1[1]) + (l1[2] + l1[3])) + ((l1[4] + l1[5]) + (l1[6] + l1[7])));
          s2[t] = (((l2[0] + l2[1]) + (l2[2] + l2[3])) + ((l2[4] + l2[5]) + (l2[6] + l2[7])));
        });
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) gn->grad[c] += T(s2[n * C + c]);
        }
        if (on->requires_grad) {
          on->ensure_grad();
          for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) on->grad[c] += T(s1[n * C + c]);
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          T* gx = xn->grad.data();
          parallel_for(N * C, [&](int64_t t) {
            const int64_t c = t % C;
            const T* gch = go + t * M;
            const T* xch = xv + t * M;
            T* och = gx + t * M;
            const double mean = (*means)[t];
            const double istd = (*istds)[t];
            const double a = double(gv[c]) * istd;
            const double m1 = s1[t] / double(M);
            const double m2 = s2[t] / double(M);
            for (int64_t i = 0; i < M; ++i) {
              const double xh = (double(xch[i]) - mean) * istd;
              och[i] += T(a * (double(gch[i]) - m1 - xh * m2));
            }
          });
        }
      });
  {
    T* ov = out.data();
    const T* xv = x.data();
    const T* gv = gain.data();
    const T* bv = offset.data();
    parallel_for(N * C, [&](int64_t t) {
      const int64_t c = t % C;
      const double mean = (*means)[t];
      const double a = double(gv[c]) * (*istds)[t];
      const double b = double(bv[c]);
      const T* xch = xv + t * M;
      T* och = ov + t * M;
      for (int64_t i = 0; i < M; ++i) och[i] = T((double(xch[i]) - mean) * a + b);
    });
  }
  return out;
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
  auto xn = x.node();
  const T s = T(slope);
  Tensor<T> out = make_result<T>(x.shape(), {xn}, [xn, s](Node<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = self.grad.data();
    const T* ov = self.value.data();
    T* gx = xn->grad.data();
    parallel_elems(int64_t(self.value.size()),
                   [&](int64_t i) { gx[i] += go[i] * (ov[i] > T(0) ? T(1) : s); });
  });
  const T* xv = x.data();
  T* ov = out.data();
  parallel_elems(x.numel(), [&](int64_t i) {
    const T v = xv[i];
    ov[i] = v > T(0) ? v : s * v;
  });
  return out;
}

template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  require(x.shape().size() >= 2, "softmax_channels input must have a channel axis");
  const int64_t N = x.shape()[0], C = x.shape()[1];
  int64_t S = 1;
  for (size_t i = 2; i < x.shape().size(); ++i) S *= x.shape()[i];
  auto xn = x.node();
  Tensor<T> out = make_result<T>(x.shape(), {xn}, [xn, N, C, S](Node<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = self.grad.data();
    const T* pv = self.value.data();
    T* gx = xn->grad.data();
    parallel_elems(N * S, [&](int64_t t) {
      const int64_t n = t / S;
      const int64_t s = t % S;
      const int64_t base = n * C * S + s;
      double dot = 0.0;
      for (int64_t c = 0; c < C; ++c) dot += double(pv[base + c * S]) * double(go[base + c * S]);
      for (int64_t c = 0; c < C; ++c) {
        const int64_t i = base + c * S;
        gx[i] += T(double(pv[i]) * (double(go[i]) - dot));
      }
    });
  });
  const T* xv = x.data();
  T* ov = out.data();
  parallel_elems(N * S, [&](int64_t t) {
    const int64_t n = t / S;
    const int64_t s = t % S;
    const int64_t base = n * C * S + s;
    double mx = double(xv[base]);
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, double(xv[base + c * S]));
    double denom = 0.0;
    for (int64_t c = 0; c < C; ++c) denom += std::exp(double(xv[base + c * S]) - mx);
    for (int64_t c = 0; c < C; ++c)
      ov[base + c * S] = T(std::exp(double(xv[base + c * S]) - mx) / denom);
  });
  return out;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape().size() == 5 && b.shape().size() == 5, "concat_channels expects rank-5 tensors");
  require(a.shape()[0] == b.shape()[0] && a.shape()[2] == b.shape()[2] &&
              a.shape()[3] == b.shape()[3] && a.shape()[4] == b.shape()[4],
          "concat_channels shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t N = a.shape()[0], Ca = a.shape()[1], Cb = b.shape()[1];
  const int64_t M = a.shape()[2] * a.shape()[3] * a.shape()[4];
  auto an = a.node();
  auto bn = b.node();
  Shape oshape = a.shape();
  oshape[1] = Ca + Cb;
  Tensor<T> out = make_result<T>(oshape, {an, bn}, [an, bn, N, Ca, Cb, M](Node<T>& self) {
    const T* go = self.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      T* ga = an->grad.data();
      parallel_elems(N * Ca * M, [&](int64_t i) {
        const int64_t n = i / (Ca * M);
        const int64_t r = i % (Ca * M);
        ga[i] += go[n * (Ca + Cb) * M + r];
      });
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      T* gb = bn->grad.data();
      parallel_elems(N * Cb * M, [&](int64_t i) {
        const int64_t n = i / (Cb * M);
        const int64_t r = i % (Cb * M);
        gb[i] += go[n * (Ca + Cb) * M + Ca * M + r];
      });
    }
  });
  T* ov = out.data();
  for (int64_t n = 0; n < N; ++n) {
    std::memcpy(ov + n * (Ca + Cb) * M, a.data() + n * Ca * M, sizeof(T) * Ca * M);
    std::memcpy(ov + n * (Ca + Cb) * M + Ca * M, b.data() + n * Cb * M, sizeof(T) * Cb * M);
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto an = a.node();
  auto bn = b.node();
  Tensor<T> out = make_result<T>(a.shape(), {an, bn}, [an, bn](Node<T>& self) {
    const T* go = self.grad.data();
    const int64_t n = int64_t(self.value.size());
    if (an->requires_grad) {
      an->ensure_grad();
      T* ga = an->grad.data();
      parallel_elems(n, [&](int64_t i) { ga[i] += go[i]; });
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      T* gb = bn->grad.data();
      parallel_elems(n, [&](int64_t i) { gb[i] += go[i]; });
    }
  });
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  parallel_elems(a.numel(), [&](int64_t i) { ov[i] = av[i] + bv[i]; });
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto an = a.node();
  auto bn = b.node();
  Tensor<T> out = make_result<T>(a.shape(), {an, bn}, [an, bn](Node<T>& self) {
    const T* go = self.grad.data();
    const int64_t n = int64_t(self.value.size());
    if (an->requires_grad) {
      an->ensure_grad();
      T* ga = an->grad.data();
      const T* bv = bn->value.data();
      parallel_elems(n, [&](int64_t i) { ga[i] += go[i] * bv[i]; });
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      T* gb = bn->grad.data();
      const T* av = an->value.data();
      parallel_elems(n, [&](int64_t i) { gb[i] += go[i] * av[i]; });
    }
  });
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  parallel_elems(a.numel(), [&](int64_t i) { ov[i] = av[i] * bv[i]; });
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, double s) {
  auto xn = x.node();
  const T sv = T(s);
  Tensor<T> out = make_result<T>(x.shape(), {xn}, [xn, sv](Node<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = self.grad.data();
    T* gx = xn->grad.data();
    parallel_elems(int64_t(self.value.size()), [&](int64_t i) { gx[i] += sv * go[i]; });
  });
  const T* xv = x.data();
  T* ov = out.data();
  parallel_elems(x.numel(), [&](int64_t i) { ov[i] = sv * xv[i]; });
  return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto xn = x.node();
  const int64_t n = x.numel();
  Tensor<T> out = make_result<T>({1}, {xn}, [xn, n](Node<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T g = self.grad[0];
    T* gx = xn->grad.data();
    parallel_elems(n, [&](int64_t i) { gx[i] += g; });
  });
  out.value()[0] = T(lane_sum<double>(x.data(), n));
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  auto xn = x.node();
  const int64_t n = x.numel();
  Tensor<T> out = make_result<T>({1}, {xn}, [xn, n](Node<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T g = T(double(self.grad[0]) / double(n));
    T* gx = xn->grad.data();
    parallel_elems(n, [&](int64_t i) { gx[i] += g; });
  });
  out.value()[0] = T(lane_sum<double>(x.data(), n) / double(n));
  return out;
}

template <class T>
Tensor<T> generalized_dice_loss(const Tensor<T>& probs, const Tensor<T>& reference, double eps) {
  require(probs.shape() == reference.shape(), "dice loss shape mismatch: " + shape_str(probs.shape()) +
                                                  " vs " + shape_str(reference.shape()));
  require(probs.shape().size() >= 2, "dice loss input must have a channel axis");
  const int64_t N = probs.shape()[0], C = probs.shape()[1];
  int64_t S = 1;
  for (size_t i = 2; i < probs.shape().size(); ++i) S *= probs.shape()[i];
  auto pn = probs.node();
  auto rn = reference.node();

  // Per-class sums, batch-major order fixed; classes then combined by value.
  std::vector<double> inter(C, 0.0), mass(C, 0.0);
  {
    const T* pv = probs.data();
    const T* rv = reference.data();
    std::vector<double> in_nc(N * C), ms_nc(N * C);
    parallel_for(N * C, [&](int64_t t) {
      const T* pch = pv + t * S;
      const T* rch = rv + t * S;
      in_nc[t] = lane_dot<double>(pch, rch, S);
      ms_nc[t] = lane_sum<double>(pch, S) + lane_sum<double>(rch, S);
    });
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        inter[c] += in_nc[n * C + c];
        mass[c] += ms_nc[n * C + c];
      }
  }
  std::vector<double> si = inter, sm = mass;
  std::sort(si.begin(), si.end());
  std::sort(sm.begin(), sm.end());
  double itot = 0.0, mtot = 0.0;
  for (double v : si) itot += v;
  for (double v : sm) mtot += v;
  const double num = 2.0 * itot + eps;
  const double den = mtot + eps;

  Tensor<T> out = make_result<T>({1}, {pn, rn}, [pn, rn, num, den](Node<T>& self) {
    const double go = double(self.grad[0]);
    const double inv2 = 1.0 / (den * den);
    const int64_t n = int64_t(pn->value.size());
    if (pn->requires_grad) {
      pn->ensure_grad();
      T* gp = pn->grad.data();
      const T* rv = rn->value.data();
      parallel_elems(n, [&](int64_t i) {
        gp[i] += T(go * (num - 2.0 * double(rv[i]) * den) * inv2);
      });
    }
    if (rn->requires_grad) {
      rn->ensure_grad();
      T* gr = rn->grad.data();
      const T* pv = pn->value.data();
      parallel_elems(n, [&](int64_t i) {
        gr[i] += T(go * (num - 2.0 * double(pv[i]) * den) * inv2);
      });
    }
  });
  out.value()[0] = T(1.0 - num / den);
  return out;
}

#define SEG3D_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                               const Stride3&, const Stride3&);                                    \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Stride3&, const Stride3&); \
  template Tensor<T> conv_transpose3d<T>(const Tensor<T>&, const Tensor<T>&, const Stride3&);      \
  template Tensor<T> instance_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, double);                                      \
  template Tensor<T> softmax_channels<T>(const Tensor<T>&);                                        \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale<T>(const Tensor<T>&, double);                                           \
  template Tensor<T> sum_all<T>(const Tensor<T>&);                                                 \
  template Tensor<T> mean_all<T>(const Tensor<T>&);                                                \
  template Tensor<T> generalized_dice_loss<T>(const Tensor<T>&, const Tensor<T>&, double);

SEG3D_INSTANTIATE_OPS(float)
SEG3D_INSTANTIATE_OPS(double)
#undef SEG3D_INSTANTIATE_OPS

}  // namespace seg3d
