#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace seg3d {

// Malformed or inconsistent input data (maps to CLI exit code 2).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Runtime/system failure: I/O, non-finite loss, ... (maps to CLI exit code 3).
struct RunError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Index3 = std::array<int64_t, 3>;

// Physical voxel size in millimeters along x, y, z.
struct Spacing {
  std::array<double, 3> mm{1.0, 1.0, 1.0};

  double operator[](size_t i) const { return mm[i]; }
  double& operator[](size_t i) { return mm[i]; }

  bool valid() const {
    for (double s : mm)
      if (!(std::isfinite(s) && s > 0.0)) return false;
    return true;
  }
  bool operator==(const Spacing&) const = default;
};

inline int64_t round_half_up(double x) {
  return static_cast<int64_t>(std::floor(x + 0.5));
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Order-sensitive seed derivation; used to give every stochastic unit of work
// (patch, augmentation, noise slice) its own independent stream.
inline uint64_t seed_combine(uint64_t a, uint64_t b) {
  return splitmix64(a ^ (0x9e3779b97f4a7c15ull + splitmix64(b)));
}

// mt19937_64 with hand-rolled distributions so the draw sequence is pinned by
// this code alone, not by the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t raw() { return eng_(); }

  // uniform in [0, 1)
  double u01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  // uniform integer in [0, n); modulo bias is ~2^-53 and irrelevant here
  int64_t below(int64_t n) { return static_cast<int64_t>(eng_() % static_cast<uint64_t>(n)); }

  // standard normal via Box-Muller; consumes two draws per call
  double normal() {
    double u1 = u01();
    double u2 = u01();
    while (u1 <= 0.0) u1 = u01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

 private:
  std::mt19937_64 eng_;
};

// Fixed-order 8-lane reduction: deterministic for a given length regardless of
// vectorization, and fast enough for the hot paths.
template <class Acc, class T>
inline Acc lane_sum(const T* p, int64_t n) {
  Acc acc[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) acc[j] += static_cast<Acc>(p[i + j]);
  for (int j = 0; i + j < n; ++j) acc[j] += static_cast<Acc>(p[i + j]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <class Acc, class T>
inline Acc lane_dot(const T* a, const T* b, int64_t n) {
  Acc acc[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) acc[j] += static_cast<Acc>(a[i + j]) * static_cast<Acc>(b[i + j]);
  for (int j = 0; i + j < n; ++j) acc[j] += static_cast<Acc>(a[i + j]) * static_cast<Acc>(b[i + j]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// Static-schedule parallel loop. Every index writes disjoint outputs and runs
// a fixed-order inner reduction, so results do not depend on the thread count.
template <class F>
inline void parallel_for(int64_t n, F&& f) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) f(i);
}

}  // namespace seg3d
