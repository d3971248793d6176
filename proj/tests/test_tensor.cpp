#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "doctest.h"
#include "grad_suite.hpp"
#include "seg3d/ops.hpp"
#include "test_util.hpp"

using namespace seg3d;
using namespace testutil;

namespace {

size_t off5(const Shape& s, int64_t n, int64_t c, int64_t x, int64_t y, int64_t z) {
  return size_t((((n * s[1] + c) * s[4] + z) * s[3] + y) * s[2] + x);
}

// Brute-force direct convolution in double, no clever ordering.
std::vector<double> conv_ref(const Tensor<double>& x, const Tensor<double>& w,
                             const std::vector<double>* bias, const Stride3& st, const Stride3& pd,
                             Shape& os) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const int64_t N = xs[0], Ci = xs[1], X = xs[2], Y = xs[3], Z = xs[4];
  const int64_t Co = ws[0], Kx = ws[2], Ky = ws[3], Kz = ws[4];
  os = {N, Co, (X + 2 * pd[0] - Kx) / st[0] + 1, (Y + 2 * pd[1] - Ky) / st[1] + 1,
        (Z + 2 * pd[2] - Kz) / st[2] + 1};
  std::vector<double> out(size_t(shape_numel(os)), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t oz = 0; oz < os[4]; ++oz)
        for (int64_t oy = 0; oy < os[3]; ++oy)
          for (int64_t ox = 0; ox < os[2]; ++ox) {
            double acc = bias ? (*bias)[size_t(co)] : 0.0;
            for (int64_t ci = 0; ci < Ci; ++ci)
              for (int64_t kz = 0; kz < Kz; ++kz)
                for (int64_t ky = 0; ky < Ky; ++ky)
                  for (int64_t kx = 0; kx < Kx; ++kx) {
                    const int64_t ix = ox * st[0] + kx - pd[0];
                    const int64_t iy = oy * st[1] + ky - pd[1];
                    const int64_t iz = oz * st[2] + kz - pd[2];
                    if (ix < 0 || ix >= X || iy < 0 || iy >= Y || iz < 0 || iz >= Z) continue;
                    acc += x.value()[off5(xs, n, ci, ix, iy, iz)] *
                           w.value()[off5(ws, co, ci, kx, ky, kz)];
                  }
            out[off5(os, n, co, ox, oy, oz)] = acc;
          }
  return out;
}

std::vector<double> conv_transpose_ref(const Tensor<double>& x, const Tensor<double>& w, Shape& os) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const int64_t N = xs[0], Ci = xs[1], X = xs[2], Y = xs[3], Z = xs[4];
  const int64_t Co = ws[1], Kx = ws[2], Ky = ws[3], Kz = ws[4];
  os = {N, Co, X * Kx, Y * Ky, Z * Kz};
  std::vector<double> out(size_t(shape_numel(os)), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t ci = 0; ci < Ci; ++ci)
      for (int64_t iz = 0; iz < Z; ++iz)
        for (int64_t iy = 0; iy < Y; ++iy)
          for (int64_t ix = 0; ix < X; ++ix)
            for (int64_t co = 0; co < Co; ++co)
              for (int64_t kz = 0; kz < Kz; ++kz)
                for (int64_t ky = 0; ky < Ky; ++ky)
                  for (int64_t kx = 0; kx < Kx; ++kx)
                    out[off5(os, n, co, ix * Kx + kx, iy * Ky + ky, iz * Kz + kz)] +=
                        x.value()[off5(xs, n, ci, ix, iy, iz)] *
                        w.value()[off5(ws, ci, co, kx, ky, kz)];
  return out;
}

void expect_close(const std::vector<double>& got, const std::vector<double>& want, double tol) {
  REQUIRE(got.size() == want.size());
  double worst = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    const double err = std::abs(got[i] - want[i]) /
                       std::max({std::abs(got[i]), std::abs(want[i]), 1.0});
    worst = std::max(worst, err);
  }
  CHECK(worst < tol);
}

}  // namespace

TEST_CASE("conv3d forward matches brute-force reference") {
  for (int s = 0; s < 12; ++s) {
    Rng r(seed_combine(101, uint64_t(s)));
    const int64_t N = 1 + r.below(2), Ci = 1 + r.below(3), Co = 1 + r.below(3);
    Stride3 st, pd;
    Shape ks{0, 0, 0}, xs{N, Ci, 0, 0, 0};
    for (int a = 0; a < 3; ++a) {
      ks[a] = 1 + r.below(3);
      st[a] = 1 + r.below(2);
      pd[a] = r.below(ks[a]);
      xs[2 + a] = ks[a] + r.below(6);
    }
    const bool bias = s % 2 == 0;
    Tensor<double> x = rand_tensor(xs, r, false);
    Tensor<double> w = rand_tensor({Co, Ci, ks[0], ks[1], ks[2]}, r, false);
    Tensor<double> b = rand_tensor({Co}, r, false);
    Shape os;
    const std::vector<double> want =
        conv_ref(x, w, bias ? &b.value() : nullptr, st, pd, os);
    Tensor<double> got = bias ? conv3d(x, w, b, st, pd) : conv3d(x, w, st, pd);
    REQUIRE(got.shape() == os);
    expect_close(got.value(), want, 1e-12);
  }
}

TEST_CASE("conv_transpose3d forward matches brute-force reference") {
  for (int s = 0; s < 10; ++s) {
    Rng r(seed_combine(202, uint64_t(s)));
    const int64_t N = 1 + r.below(2), Ci = 1 + r.below(3), Co = 1 + r.below(3);
    Stride3 st;
    Shape xs{N, Ci, 0, 0, 0};
    for (int a = 0; a < 3; ++a) {
      st[a] = 1 + r.below(3);
      xs[2 + a] = 1 + r.below(4);
    }
    Tensor<double> x = rand_tensor(xs, r, false);
    Tensor<double> w = rand_tensor({Ci, Co, st[0], st[1], st[2]}, r, false);
    Shape os;
    const std::vector<double> want = conv_transpose_ref(x, w, os);
    Tensor<double> got = conv_transpose3d(x, w, st);
    REQUIRE(got.shape() == os);
    expect_close(got.value(), want, 1e-12);
  }
}

TEST_CASE("instance_norm forward matches direct formula") {
  Rng r(303);
  const int64_t N = 2, C = 3, X = 4, Y = 3, Z = 5, M = X * Y * Z;
  Tensor<double> x = rand_tensor({N, C, X, Y, Z}, r, false, 2.0);
  Tensor<double> gain = rand_tensor({C}, r, false);
  Tensor<double> offset = rand_tensor({C}, r, false);
  Tensor<double> out = instance_norm(x, gain, offset);
  std::vector<double> want(x.value().size());
  for (int64_t t = 0; t < N * C; ++t) {
    const double* ch = x.data() + t * M;
    double mean = 0.0;
    for (int64_t i = 0; i < M; ++i) mean += ch[i];
    mean /= double(M);
    double var = 0.0;
    for (int64_t i = 0; i < M; ++i) var += (ch[i] - mean) * (ch[i] - mean);
    var /= double(M);
    const double istd = 1.0 / std::sqrt(var + 1e-5);
    for (int64_t i = 0; i < M; ++i)
      want[size_t(t * M + i)] = (ch[i] - mean) * istd * gain.value()[size_t(t % C)] +
                                offset.value()[size_t(t % C)];
  }
  expect_close(out.value(), want, 1e-12);
}

TEST_CASE("instance_norm output has zero mean and unit variance per channel") {
  Rng r(304);
  const int64_t C = 4, M = 6 * 5 * 7;
  Tensor<double> x = rand_tensor({1, C, 6, 5, 7}, r, false, 3.0);
  Tensor<double> gain = Tensor<double>::full({C}, 1.0);
  Tensor<double> offset = Tensor<double>::zeros({C});
  Tensor<double> out = instance_norm(x, gain, offset);
  for (int64_t c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    for (int64_t i = 0; i < M; ++i) mean += out.value()[size_t(c * M + i)];
    mean /= double(M);
    for (int64_t i = 0; i < M; ++i) {
      const double d = out.value()[size_t(c * M + i)] - mean;
      var += d * d;
    }
    var /= double(M);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(var - 1.0) < 1e-4);  // eps shrinks variance slightly
  }
}

TEST_CASE("softmax_channels normalizes and matches direct formula") {
  Rng r(305);
  const int64_t N = 2, C = 4, S = 3 * 2 * 5;
  Tensor<double> x = rand_tensor({N, C, 3, 2, 5}, r, false, 3.0);
  Tensor<double> out = softmax_channels(x);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t s = 0; s < S; ++s) {
      double denom = 0.0;
      for (int64_t c = 0; c < C; ++c) denom += std::exp(x.value()[size_t((n * C + c) * S + s)]);
      double total = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        const double want = std::exp(x.value()[size_t((n * C + c) * S + s)]) / denom;
        const double got = out.value()[size_t((n * C + c) * S + s)];
        CHECK(std::abs(got - want) < 1e-12);
        total += got;
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
}

TEST_CASE("generalized_dice_loss matches direct formula") {
  Rng r(306);
  const int64_t N = 2, C = 3, S = 4 * 3 * 2;
  Tensor<double> p = Tensor<double>::zeros({N, C, 4, 3, 2});
  Tensor<double> ref = Tensor<double>::zeros({N, C, 4, 3, 2});
  for (auto& v : p.value()) v = r.u01();
  for (auto& v : ref.value()) v = r.below(2) ? 1.0 : 0.0;
  double inter = 0.0, mass = 0.0;
  for (size_t i = 0; i < p.value().size(); ++i) {
    inter += p.value()[i] * ref.value()[i];
    mass += p.value()[i] + ref.value()[i];
  }
  const double want = 1.0 - (2.0 * inter + 1e-5) / (mass + 1e-5);
  Tensor<double> loss = generalized_dice_loss(p, ref);
  (void)N;
  (void)C;
  (void)S;
  CHECK(std::abs(loss.value()[0] - want) < 1e-12);
}

TEST_CASE("elementwise ops and reductions") {
  Rng r(307);
  Tensor<double> a = rand_tensor({2, 3, 2, 2, 2}, r, false);
  Tensor<double> b = rand_tensor({2, 3, 2, 2, 2}, r, false);
  Tensor<double> s = add(a, b);
  Tensor<double> m = mul(a, b);
  Tensor<double> sc = scale(a, -2.5);
  double total = 0.0;
  for (size_t i = 0; i < a.value().size(); ++i) {
    CHECK(s.value()[i] == a.value()[i] + b.value()[i]);
    CHECK(m.value()[i] == a.value()[i] * b.value()[i]);
    CHECK(sc.value()[i] == -2.5 * a.value()[i]);
    total += a.value()[i];
  }
  CHECK(std::abs(sum_all(a).value()[0] - total) < 1e-12);
  CHECK(std::abs(mean_all(a).value()[0] - total / double(a.numel())) < 1e-12);
  CHECK_THROWS_AS(add(a, rand_tensor({1, 3, 2, 2, 2}, r, false)), RunError);
}

TEST_CASE("concat_channels lays blocks out per sample and routes gradients") {
  Rng r(308);
  const int64_t N = 2, Ca = 2, Cb = 3, M = 2 * 3 * 2;
  Tensor<double> a = rand_tensor({N, Ca, 2, 3, 2}, r, true);
  Tensor<double> b = rand_tensor({N, Cb, 2, 3, 2}, r, true);
  Tensor<double> cat = concat_channels(a, b);
  REQUIRE(cat.shape() == Shape{N, Ca + Cb, 2, 3, 2});
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t i = 0; i < Ca * M; ++i)
      CHECK(cat.value()[size_t(n * (Ca + Cb) * M + i)] == a.value()[size_t(n * Ca * M + i)]);
    for (int64_t i = 0; i < Cb * M; ++i)
      CHECK(cat.value()[size_t(n * (Ca + Cb) * M + Ca * M + i)] ==
            b.value()[size_t(n * Cb * M + i)]);
  }
  const uint64_t ps = r.raw();
  auto build = [=]() { return probe_reduce(concat_channels(a, b), ps); };
  GradCheck gc = check_gradients(build, {a, b}, 1);
  CHECK(gc.max_rel_err < 1e-8);
}

TEST_CASE("graph reuse accumulates gradients through shared nodes") {
  Tensor<double> x = Tensor<double>::from({3}, {1.0, -2.0, 3.0}, true);
  x.grad();
  backward(sum_all(add(x, x)));
  for (double g : x.grad()) CHECK(g == 2.0);

  Tensor<double> y = Tensor<double>::from({3}, {1.0, -2.0, 3.0}, true);
  y.grad();
  backward(sum_all(mul(y, y)));
  CHECK(y.grad()[0] == 2.0);
  CHECK(y.grad()[1] == -4.0);
  CHECK(y.grad()[2] == 6.0);

  // diamond: two consumers of one intermediate
  Tensor<double> z = Tensor<double>::from({2}, {1.0, 2.0}, true);
  z.grad();
  Tensor<double> u = scale(z, 2.0);
  backward(sum_all(add(u, u)));
  for (double g : z.grad()) CHECK(g == 4.0);
}

TEST_CASE("gradients accumulate across separate graphs until cleared") {
  Tensor<double> x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  x.grad();
  backward(sum_all(x));
  backward(sum_all(scale(x, 3.0)));
  for (double g : x.grad()) CHECK(g == 4.0);
  x.zero_grad();
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("inference graphs carry no tape and backward rejects bad roots") {
  Rng r(309);
  Tensor<double> x = rand_tensor({1, 2, 3, 3, 3}, r, false);
  Tensor<double> w = rand_tensor({2, 2, 3, 3, 3}, r, false);
  Tensor<double> y = conv3d(x, w, Stride3{1, 1, 1}, Stride3{1, 1, 1});
  CHECK(!y.requires_grad());
  CHECK(y.node()->parents.empty());
  CHECK(!y.node()->backprop);
  CHECK_THROWS_AS(backward(sum_all(y)), RunError);      // no grad anywhere
  Tensor<double> xg = rand_tensor({4}, r, true);
  CHECK_THROWS_AS(backward(scale(xg, 1.0)), RunError);  // non-scalar root
  CHECK_THROWS_AS(backward(Tensor<double>()), RunError);
}

TEST_CASE("backward releases intermediate buffers unless asked not to") {
  Tensor<double> x = Tensor<double>::from({3}, {1.0, 2.0, 3.0}, true);
  Tensor<double> mid = scale(x, 2.0);
  backward(sum_all(mid));
  CHECK(mid.value().empty());
  CHECK(x.grad()[0] == 2.0);

  Tensor<double> x2 = Tensor<double>::from({3}, {1.0, 2.0, 3.0}, true);
  Tensor<double> mid2 = scale(x2, 2.0);
  backward(sum_all(mid2), false);
  REQUIRE(mid2.value().size() == 3);
  CHECK(mid2.value()[1] == 4.0);
}

TEST_CASE("conv input validation") {
  Rng r(310);
  Tensor<double> x = rand_tensor({1, 2, 4, 4, 4}, r, false);
  Tensor<double> w_bad = rand_tensor({2, 3, 3, 3, 3}, r, false);
  CHECK_THROWS_AS(conv3d(x, w_bad, Stride3{1, 1, 1}, Stride3{1, 1, 1}), RunError);
  Tensor<double> wt = rand_tensor({2, 2, 2, 2, 2}, r, false);
  CHECK_THROWS_AS(conv_transpose3d(x, wt, Stride3{2, 2, 3}), RunError);
  Tensor<double> small = rand_tensor({1, 2, 2, 2, 2}, r, false);
  Tensor<double> w3 = rand_tensor({2, 2, 3, 3, 3}, r, false);
  CHECK_THROWS_AS(conv3d(small, w3, Stride3{1, 1, 1}, Stride3{0, 0, 0}), RunError);
}

TEST_CASE("finite-difference gradients: conv3d") {
  SuiteResult res = grad_suite_conv3d(8, 401);
  CHECK(res.max_rel_err < 1e-4);
  CHECK(res.shapes == 8);
}

TEST_CASE("finite-difference gradients: conv_transpose3d") {
  SuiteResult res = grad_suite_conv_transpose3d(8, 402);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("finite-difference gradients: instance_norm") {
  SuiteResult res = grad_suite_instance_norm(8, 403);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("finite-difference gradients: leaky_relu") {
  SuiteResult res = grad_suite_leaky_relu(8, 404);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("finite-difference gradients: softmax_channels") {
  SuiteResult res = grad_suite_softmax(8, 405);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("finite-difference gradients: generalized_dice_loss") {
  SuiteResult res = grad_suite_dice(8, 406);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("finite-difference gradients: deep-supervision loss") {
  SuiteResult res = grad_suite_supervised(4, 407);
  CHECK(res.max_rel_err < 1e-4);
}

#ifdef _OPENMP
TEST_CASE("results are bit-identical across thread counts") {
  const int saved = omp_get_max_threads();
  auto run = [](int threads) {
    omp_set_num_threads(threads);
    Rng r(500);
    Tensor<float> x = Tensor<float>::zeros({2, 3, 12, 11, 10}, true);
    Tensor<float> w = Tensor<float>::zeros({4, 3, 3, 3, 3}, true);
    for (auto& v : x.value()) v = float(r.normal());
    for (auto& v : w.value()) v = float(r.normal());
    x.grad();
    w.grad();
    Tensor<float> gain = Tensor<float>::full({4}, 1.0f);
    Tensor<float> offset = Tensor<float>::zeros({4});
    gain.set_requires_grad(true);
    offset.set_requires_grad(true);
    gain.grad();
    offset.grad();
    Tensor<float> h = conv3d(x, w, Stride3{1, 1, 1}, Stride3{1, 1, 1});
    h = leaky_relu(instance_norm(h, gain, offset));
    backward(mean_all(h));
    std::vector<std::vector<float>> out{x.grad(), w.grad(), gain.grad(), offset.grad()};
    return out;
  };
  const auto a = run(1);
  const auto b = run(3);
  omp_set_num_threads(saved);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].size() == b[i].size());
    for (size_t j = 0; j < a[i].size(); ++j) CHECK(a[i][j] == b[i][j]);
  }
}
#endif
