// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "kvshare/rope.hpp"
#include "test_util.hpp"

using namespace kvshare;

namespace {

// Independent rotation: pair j of a row at position p turns by p * base^(-2j/D).
Tensor rotate(const Tensor& x, std::size_t p, double base = 10000.0) {
  const std::size_t d = x.size();
  Tensor out({d});
  for (std::size_t j = 0; j < d / 2; ++j) {
    const double a = static_cast<double>(p) * std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
    out[2 * j] = x[2 * j] * std::cos(a) - x[2 * j + 1] * std::sin(a);
    out[2 * j + 1] = x[2 * j] * std::sin(a) + x[2 * j + 1] * std::cos(a);
  }
  return out;
}

double weighted_dot(const Tensor& q, const Tensor& k, const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * w[i] * k[i];
  return s;
}

}  // namespace

TEST_CASE("schedule angles") {
  const RopeSchedule s(8);
  CHECK(s.pairs() == 4);
  CHECK(s.angle(0) == 1.0);
  CHECK(s.angle(1) == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(s.angle(3) == doctest::Approx(1e-3).epsilon(1e-14));
  CHECK_THROWS(RopeSchedule(3));
  CHECK_THROWS(RopeSchedule(0));
}

TEST_CASE("D=2 rotation by one radian") {
  const RopeSchedule s(2);
  const Tensor x = Tensor::matrix(1, 2, {1.0, 0.0});
  const std::vector<std::size_t> pos = {1};
  const Tensor y = apply_rope(x, pos, s);
  CHECK(y[0] == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
}

TEST_CASE("apply_rope matches an independent rotation on multi-head input") {
  std::mt19937_64 rng(4);
  const std::size_t d = 16;
  const RopeSchedule s(d);
  const Tensor x = kvtest::random_tensor({3, 5, d}, rng);
  const std::vector<std::size_t> pos = {0, 3, 17, 400, 9999};
  const Tensor y = apply_rope(x, pos, s);
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t r = 0; r < 5; ++r) {
      Tensor row({d});
      for (std::size_t e = 0; e < d; ++e) row[e] = x.at({h, r, e});
      const Tensor expect = rotate(row, pos[r]);
      for (std::size_t e = 0; e < d; ++e) CHECK(std::abs(y.at({h, r, e}) - expect[e]) < 1e-12);
    }
}

TEST_CASE("scores against the independent rotation") {
  std::mt19937_64 rng(8);
  const std::size_t d = 12;
  const RopeSchedule s(d);
  for (int t = 0; t < 50; ++t) {
    const Tensor q = kvtest::random_tensor({d}, rng), k = kvtest::random_tensor({d}, rng),
                 w = kvtest::random_tensor({d}, rng);
    const std::size_t m = 7 * t, n = 3 * t + 1;
    const double expect = weighted_dot(rotate(q, m), rotate(k, n), w.values());
    CHECK(std::abs(score_direct(q, k, m, n, w.data(), s) - expect) < 1e-12);
    CHECK(std::abs(score_decomposed(q, k, m, n, w.data(), s) - expect) < 1e-10);
  }
}

TEST_CASE("unit weights give the standard relative score") {
  const RopeSchedule s(2);
  const Tensor q = Tensor::vector({1.0, 0.0}), k = Tensor::vector({1.0, 0.0});
  const std::vector<double> ones = {1.0, 1.0};
  // q rotated by m against k rotated by n: cos(m - n).
  CHECK(score_direct(q, k, 5, 2, ones, s) == doctest::Approx(std::cos(3.0)).epsilon(1e-14));
  CHECK(score_direct(q, k, 105, 102, ones, s) == doctest::Approx(std::cos(3.0)).epsilon(1e-12));
}

TEST_CASE("pinned asymmetric counterexample breaks shift invariance") {
  const RopeSchedule s(2);
  const Tensor e1 = Tensor::vector({1.0, 0.0});
  const std::vector<double> w = {1.0, 0.0};
  const double a = score_direct(e1, e1, 0, 0, w, s);
  const double b = score_direct(e1, e1, 1, 1, w, s);
  CHECK(a == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(b == doctest::Approx(std::cos(1.0) * std::cos(1.0)).epsilon(1e-15));
  CHECK(std::abs(a - b) > 1e-3);
}

TEST_CASE("property: pair-symmetric weights are shift invariant") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> pos(0, 5000);
  for (int t = 0; t < 200; ++t) {
    const std::size_t d = 2 + 2 * static_cast<std::size_t>(t % 16);
    const RopeSchedule s(d);
    const PairSymmetricWeight w(kvtest::random_tensor({d / 2}, rng));
    const Tensor q = kvtest::random_tensor({d}, rng), k = kvtest::random_tensor({d}, rng);
    const std::size_t m = pos(rng), n = pos(rng), delta = pos(rng);
    const Tensor we = w.expanded();
    CHECK(std::abs(score_direct(q, k, m, n, we.data(), s) - score_direct(q, k, m + delta, n + delta, we.data(), s)) <
          1e-10);
  }
}

TEST_CASE("pair-symmetric weight expands pairwise") {
  const PairSymmetricWeight w(Tensor::vector({2.0, -1.0}));
  CHECK(w.head_dim() == 4);
  CHECK(w.expanded().values() == std::vector<double>{2.0, 2.0, -1.0, -1.0});
  CHECK(PairSymmetricWeight::ones(6).expanded().values() == std::vector<double>(6, 1.0));
}

TEST_CASE("property: fused key score is linear in the sources") {
  std::mt19937_64 rng(33);
  const std::size_t d = 10;
  const RopeSchedule s(d);
  for (int t = 0; t < 100; ++t) {
    const Tensor q = kvtest::random_tensor({d}, rng);
    std::vector<Tensor> keys = {kvtest::random_tensor({d}, rng), kvtest::random_tensor({d}, rng)};
    std::vector<PairSymmetricWeight> ws = {PairSymmetricWeight(kvtest::random_tensor({d / 2}, rng)),
                                           PairSymmetricWeight(kvtest::random_tensor({d / 2}, rng))};
    const std::size_t m = 11 * t, n = 5 * t;
    // Oracle: rotate each key, weight, add, and dot with the rotated query.
    Tensor fused({d});
    for (int i = 0; i < 2; ++i) {
      const Tensor rk = rotate(keys[i], n), we = ws[i].expanded();
      for (std::size_t e = 0; e < d; ++e) fused[e] += we[e] * rk[e];
    }
    const double expect = weighted_dot(rotate(q, m), fused, std::vector<double>(d, 1.0));
    CHECK(std::abs(fused_key_score(q, keys, m, n, ws, s) - expect) < 1e-12);
  }
}

TEST_CASE("differentiable rope matches values and has inverse-rotation gradient") {
  std::mt19937_64 rng(6);
  const std::size_t d = 8;
  const RopeSchedule s(d);
  const Tensor x = kvtest::random_tensor({2, 4, d}, rng), r = kvtest::random_tensor({2, 4, d}, rng);
  const std::vector<std::size_t> pos = {2, 9, 40, 41};
  Tape tape;
  const Var xv = tape.leaf(x, true);
  const Var y = apply_rope(xv, pos, s);
  CHECK(y.value() == apply_rope(x, pos, s));
  auto f = [&](Tape& t, std::span<const Var> p) { return sum(mul(apply_rope(p[0], pos, s), t.leaf(r))); };
  const auto g = gradients(f, {x});
  const auto numeric = kvtest::numeric_gradient(
      [&](const std::vector<double>& v) {
        const Tensor yv = apply_rope(Tensor(x.shape(), v), pos, s);
        double t = 0.0;
        for (std::size_t i = 0; i < yv.size(); ++i) t += yv[i] * r[i];
        return t;
      },
      x.values());
  CHECK(kvtest::max_relative_error(g[0].values(), numeric) < 1e-7);
}
