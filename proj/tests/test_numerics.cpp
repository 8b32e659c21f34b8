// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "kvshare/autodiff.hpp"
#include "kvshare/tensor.hpp"
#include "test_util.hpp"

using namespace kvshare;

TEST_CASE("matmul of 2x3 by 3x2") {
  const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::matrix(3, 2, {7, 8, 9, 10, 11, 12});
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.values() == std::vector<double>{58, 64, 139, 154});
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
}

TEST_CASE("transpose swaps axes") {
  const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(transpose(a).values() == std::vector<double>{1, 4, 2, 5, 3, 6});
}

TEST_CASE("causal softmax on a 3x3 example") {
  const Tensor s = Tensor::matrix(3, 3, {0, 9, 9, 0, std::log(3.0), 9, 1, 1, 1});
  const Tensor p = softmax_causal(s, 1.0);
  CHECK(p.at({0, 0}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(p.at({0, 1}) == 0.0);
  CHECK(p.at({0, 2}) == 0.0);
  CHECK(p.at({1, 0}) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(p.at({1, 1}) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(p.at({1, 2}) == 0.0);
  for (std::size_t c = 0; c < 3; ++c) CHECK(p.at({2, c}) == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("causal softmax rows sum to one and ignore the future") {
  std::mt19937_64 rng(3);
  const Tensor s = kvtest::random_tensor({9, 9}, rng, 5.0);
  const Tensor p = softmax_causal(s, 0.7);
  for (std::size_t r = 0; r < 9; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      if (c > r) CHECK(p.at({r, c}) == 0.0);
      total += p.at({r, c});
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  Tensor changed = s;
  changed.at({2, 7}) += 100.0;
  CHECK(softmax_causal(changed, 0.7) == p);
}

TEST_CASE("rmsnorm of a constant row") {
  const Tensor x = Tensor::matrix(1, 4, {2, 2, 2, 2});
  const Tensor g = Tensor::vector({1, 2, 3, 4});
  const Tensor y = rmsnorm(x, g);
  const double inv = 2.0 / std::sqrt(4.0 + kRmsNormEpsilon);
  for (std::size_t c = 0; c < 4; ++c) CHECK(y[c] == doctest::Approx(inv * (c + 1)).epsilon(1e-15));
}

TEST_CASE("swiglu gates the second half with silu of the first") {
  const Tensor x = Tensor::matrix(1, 4, {0.0, 1.0, 3.0, -2.0});
  const Tensor y = swiglu(x);
  CHECK(y.shape() == Shape{1, 2});
  CHECK(y[0] == 0.0);
  CHECK(y[1] == doctest::Approx(-2.0 / (1.0 + std::exp(-1.0))).epsilon(1e-15));
  CHECK_THROWS_AS(swiglu(Tensor::matrix(1, 3, {1, 2, 3})), DimensionError);
}

TEST_CASE("gradient of sum of squares is 2x") {
  const Tensor x = Tensor::vector({1.5, -2.0, 0.25});
  const auto g = gradients([](Tape&, std::span<const Var> p) { return sum(mul(p[0], p[0])); }, {x});
  CHECK(g[0].values() == std::vector<double>{3.0, -4.0, 0.5});
  const double err = grad_check([](Tape&, std::span<const Var> p) { return sum(mul(p[0], p[0])); }, {x});
  CHECK(err < 1e-8);
}

TEST_CASE("composite gradient matches an independent finite difference") {
  std::mt19937_64 rng(11);
  const Tensor a = kvtest::random_tensor({3, 4}, rng), b = kvtest::random_tensor({4, 4}, rng),
               g = kvtest::random_tensor({4}, rng), c = kvtest::random_tensor({4, 3}, rng),
               r = kvtest::random_tensor({3, 3}, rng);
  auto f = [&](Tape& tape, std::span<const Var> p) {
    const Var h = rmsnorm(matmul(p[0], p[1]), p[2]);
    const Var s = softmax_causal(matmul(h, tape.leaf(c)), 0.5);
    return sum(mul(s, tape.leaf(r)));
  };
  const auto grads = gradients(f, {a, b, g});
  auto plain = [&](const Tensor& av, const Tensor& bv, const Tensor& gv) {
    const Tensor s = softmax_causal(matmul(rmsnorm(matmul(av, bv), gv), c), 0.5);
    double t = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) t += s[i] * r[i];
    return t;
  };
  const auto na = kvtest::numeric_gradient([&](const std::vector<double>& v) { return plain(Tensor(a.shape(), v), b, g); },
                                           a.values());
  const auto nb = kvtest::numeric_gradient([&](const std::vector<double>& v) { return plain(a, Tensor(b.shape(), v), g); },
                                           b.values());
  const auto ng = kvtest::numeric_gradient([&](const std::vector<double>& v) { return plain(a, b, Tensor(g.shape(), v)); },
                                           g.values());
  CHECK(kvtest::max_relative_error(grads[0].values(), na) < 1e-5);
  CHECK(kvtest::max_relative_error(grads[1].values(), nb) < 1e-5);
  CHECK(kvtest::max_relative_error(grads[2].values(), ng) < 1e-5);
}

TEST_CASE("broadcast and pair-expansion ops have correct gradients") {
  std::mt19937_64 rng(5);
  const Tensor x = kvtest::random_tensor({2, 3, 4}, rng), w = kvtest::random_tensor({4}, rng),
               free = kvtest::random_tensor({2}, rng), r = kvtest::random_tensor({2, 3, 4}, rng);
  auto f = [&](Tape& tape, std::span<const Var> p) {
    const Var y = add(scale_last_axis(p[0], p[1]), scale_last_axis(p[0], expand_pairs(p[2])));
    return sum(mul(y, tape.leaf(r)));
  };
  const auto g = gradients(f, {x, w, free});
  // d/dfree_j = sum over entries with last index 2j or 2j+1 of x * r.
  for (std::size_t j = 0; j < 2; ++j) {
    double expected = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (i % 4 / 2 == j) expected += x[i] * r[i];
    CHECK(g[2][j] == doctest::Approx(expected).epsilon(1e-12));
  }
  CHECK(grad_check(f, {x, w, free}) < 1e-6);
}

TEST_CASE("cross entropy skips negative targets") {
  const Tensor logits = Tensor::matrix(2, 3, {0, 0, 0, 1, 2, 3});
  Tape tape;
  const Var l = tape.leaf(logits, true);
  const std::vector<int> targets = {2, -1};
  const Var loss = cross_entropy_sum(l, targets);
  CHECK(loss.value().item() == doctest::Approx(std::log(3.0)).epsilon(1e-15));
  tape.backward(loss);
  const Tensor g = l.grad();
  CHECK(g.at({0, 2}) == doctest::Approx(1.0 / 3 - 1).epsilon(1e-15));
  for (std::size_t c = 0; c < 3; ++c) CHECK(g.at({1, c}) == 0.0);
}

TEST_CASE("split and merge heads round-trip") {
  std::mt19937_64 rng(2);
  const Tensor x = kvtest::random_tensor({5, 6}, rng);
  Tape tape;
  const Var h = split_heads(tape.leaf(x), 3);
  CHECK(h.shape() == Shape{3, 5, 2});
  CHECK(h.value().at({1, 4, 0}) == x.at({4, 2}));
  CHECK(merge_heads(h).value() == x);
}

TEST_CASE("single precision tape rounds values to float") {
  Tape tape(Precision::Single);
  const Var a = tape.leaf(Tensor::scalar(1.0), true);
  const Var b = tape.leaf(Tensor::scalar(1e-9), true);
  const Var c = add(a, b);
  CHECK(c.value().item() == static_cast<double>(static_cast<float>(1.0 + 1e-9)));
}

TEST_CASE("tape records consumers in order") {
  Tape tape;
  const Var a = tape.leaf(Tensor::vector({1, 2}), true);
  const Var b = mul(a, a);
  const Var c = add(a, b);
  const auto cons = tape.consumers(a.id());
  REQUIRE(cons.size() == 2);
  CHECK(cons[0] == b.id());
  CHECK(cons[1] == c.id());
}

TEST_CASE("non-finite values are rejected") {
  Tensor bad = Tensor::vector({1.0, NAN});
  CHECK_FALSE(bad.all_finite());
  CHECK_THROWS(Tensor({2, 2}, std::vector<double>{1, 2, 3}));
}
