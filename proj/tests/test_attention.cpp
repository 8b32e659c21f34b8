// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "kvshare/attention.hpp"
#include "test_util.hpp"

using namespace kvshare;
using kvtest::positions;

TEST_CASE("attend matches the triple-loop oracle") {
  std::mt19937_64 rng(1);
  for (auto [hq, hkv] : {std::pair<std::size_t, std::size_t>{4, 4}, {4, 2}, {4, 1}, {6, 3}}) {
    const std::size_t d = 8, len = 7;
    const Tensor q = kvtest::random_tensor({hq, len, d}, rng), k = kvtest::random_tensor({hkv, len, d}, rng),
                 v = kvtest::random_tensor({hkv, len, d}, rng);
    const auto pos = positions(len);
    const Tensor out = attend(q, k, v, {hq, hkv, d}, pos);
    CHECK(max_abs_diff(out, kvtest::naive_attention(q, k, v, hkv, pos)) < 1e-12);
  }
}

TEST_CASE("decode-style queries see the whole prefix") {
  std::mt19937_64 rng(2);
  const std::size_t d = 4, len = 9;
  const Tensor k = kvtest::random_tensor({2, len, d}, rng), v = kvtest::random_tensor({2, len, d}, rng);
  const Tensor q = kvtest::random_tensor({2, 2, d}, rng);
  const std::vector<std::size_t> pos = {7, 8};
  const LayerCache cache(1, k, v);
  CHECK(max_abs_diff(attend(q, cache, {2, 2, d}, pos), kvtest::naive_attention(q, k, v, 2, pos)) < 1e-12);
}

TEST_CASE("a single key returns its value") {
  const Tensor q = Tensor({1, 1, 2}, {3.0, -1.0});
  const Tensor k = Tensor({1, 1, 2}, {0.5, 0.5});
  const Tensor v = Tensor({1, 1, 2}, {7.0, 8.0});
  const std::vector<std::size_t> pos = {0};
  CHECK(attend(q, k, v, {1, 1, 2}, pos).values() == std::vector<double>{7.0, 8.0});
}

TEST_CASE("config validation") {
  CHECK_THROWS(AttentionConfig{4, 3, 8}.validate());
  CHECK_THROWS(AttentionConfig{2, 4, 8}.validate());
  CHECK_THROWS(AttentionConfig{2, 2, 3}.validate());
  CHECK_NOTHROW(AttentionConfig{8, 2, 16}.validate());
  CHECK(AttentionConfig{8, 2, 16}.group_size() == 4);
}

TEST_CASE("fused path equals attending to the materialized reconstruction") {
  std::mt19937_64 rng(3);
  const std::size_t d = 8, len = 6;
  const AttentionConfig cfg{4, 2, d};
  for (const char* name : {"FusedKV", "DenseFusion", "FusedKV-Lite-Learnable"}) {
    const SharingPlan plan = plan_for_strategy(name, 6, 3);
    CacheMap stored;
    for (auto l : plan.storage_layers())
      stored.emplace(l, LayerCache(l, kvtest::random_tensor({2, len, d}, rng), kvtest::random_tensor({2, len, d}, rng)));
    const FusionWeights w = init_normal(plan, 8, d);
    const Tensor q = kvtest::random_tensor({4, len, d}, rng);
    for (auto l : plan.reconstruction_layers()) {
      const auto [k, v] = reconstruct(plan, w, stored, l);
      const Tensor oracle = kvtest::naive_attention(q, k, v, 2, positions(len));
      CHECK(max_abs_diff(attend_fused(q, plan, w, stored, l, cfg, positions(len)), oracle) < 1e-12);
    }
  }
}

TEST_CASE("fused path rejects asymmetric key weights") {
  std::mt19937_64 rng(4);
  const LayerCache c(1, kvtest::random_tensor({1, 3, 4}, rng), kvtest::random_tensor({1, 3, 4}, rng));
  const Tensor q = kvtest::random_tensor({1, 3, 4}, rng);
  const std::vector<WeightedSource> keys = {{&c, Tensor::vector({1.0, 2.0, 1.0, 1.0})}};
  const std::vector<WeightedSource> values = {{&c, Tensor::vector({1.0, 1.0, 1.0, 1.0})}};
  CHECK_THROWS(attend_fused(q, keys, values, {1, 1, 4}, positions(3)));
}

TEST_CASE("property: future keys never affect earlier outputs") {
  std::mt19937_64 rng(5);
  const std::size_t d = 4, len = 8;
  const Tensor q = kvtest::random_tensor({2, len, d}, rng), k = kvtest::random_tensor({1, len, d}, rng),
               v = kvtest::random_tensor({1, len, d}, rng);
  const Tensor base = attend(q, k, v, {2, 1, d}, positions(len));
  for (std::size_t cut = 1; cut < len; ++cut) {
    Tensor k2 = k, v2 = v;
    for (std::size_t i = cut * d; i < len * d; ++i) k2[i] = v2[i] = 1e3;
    const Tensor out = attend(q, k2, v2, {2, 1, d}, positions(len));
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < cut * d; ++i) CHECK(out[h * len * d + i] == base[h * len * d + i]);
  }
}

TEST_CASE("differentiable attention matches values and finite differences") {
  std::mt19937_64 rng(6);
  const std::size_t d = 4, len = 5;
  const AttentionConfig cfg{2, 1, d};
  const Tensor q = kvtest::random_tensor({2, len, d}, rng), k = kvtest::random_tensor({1, len, d}, rng),
               v = kvtest::random_tensor({1, len, d}, rng), r = kvtest::random_tensor({2, len, d}, rng);
  const auto pos = positions(len);
  auto f = [&](Tape& tape, std::span<const Var> p) { return sum(mul(attention(p[0], p[1], p[2], cfg, pos), tape.leaf(r))); };
  Tape tape;
  CHECK(max_abs_diff(attention(tape.leaf(q), tape.leaf(k), tape.leaf(v), cfg, pos).value(), attend(q, k, v, cfg, pos)) <
        1e-14);
  const auto g = gradients(f, {q, k, v});
  auto plain = [&](const Tensor& qq, const Tensor& kk, const Tensor& vv) {
    const Tensor o = kvtest::naive_attention(qq, kk, vv, 1, pos);
    double t = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) t += o[i] * r[i];
    return t;
  };
  const auto nq = kvtest::numeric_gradient([&](const std::vector<double>& x) { return plain(Tensor(q.shape(), x), k, v); },
                                           q.values());
  const auto nk = kvtest::numeric_gradient([&](const std::vector<double>& x) { return plain(q, Tensor(k.shape(), x), v); },
                                           k.values());
  const auto nv = kvtest::numeric_gradient([&](const std::vector<double>& x) { return plain(q, k, Tensor(v.shape(), x)); },
                                           v.values());
  CHECK(kvtest::max_relative_error(g[0].values(), nq) < 1e-6);
  CHECK(kvtest::max_relative_error(g[1].values(), nk) < 1e-6);
  CHECK(kvtest::max_relative_error(g[2].values(), nv) < 1e-6);
}
