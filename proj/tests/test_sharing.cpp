// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "kvshare/sharing.hpp"
#include "test_util.hpp"

using namespace kvshare;

namespace {

using Layers = std::vector<std::size_t>;

CacheMap random_caches(const SharingPlan& plan, std::size_t heads, std::size_t len, std::size_t d,
                       std::mt19937_64& rng) {
  CacheMap stored;
  for (auto l : plan.storage_layers())
    stored.emplace(l, LayerCache(l, kvtest::random_tensor({heads, len, d}, rng),
                                 kvtest::random_tensor({heads, len, d}, rng)));
  return stored;
}

Tensor row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({1, 1, n}, std::move(v));
}

ChainWeights scalar_chain(double kc, double km, double vc, double vf) {
  return {Tensor::scalar(kc), Tensor::scalar(km), Tensor::scalar(vc), Tensor::scalar(vf)};
}

}  // namespace

TEST_CASE("strategy names parse and round-trip") {
  for (const auto& s : strategy_catalog()) CHECK(Strategy::parse(s.name()) == s);
  CHECK(Strategy::parse("lite").kind == StrategyKind::FusedKVLite);
  CHECK(Strategy::parse("MHA").kind == StrategyKind::Vanilla);
  const Strategy s = Strategy::parse("value1key8");
  CHECK(s.kind == StrategyKind::SourceIndex);
  CHECK(s.value_source == 1);
  CHECK(s.key_source == 8);
  CHECK_THROWS_AS(Strategy::parse("bogus"), PlanError);
  CHECK(strategy_catalog().size() == 9);
}

TEST_CASE("YOCO with 16 layers maps every upper layer to layer 8") {
  const SharingPlan p = plan_for_strategy("YOCO", 16, 0);
  CHECK(p.storage_layers() == Layers{1, 2, 3, 4, 5, 6, 7, 8});
  for (std::size_t i = 9; i <= 16; ++i) {
    CHECK(p.sources(i) == Layers{8});
    CHECK(p.recipe(i).kind == ReconstructionKind::DirectReuse);
  }
}

TEST_CASE("CLA with 4 layers reuses the previous odd layer") {
  const SharingPlan p = plan_for_strategy("CLA", 4, 0);
  CHECK(p.storage_layers() == Layers{1, 3});
  CHECK(p.sources(2) == Layers{1});
  CHECK(p.sources(4) == Layers{3});
}

TEST_CASE("FusedKV-Lite takes keys from the middle layer and values from layer 1") {
  const SharingPlan p = plan_for_strategy("FusedKV-Lite", 16, 8);
  CHECK(p.storage_layers().size() == 8);
  for (std::size_t i = 9; i <= 16; ++i) {
    CHECK(p.recipe(i).key_sources == Layers{8});
    CHECK(p.recipe(i).value_sources == Layers{1});
  }
  const SharingPlan rev = plan_for_strategy("FusedKV-Lite-Rev", 16, 8);
  CHECK(rev.recipe(12).key_sources == Layers{1});
  CHECK(rev.recipe(12).value_sources == Layers{8});
}

TEST_CASE("fusion plans") {
  const SharingPlan f = plan_for_strategy("FusedKV", 8, 4);
  CHECK(f.is_fusedkv_shaped());
  for (auto i : f.reconstruction_layers()) {
    CHECK(f.sources(i) == Layers{1, 4});
    CHECK(f.recipe(i).granularity == WeightGranularity::Vector);
  }
  const SharingPlan d = plan_for_strategy("DenseFusion", 8, 4);
  CHECK(d.sources(6) == Layers{1, 2, 3, 4});
  CHECK(d.recipe(6).granularity == WeightGranularity::Scalar);
  CHECK_FALSE(d.is_fusedkv_shaped());
  const SharingPlan s = plan_for_strategy("value3key2", 8, 4);
  CHECK(s.recipe(7).value_sources == Layers{3});
  CHECK(s.recipe(7).key_sources == Layers{2});
  CHECK(plan_for_strategy("Vanilla", 8, 4).reconstruction_layers().empty());
}

TEST_CASE("plan errors") {
  CHECK_THROWS_AS(plan_for_strategy("FusedKV", 8, 8), PlanError);
  CHECK_THROWS_AS(plan_for_strategy("FusedKV", 8, 9), PlanError);
  CHECK_THROWS_AS(plan_for_strategy("nope", 8, 4), PlanError);
  CHECK_THROWS_AS(plan_for_strategy("value9key1", 16, 8), PlanError);
  // A recipe that reads a later layer is rejected on construction.
  LayerRecipe bad;
  bad.layer = 2;
  bad.key_sources = {3};
  bad.value_sources = {3};
  CHECK_THROWS_AS(SharingPlan(4, {bad}), PlanError);
}

TEST_CASE("property: every catalog plan partitions the layers and is acyclic") {
  for (const auto& st : strategy_catalog())
    for (std::size_t L : {4u, 6u, 8u, 12u, 16u}) {
      const SharingPlan p = plan_for_strategy(st, L, 0);
      std::vector<int> seen(L + 1, 0);
      for (auto l : p.storage_layers()) ++seen[l];
      for (auto l : p.reconstruction_layers()) {
        ++seen[l];
        for (auto src : p.sources(l)) {
          CHECK(p.is_storage(src));
          CHECK(src < l);
        }
      }
      for (std::size_t l = 1; l <= L; ++l) CHECK(seen[l] == 1);
    }
}

TEST_CASE("direct reuse returns the source tensors") {
  std::mt19937_64 rng(1);
  const SharingPlan p = plan_for_strategy("FusedKV-Lite", 4, 2);
  const CacheMap stored = random_caches(p, 2, 5, 6, rng);
  const auto [k, v] = reconstruct(p, FusionWeights{6, {}}, stored, 4);
  CHECK(k == stored.at(2).keys());
  CHECK(v == stored.at(1).values());
}

TEST_CASE("weighted fusion matches a scalar-loop oracle") {
  std::mt19937_64 rng(2);
  const std::size_t d = 8, heads = 2, len = 5;
  const SharingPlan p = plan_for_strategy("FusedKV", 4, 2);
  const CacheMap stored = random_caches(p, heads, len, d, rng);
  const FusionWeights w = init_normal(p, 17, d);
  for (std::size_t l : {3u, 4u}) {
    const auto [k, v] = reconstruct(p, w, stored, l);
    Tensor ek({heads, len, d}), ev({heads, len, d});
    for (const auto& term : w.at(l).key) {
      const Tensor& src = stored.at(term.source).keys();
      for (std::size_t i = 0; i < src.size(); ++i) ek[i] += term.weight[(i % d) / 2] * src[i];
    }
    for (const auto& term : w.at(l).value) {
      const Tensor& src = stored.at(term.source).values();
      for (std::size_t i = 0; i < src.size(); ++i) ev[i] += term.weight[i % d] * src[i];
    }
    CHECK(max_abs_diff(k, ek) < 1e-12);
    CHECK(max_abs_diff(v, ev) < 1e-12);
  }
}

TEST_CASE("reconstruction errors") {
  std::mt19937_64 rng(3);
  const SharingPlan p = plan_for_strategy("FusedKV", 4, 2);
  CacheMap stored = random_caches(p, 1, 4, 4, rng);
  const FusionWeights w = init_ones(p, 4);
  stored.erase(1);
  CHECK_THROWS_AS(reconstruct(p, w, stored, 3), ReconstructionError);
  CacheMap uneven = random_caches(p, 1, 4, 4, rng);
  uneven.at(2) = LayerCache(2, kvtest::random_tensor({1, 3, 4}, rng), kvtest::random_tensor({1, 3, 4}, rng));
  CHECK_THROWS_AS(reconstruct(p, w, uneven, 3), ReconstructionError);
}

TEST_CASE("init_normal is deterministic, pair-symmetric and standard normal") {
  const std::size_t d = 8334;  // 4 layers x 3D free entries > 1e5
  const SharingPlan p = plan_for_strategy("FusedKV", 8, 4);
  const FusionWeights a = init_normal(p, 99, d), b = init_normal(p, 99, d);
  std::vector<double> draws;
  for (const auto& [layer, lw] : a.layers) {
    for (std::size_t t = 0; t < lw.key.size(); ++t) {
      CHECK(lw.key[t].weight == b.at(layer).key[t].weight);
      CHECK(lw.key[t].weight.size() == d / 2);
      const Tensor e = a.key_weight_expanded(layer, lw.key[t].source);
      for (std::size_t j = 0; j < d / 2; ++j) REQUIRE(e[2 * j] == e[2 * j + 1]);
      draws.insert(draws.end(), lw.key[t].weight.values().begin(), lw.key[t].weight.values().end());
    }
    for (const auto& term : lw.value) draws.insert(draws.end(), term.weight.values().begin(), term.weight.values().end());
  }
  REQUIRE(draws.size() >= 100000);
  double mean = 0.0;
  for (double x : draws) mean += x;
  mean /= static_cast<double>(draws.size());
  double var = 0.0;
  for (double x : draws) var += (x - mean) * (x - mean);
  var /= static_cast<double>(draws.size() - 1);
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("init_equivalent base case copies the auxiliary weights") {
  const SharingPlan p = plan_for_strategy("FusedKV", 3, 2);
  AuxiliaryWeights aux;
  aux.head_dim = 2;
  aux.layers[3] = scalar_chain(0.5, 0.25, 3.0, 4.0);
  const FusionWeights w = init_equivalent(p, aux);
  CHECK(w.key_term(3, 1).weight.item() == 0.5);
  CHECK(w.key_term(3, 2).weight.item() == 0.25);
  CHECK(w.value_term(3, 1).weight.item() == 4.0);
  CHECK(w.value_term(3, 2).weight.item() == 3.0);
}

TEST_CASE("scalar toy recursion with n=2, L=4") {
  const SharingPlan p = plan_for_strategy("FusedKV", 4, 2);
  AuxiliaryWeights aux;
  aux.head_dim = 4;
  // Layer 3 key weights: 0.5 on K^1, 0.25 on K^n. Layer 4: 2 on K^3, 1 on K^n.
  // Values: layer 3 takes 3 V^1 + 0.5 V^n; layer 4 takes 2 V^3 - V^1.
  aux.layers[3] = scalar_chain(0.5, 0.25, 0.5, 3.0);
  aux.layers[4] = scalar_chain(2.0, 1.0, 2.0, -1.0);
  const FusionWeights w = init_equivalent(p, aux);
  CHECK(w.key_term(4, 2).weight.item() == 1.5);   // 2 * 0.25 + 1
  CHECK(w.key_term(4, 1).weight.item() == 1.0);   // 2 * 0.5
  CHECK(w.value_term(4, 1).weight.item() == 5.0);  // 2 * 3 - 1
  CHECK(w.value_term(4, 2).weight.item() == 1.0);  // 2 * 0.5

  std::mt19937_64 rng(4);
  const CacheMap stored = random_caches(p, 2, 3, 4, rng);
  const CacheMap chained = iterative_reconstruct(p, aux, stored);
  for (std::size_t l : {3u, 4u}) {
    const auto [k, v] = reconstruct(p, w, stored, l);
    CHECK(max_abs_diff(k, chained.at(l).keys()) < 1e-12);
    CHECK(max_abs_diff(v, chained.at(l).values()) < 1e-12);
  }
}

TEST_CASE("hand-computed chain with L=6, n=3") {
  const SharingPlan p = plan_for_strategy("FusedKV", 6, 3);
  CacheMap stored;
  stored.emplace(1, LayerCache(1, row({1, 2}), row({5, 6})));
  stored.emplace(2, LayerCache(2, row({0, 0}), row({0, 0})));
  stored.emplace(3, LayerCache(3, row({3, 4}), row({7, 8})));
  AuxiliaryWeights aux;
  aux.head_dim = 2;
  aux.layers[4] = scalar_chain(1.0, 2.0, 1.0, 1.0);
  aux.layers[5] = scalar_chain(0.5, -1.0, 0.5, 2.0);
  aux.layers[6] = scalar_chain(2.0, 1.0, -1.0, 1.0);
  const CacheMap c = iterative_reconstruct(p, aux, stored);
  CHECK(c.at(4).keys().values() == std::vector<double>{7, 10});
  CHECK(c.at(5).keys().values() == std::vector<double>{0.5, 1});
  CHECK(c.at(6).keys().values() == std::vector<double>{4, 6});
  CHECK(c.at(4).values().values() == std::vector<double>{12, 14});
  CHECK(c.at(5).values().values() == std::vector<double>{16, 19});
  CHECK(c.at(6).values().values() == std::vector<double>{-11, -13});
}

TEST_CASE("zero carry weights reduce to the anchors") {
  const SharingPlan p = plan_for_strategy("FusedKV", 6, 3);
  std::mt19937_64 rng(5);
  const CacheMap stored = random_caches(p, 1, 2, 2, rng);
  AuxiliaryWeights aux;
  aux.head_dim = 2;
  aux.layers[4] = scalar_chain(1.5, 2.0, 1.0, 1.0);
  aux.layers[5] = scalar_chain(0.0, 3.0, 0.0, 4.0);
  aux.layers[6] = scalar_chain(0.0, -2.0, 0.0, 0.5);
  const CacheMap c = iterative_reconstruct(p, aux, stored);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(c.at(5).keys()[i] == 3.0 * stored.at(3).keys()[i]);
    CHECK(c.at(6).values()[i] == 0.5 * stored.at(1).values()[i]);
  }
}

TEST_CASE("property: init_equivalent matches the chain on random draws") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 30; ++t) {
    const std::size_t L = 6 + 2 * static_cast<std::size_t>(t % 3), d = 6;
    const SharingPlan p = plan_for_strategy("FusedKV", L, L / 2);
    const CacheMap stored = random_caches(p, 2, 4, d, rng);
    const auto gran = t % 2 ? WeightGranularity::Scalar : WeightGranularity::Vector;
    const AuxiliaryWeights aux = sample_auxiliary(p, 100 + t, d, gran);
    const FusionWeights w = init_equivalent(p, aux);
    const CacheMap c = iterative_reconstruct(p, aux, stored);
    for (auto l : p.reconstruction_layers()) {
      const auto [k, v] = reconstruct(p, w, stored, l);
      CHECK(max_abs_diff(k, c.at(l).keys()) < 1e-12);
      CHECK(max_abs_diff(v, c.at(l).values()) < 1e-12);
    }
  }
  CHECK_THROWS_AS(init_equivalent(plan_for_strategy("DenseFusion", 8, 4), AuxiliaryWeights{}), PlanError);
}

TEST_CASE("differentiable reconstruction propagates to weights and sources") {
  std::mt19937_64 rng(7);
  const std::size_t d = 4;
  const SharingPlan p = plan_for_strategy("FusedKV", 4, 2);
  const LayerRecipe& r = p.recipe(3);
  const Tensor k1 = kvtest::random_tensor({1, 3, d}, rng), k2 = kvtest::random_tensor({1, 3, d}, rng),
               v1 = kvtest::random_tensor({1, 3, d}, rng), v2 = kvtest::random_tensor({1, 3, d}, rng),
               rk = kvtest::random_tensor({1, 3, d}, rng), rv = kvtest::random_tensor({1, 3, d}, rng);
  auto f = [&](Tape& tape, std::span<const Var> prm) {
    std::map<std::size_t, KVPair> stored = {{1, {prm[0], tape.leaf(v1)}}, {2, {tape.leaf(k2), tape.leaf(v2)}}};
    const std::vector<Var> kw = {prm[1], prm[2]}, vw = {prm[3], prm[4]};
    const KVPair out = reconstruct(r, kw, vw, stored);
    return add(sum(mul(out.keys, tape.leaf(rk))), sum(mul(out.values, tape.leaf(rv))));
  };
  const std::vector<Tensor> params = {k1, kvtest::random_tensor({d / 2}, rng), kvtest::random_tensor({d / 2}, rng),
                                      kvtest::random_tensor({d}, rng), kvtest::random_tensor({d}, rng)};
  CHECK(grad_check(f, params) < 1e-6);
}
