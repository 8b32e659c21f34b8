// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "kvshare/checkpoint.hpp"
#include "kvshare/model.hpp"
#include "test_util.hpp"

using namespace kvshare;

namespace {

Batch small_batch() {
  Batch b;
  b.tokens = {{1, 5, 3, 7, 2, 9, 4, 6}, {0, 2, 4, 8, 10, 12, 14, 3}};
  return b;
}

}  // namespace

TEST_CASE("parameter counts at the toy config") {
  // Shared: embed 16x16 + final norm 16 + lm head 16x16 = 528.
  // Layer core: norms 32 + wq 256 + wo 256 + w_up 512 + w_down 256 = 1312; wk + wv add 512.
  // FusedKV reconstruction layers add key pairs 2x4 and value vectors 2x8.
  CHECK(Model(toy_config("Vanilla"), 1).parameter_count() == 528 + 4 * 1824);
  CHECK(Model(toy_config("YOCO"), 1).parameter_count() == 528 + 2 * 1824 + 2 * 1312);
  CHECK(Model(toy_config("FusedKV"), 1).parameter_count() == 528 + 2 * 1824 + 2 * 1336);
  // DenseFusion: one scalar per source for keys and values.
  CHECK(Model(toy_config("DenseFusion"), 1).parameter_count() == 528 + 2 * 1824 + 2 * (1312 + 4));
  // GQA halves the kv projections: 2 x 16x8.
  CHECK(Model(toy_config("GQA"), 1).parameter_count() == 528 + 4 * (1312 + 256));
}

TEST_CASE("reconstruction layers carry no key or value projections") {
  for (const auto& st : strategy_catalog()) {
    const Model m(toy_config(st.name()), 1);
    for (std::size_t l = 1; l <= m.config().layers; ++l)
      CHECK(m.layer(l).has_kv_projection() == m.plan().is_storage(l));
  }
  const Model f(toy_config("FusedKV"), 1);
  CHECK(f.layer(3).key_fusion.size() == 2);
  CHECK(f.params()[f.find_param("layer3.fuse_k.src1")].value.shape() == Shape{4});
  CHECK(f.params()[f.find_param("layer3.fuse_v.src2")].value.shape() == Shape{8});
  CHECK_THROWS(f.find_param("layer3.wk"));
}

TEST_CASE("construction is deterministic in the seed") {
  const Model a(toy_config("FusedKV"), 5), b(toy_config("FusedKV"), 5), c(toy_config("FusedKV"), 6);
  bool same = true, differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    same = same && a.params()[i].value == b.params()[i].value;
    differs = differs || !(a.params()[i].value == c.params()[i].value);
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("equivalent init keeps key weights pair-symmetric") {
  ModelConfig cfg = toy_config("FusedKV");
  cfg.layers = 6;
  cfg.middle = 3;
  cfg.init = InitScheme::Equivalent;
  const Model m(cfg, 2);
  const FusionWeights w = m.fusion_weights();
  for (auto l : m.plan().reconstruction_layers())
    for (std::size_t src : {1u, 3u}) {
      const Tensor e = w.key_weight_expanded(l, src);
      for (std::size_t j = 0; j < 4; ++j) CHECK(e[2 * j] == e[2 * j + 1]);
    }
}

TEST_CASE("config validation and key=value round trip") {
  ModelConfig cfg = toy_config("FusedKV");
  CHECK_NOTHROW(cfg.validate());
  ModelConfig parsed;
  std::istringstream in(cfg.to_key_values());
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    REQUIRE(parsed.set(line.substr(0, eq), line.substr(eq + 1)));
  }
  CHECK(parsed.to_key_values() == cfg.to_key_values());
  CHECK_FALSE(parsed.set("no_such_key", "1"));

  ModelConfig bad = cfg;
  bad.kv_heads = 3;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.middle = 4;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.d_model = 18;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("forward errors") {
  const Model m(toy_config("Vanilla"), 1);
  Batch oov;
  oov.tokens = {{1, 2, 16}};
  CHECK_THROWS_AS(forward_loss(m, oov), std::out_of_range);
  CHECK_THROWS(forward_loss(m, Batch{}));
  Batch single;
  single.tokens = {{4}};
  CHECK_THROWS(forward_loss(m, single));
  Batch too_long;
  too_long.tokens = {std::vector<int>(65, 3)};
  CHECK_THROWS_AS(forward_loss(m, too_long), std::length_error);
  Batch masked = small_batch();
  masked.mask = {std::vector<std::uint8_t>(7, 0), std::vector<std::uint8_t>(7, 0)};
  CHECK_THROWS(forward_loss(m, masked));
}

TEST_CASE("loss at init is close to log vocab") {
  const Model m(desk_config("FusedKV"), 3);
  Batch b;
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> tok(0, 63);
  for (int s = 0; s < 4; ++s) {
    std::vector<int> seq(24);
    for (auto& t : seq) t = tok(rng);
    b.tokens.push_back(seq);
  }
  CHECK(std::abs(forward_loss(m, b) - std::log(64.0)) < 0.15 * std::log(64.0));
}

TEST_CASE("masked loss averages only selected positions") {
  const Model m(toy_config("Vanilla"), 1);
  Batch b;
  b.tokens = {{3, 4, 5, 6}};
  const Tensor logits = full_logits(m, b.tokens[0]);
  auto nll = [&](std::size_t t) {
    double mx = -INFINITY, z = 0.0;
    for (std::size_t v = 0; v < 16; ++v) mx = std::max(mx, logits.at({t, v}));
    for (std::size_t v = 0; v < 16; ++v) z += std::exp(logits.at({t, v}) - mx);
    return std::log(z) + mx - logits.at({t, static_cast<std::size_t>(b.tokens[0][t + 1])});
  };
  b.mask = {{0, 1, 1}};
  CHECK(forward_loss(m, b) == doctest::Approx((nll(1) + nll(2)) / 2).epsilon(1e-12));
  b.mask.clear();
  CHECK(forward_loss(m, b) == doctest::Approx((nll(0) + nll(1) + nll(2)) / 3).epsilon(1e-12));
}

TEST_CASE("full-model gradients for every strategy on the toy config") {
  const Batch b = small_batch();
  for (const auto& st : strategy_catalog()) {
    const Model m(toy_config(st.name()), 1);
    std::vector<Tensor> params;
    for (const auto& p : m.params()) params.push_back(p.value);
    ScalarFunction f = [&](Tape& tape, std::span<const Var> leaves) { return forward_loss(tape, m, leaves, b); };
    CAPTURE(st.name());
    CHECK(grad_check(f, params, 1e-5) < 1e-4);
  }
}

TEST_CASE("cached decode equals full recompute and keeps only storage caches") {
  for (const auto& st : strategy_catalog()) {
    const Model m(toy_config(st.name()), 4);
    const std::vector<int> prompt = {0, 3, 5, 7, 9, 11};
    const DecodeResult r = decode(m, prompt, 6);
    REQUIRE(r.generated.size() == 6);
    std::vector<int> all = prompt;
    all.insert(all.end(), r.generated.begin(), r.generated.end() - 1);
    const Tensor full = full_logits(m, all);
    double gap = 0.0;
    for (std::size_t g = 0; g < 6; ++g) {
      std::size_t best = 0;
      for (std::size_t v = 0; v < 16; ++v) {
        gap = std::max(gap, std::abs(r.step_logits[g][v] - full.at({prompt.size() - 1 + g, v})));
        if (r.step_logits[g][v] > r.step_logits[g][best]) best = v;
      }
      CHECK(r.generated[g] == static_cast<int>(best));
    }
    CAPTURE(st.name());
    CHECK(gap < 1e-10);
    CHECK(r.persistent_caches == m.plan().storage_layers().size());
    CHECK(r.cache_length == prompt.size() + 5);
    CHECK(r.peak_cache_elements == r.persistent_caches * 2 * m.config().kv_heads * 8 * r.cache_length);
  }
}

TEST_CASE("heatmap shapes") {
  const Model f(toy_config("FusedKV"), 1);
  const FusionHeatmap h = fusion_weight_heatmap(f);
  CHECK(h.targets == std::vector<std::size_t>{3, 4});
  CHECK(h.key_sources == std::vector<std::size_t>{1, 2});
  CHECK(h.key.shape() == Shape{2, 2});
  const auto& w = f.params()[f.find_param("layer4.fuse_k.src2")].value;
  double mean_abs = 0.0;
  for (double x : w.values()) mean_abs += std::abs(x);
  CHECK(h.key.at({1, 1}) == doctest::Approx(mean_abs / static_cast<double>(w.size())).epsilon(1e-14));
  CHECK_THROWS(fusion_weight_heatmap(Model(toy_config("YOCO"), 1)));
}

TEST_CASE("checkpoint round trip") {
  Model m(toy_config("FusedKV"), 9);
  m.params()[0].value[3] = 1.0 / 3.0;
  std::stringstream ss;
  save_checkpoint(ss, m);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 8) == "KVSHCKPT");
  std::istringstream in(bytes);
  const Model back = load_checkpoint(in);
  CHECK(back.config().to_key_values() == m.config().to_key_values());
  REQUIRE(back.params().size() == m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    CHECK(back.params()[i].name == m.params()[i].name);
    CHECK(back.params()[i].value == m.params()[i].value);
  }
  const std::vector<int> toks = {1, 2, 3, 4};
  CHECK(full_logits(back, toks) == full_logits(m, toks));

  std::string corrupt = bytes;
  corrupt[0] = 'X';
  std::istringstream bad(corrupt);
  CHECK_THROWS(load_checkpoint(bad));
  std::istringstream truncated(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS(load_checkpoint(truncated));
}
