// SPDX-License-Identifier: Apache-2.0
#include "kvshare/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>

#include "kvshare/attention.hpp"
#include "kvshare/costmodel.hpp"
#include "kvshare/model.hpp"
#include "kvshare/rope.hpp"
#include "kvshare/sharing.hpp"
#include "kvshare/tasks.hpp"
#include "kvshare/trainer.hpp"

namespace kvshare {

namespace {

using Rng = std::mt19937_64;

Tensor random_tensor(const Shape& shape, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  Tensor t(shape);
  for (auto& v : t.data()) v = normal(rng);
  return t;
}

std::vector<std::size_t> iota(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = start + i;
  return out;
}

Tensor symmetric_weight(std::size_t d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor w({d});
  for (std::size_t j = 0; j < d / 2; ++j) w[2 * j] = w[2 * j + 1] = normal(rng);
  return w;
}

class Suite {
 public:
  explicit Suite(std::string name) : name_(std::move(name)) {}

  /// Records a check that passes when measured < threshold.
  void below(std::string check, double measured, double threshold, std::string detail = {}) {
    results_.push_back({name_, std::move(check), measured < threshold, measured, threshold, std::move(detail)});
  }
  /// Records a check that passes when measured > threshold.
  void above(std::string check, double measured, double threshold, std::string detail = {}) {
    results_.push_back({name_, std::move(check), measured > threshold, measured, threshold, std::move(detail)});
  }
  void holds(std::string check, bool ok, std::string detail = {}) {
    results_.push_back({name_, std::move(check), ok, ok ? 1.0 : 0.0, 1.0, std::move(detail)});
  }
  /// Runs fn and records a failure if it throws.
  void guarded(const std::string& check, const std::function<void()>& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      results_.push_back({name_, check, false, NAN, NAN, std::string("threw: ") + e.what()});
    }
  }
  std::vector<CheckResult> take() { return std::move(results_); }

 private:
  std::string name_;
  std::vector<CheckResult> results_;
};

// ---------------------------------------------------------------- numerics

Var weighted_total(Var y, const Tensor& r) { return sum(mul(y, y.tape().leaf(r))); }

std::vector<CheckResult> numerics_suite(const VerifyOptions& opts) {
  Suite s("numerics");
  Rng rng(opts.seed);
  struct OpCase {
    std::string name;
    std::vector<Tensor> params;
    ScalarFunction f;
  };
  std::vector<OpCase> cases;
  auto r = [&](Shape shape) { return random_tensor(shape, rng); };
  const Tensor r34 = r({3, 4}), r43 = r({4, 3}), r55 = r({5, 5}), r36 = r({3, 6}), r34h = r({3, 4}), r64 = r({4, 4});
  const Tensor r234 = r({2, 3, 4}), r38 = r({3, 8});
  cases.push_back({"add", {r({3, 4}), r({3, 4})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(add(p[0], p[1]), r34); }});
  cases.push_back({"mul", {r({3, 4}), r({3, 4})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(mul(p[0], p[1]), r34); }});
  cases.push_back({"scale", {r({3, 4})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(scale(p[0], 1.7), r34); }});
  cases.push_back({"sum", {r({3, 4})}, [](Tape&, std::span<const Var> p) { return sum(p[0]); }});
  cases.push_back({"matmul", {r({4, 5}), r({5, 3})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(matmul(p[0], p[1]), r43); }});
  cases.push_back({"softmax_causal", {r({5, 5})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(softmax_causal(p[0], 0.5), r55); }});
  cases.push_back({"rmsnorm", {r({3, 6}), r({6})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(rmsnorm(p[0], p[1]), r36); }});
  cases.push_back({"swiglu", {r({3, 8})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(swiglu(p[0]), r34h); }});
  cases.push_back({"embedding", {r({6, 4})}, [=](Tape&, std::span<const Var> p) {
                     const int tokens[] = {1, 3, 3, 0};
                     return weighted_total(embedding(p[0], tokens), r64);
                   }});
  cases.push_back({"cross_entropy_sum", {r({4, 5})}, [](Tape&, std::span<const Var> p) {
                     const int targets[] = {1, -1, 4, 0};
                     return cross_entropy_sum(p[0], targets);
                   }});
  cases.push_back({"split_heads", {r({3, 8})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(split_heads(p[0], 2), r234); }});
  cases.push_back({"merge_heads", {r({2, 3, 4})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(merge_heads(p[0]), r38); }});
  cases.push_back({"scale_last_axis", {r({2, 3, 4}), r({4})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(scale_last_axis(p[0], p[1]), r234); }});
  cases.push_back({"scale_by_scalar", {r({2, 3, 4}), r({1})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(scale_by_scalar(p[0], p[1]), r234); }});
  const Tensor r6 = r({6});
  cases.push_back({"expand_pairs", {r({3})},
                   [=](Tape&, std::span<const Var> p) { return weighted_total(expand_pairs(p[0]), r6); }});
  const RopeSchedule sched(4);
  cases.push_back({"apply_rope", {r({2, 3, 4})}, [=](Tape&, std::span<const Var> p) {
                     const std::size_t pos[] = {0, 2, 5};
                     return weighted_total(apply_rope(p[0], pos, sched), r234);
                   }});
  cases.push_back({"attention", {r({2, 3, 4}), r({1, 3, 4}), r({1, 3, 4})}, [=](Tape&, std::span<const Var> p) {
                     const std::size_t pos[] = {0, 1, 2};
                     return weighted_total(attention(p[0], p[1], p[2], {2, 1, 4}, pos), r234);
                   }});
  for (const auto& c : cases) {
    s.guarded("grad/" + c.name, [&] { s.below("grad/" + c.name, grad_check(c.f, c.params, 1e-5), 1e-4); });
  }

  s.guarded("softmax_causal_structure", [&] {
    double row_dev = 0.0;
    bool upper_zero = true;
    for (std::size_t n : {1u, 2u, 6u, 11u}) {
      const Tensor p = softmax_causal(random_tensor({n, n}, rng, 3.0), 1.0 / std::sqrt(8.0));
      for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          total += p[i * n + j];
          if (j > i && p[i * n + j] != 0.0) upper_zero = false;
        }
        row_dev = std::max(row_dev, std::abs(total - 1.0));
      }
    }
    s.holds("softmax_causal_upper_triangle_zero", upper_zero);
    s.below("softmax_causal_row_sums", row_dev, 1e-12);
  });

  s.guarded("tape_determinism", [&] {
    const ModelConfig cfg = toy_config("FusedKV");
    const Model m(cfg, opts.seed);
    Batch b;
    b.tokens = {{1, 5, 3, 7, 2, 9, 4, 6}};
    const auto g1 = loss_and_gradients(m, b).grads;
    const auto g2 = loss_and_gradients(m, b).grads;
    s.holds("tape_replay_bit_identical", g1 == g2);
  });
  return s.take();
}

// ---------------------------------------------------------------- rope

std::vector<CheckResult> rope_suite(const VerifyOptions& opts) {
  Suite s("rope");
  Rng rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pos(0, 4096), shift(1, 1000);
  std::uniform_int_distribution<int> dims(1, 32);

  s.guarded("schedule", [&] {
    const RopeSchedule sched(64);
    bool decreasing = true;
    for (std::size_t j = 1; j < sched.pairs(); ++j) decreasing = decreasing && sched.angle(j) < sched.angle(j - 1);
    s.holds("schedule_theta0_is_one", sched.angle(0) == 1.0);
    s.holds("schedule_strictly_decreasing", decreasing);
  });

  s.guarded("decomposition_identity", [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opts.trials; ++t) {
      const std::size_t d = 2 * static_cast<std::size_t>(dims(rng));
      const RopeSchedule sched(d);
      const Tensor q = random_tensor({d}, rng), k = random_tensor({d}, rng), w = random_tensor({d}, rng);
      const std::size_t m = pos(rng), n = pos(rng);
      worst = std::max(worst, std::abs(score_direct(q, k, m, n, w.data(), sched) -
                                       score_decomposed(q, k, m, n, w.data(), sched)));
    }
    s.below("decomposition_identity", worst, 1e-10, std::to_string(opts.trials) + " random draws");
  });

  s.guarded("relative_position_invariance", [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opts.trials; ++t) {
      const std::size_t d = 2 * static_cast<std::size_t>(dims(rng));
      const RopeSchedule sched(d);
      const Tensor q = random_tensor({d}, rng), k = random_tensor({d}, rng), w = symmetric_weight(d, rng);
      const std::size_t m = pos(rng), n = pos(rng), delta = shift(rng);
      worst = std::max(worst, std::abs(score_direct(q, k, m, n, w.data(), sched) -
                                       score_direct(q, k, m + delta, n + delta, w.data(), sched)));
    }
    s.below("relative_position_invariance", worst, 1e-10);
  });

  s.guarded("symmetry_necessity", [&] {
    // Each asymmetric weight must admit a shift that moves the score by more than 1e-3.
    const std::size_t d = 8;
    const RopeSchedule sched(d);
    double weakest = INFINITY;
    for (int w_trial = 0; w_trial < 10; ++w_trial) {
      Tensor w = symmetric_weight(d, rng);
      w[2 * static_cast<std::size_t>(w_trial % 4) + 1] += 0.5 + 0.1 * w_trial;
      double best = 0.0;
      for (int attempt = 0; attempt < 200 && best <= 1e-3; ++attempt) {
        const Tensor q = random_tensor({d}, rng), k = random_tensor({d}, rng);
        const std::size_t m = pos(rng), n = pos(rng), delta = shift(rng);
        best = std::max(best, std::abs(score_direct(q, k, m, n, w.data(), sched) -
                                       score_direct(q, k, m + delta, n + delta, w.data(), sched)));
      }
      weakest = std::min(weakest, best);
    }
    s.above("symmetry_necessity", weakest, 1e-3, "smallest found shift deviation over 10 asymmetric weights");
  });

  s.guarded("fused_key_linearity", [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opts.trials; ++t) {
      const std::size_t d = 2 * static_cast<std::size_t>(dims(rng));
      const RopeSchedule sched(d);
      const Tensor q = random_tensor({d}, rng);
      std::vector<Tensor> keys;
      std::vector<PairSymmetricWeight> weights;
      const std::size_t sources = 1 + t % 4;
      for (std::size_t i = 0; i < sources; ++i) {
        keys.push_back(random_tensor({d}, rng));
        weights.emplace_back(random_tensor({d / 2}, rng));
      }
      const std::size_t m = pos(rng), n = pos(rng);
      double separate = 0.0;
      for (std::size_t i = 0; i < sources; ++i)
        separate += score_direct(q, keys[i], m, n, weights[i].expanded().data(), sched);
      worst = std::max(worst, std::abs(fused_key_score(q, keys, m, n, weights, sched) - separate));
    }
    s.below("fused_key_linearity", worst, 1e-12);
  });

  s.guarded("post_rope_fusion", [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < 200; ++t) {
      const std::size_t d = 2 * static_cast<std::size_t>(dims(rng));
      const RopeSchedule sched(d);
      const std::size_t len = 5;
      std::vector<std::size_t> positions(len);
      for (auto& p : positions) p = pos(rng);
      Tensor fused_post({len, d}), pre_sum({len, d});
      for (int src = 0; src < 2; ++src) {
        const Tensor k = random_tensor({len, d}, rng), w = symmetric_weight(d, rng);
        const Tensor rotated = apply_rope(k, positions, sched);
        for (std::size_t r = 0; r < len; ++r)
          for (std::size_t e = 0; e < d; ++e) {
            fused_post[r * d + e] += w[e] * rotated[r * d + e];
            pre_sum[r * d + e] += w[e] * k[r * d + e];
          }
      }
      worst = std::max(worst, max_abs_diff(fused_post, apply_rope(pre_sum, positions, sched)));
    }
    s.below("post_rope_fusion_equivalence", worst, 1e-10);
  });
  return s.take();
}

// ---------------------------------------------------------------- sharing

CacheMap random_caches(const SharingPlan& plan, std::size_t kv_heads, std::size_t len, std::size_t d, Rng& rng) {
  CacheMap stored;
  for (auto l : plan.storage_layers())
    stored.emplace(l, LayerCache(l, random_tensor({kv_heads, len, d}, rng), random_tensor({kv_heads, len, d}, rng)));
  return stored;
}

std::vector<CheckResult> sharing_suite(const VerifyOptions& opts) {
  Suite s("sharing");
  Rng rng(opts.seed);

  s.guarded("plan_structure", [&] {
    std::vector<Strategy> strategies = strategy_catalog();
    strategies.push_back(Strategy::parse("value1key4"));
    strategies.push_back(Strategy::parse("value3key2"));
    bool ok = true;
    std::string detail;
    for (const auto& st : strategies) {
      for (std::size_t L : {4u, 8u, 16u}) {
        if (st.kind == StrategyKind::SourceIndex && L < 8) continue;  // sources must lie in 1..L/2
        const SharingPlan plan = plan_for_strategy(st, L, 0);
        std::vector<int> seen(L + 1, 0);
        for (auto l : plan.storage_layers()) seen[l]++;
        for (auto l : plan.reconstruction_layers()) {
          seen[l]++;
          for (auto src : plan.sources(l)) {
            if (!plan.is_storage(src) || src >= l) {
              ok = false;
              detail = st.name() + " layer " + std::to_string(l) + " reads " + std::to_string(src);
            }
          }
          const auto& r = plan.recipe(l);
          if (r.kind == ReconstructionKind::DirectReuse && (r.key_sources.size() != 1 || r.value_sources.size() != 1))
            ok = false;
        }
        for (std::size_t l = 1; l <= L; ++l)
          if (seen[l] != 1) {
            ok = false;
            detail = st.name() + " layer " + std::to_string(l) + " not partitioned";
          }
      }
    }
    s.holds("plan_partition_and_acyclicity", ok, detail);
  });

  s.guarded("selector_limit", [&] {
    const std::size_t d = 8;
    const SharingPlan fused = plan_for_strategy("FusedKV", 4, 2);
    const SharingPlan lite = plan_for_strategy("FusedKV-Lite", 4, 2);
    const CacheMap stored = random_caches(fused, 2, 6, d, rng);
    FusionWeights w = init_ones(fused, d);
    for (auto& [layer, lw] : w.layers) {
      for (auto& t : lw.key) t.weight = Tensor({d / 2}, t.source == 2 ? 1.0 : 0.0);
      for (auto& t : lw.value) t.weight = Tensor({d}, t.source == 1 ? 1.0 : 0.0);
    }
    bool equal = true;
    for (std::size_t l : {3u, 4u}) {
      const auto a = reconstruct(fused, w, stored, l);
      const auto b = reconstruct(lite, FusionWeights{d, {}}, stored, l);
      equal = equal && a.first == b.first && a.second == b.second;
    }
    s.holds("one_hot_fusion_equals_direct_reuse", equal);
  });

  s.guarded("init_equivalence", [&] {
    double worst = 0.0;
    for (std::size_t trial = 0; trial < 100; ++trial) {
      const std::size_t L = 4 + 2 * (trial % 4), n = L / 2, d = 8;
      const SharingPlan plan = plan_for_strategy("FusedKV", L, n);
      const CacheMap stored = random_caches(plan, 2, 5, d, rng);
      const auto gran = trial % 2 ? WeightGranularity::Scalar : WeightGranularity::Vector;
      const AuxiliaryWeights aux = sample_auxiliary(plan, opts.seed * 1000 + trial, d, gran);
      const FusionWeights fw = init_equivalent(plan, aux);
      const CacheMap chained = iterative_reconstruct(plan, aux, stored);
      for (auto l : plan.reconstruction_layers()) {
        const auto [k, v] = reconstruct(plan, fw, stored, l);
        worst = std::max({worst, max_abs_diff(k, chained.at(l).keys()), max_abs_diff(v, chained.at(l).values())});
      }
    }
    s.below("init_equivalent_matches_iterative", worst, 1e-12, "100 random cache/weight draws");
  });

  s.guarded("memory_accounting", [&] {
    bool ok = true;
    std::ostringstream detail;
    const std::vector<int> prompt = {2, 3, 4, 5};
    for (const auto& st : strategy_catalog()) {
      const Model m(desk_config(st.name()), opts.seed);
      const DecodeResult r = decode(m, prompt, 2);
      const std::size_t expected = m.plan().storage_layers().size();
      bool row = r.persistent_caches == expected;
      if (st.uses_middle()) row = row && r.persistent_caches == m.config().layers / 2;
      if (!row) detail << st.name() << ": " << r.persistent_caches << " caches, expected " << expected << "; ";
      ok = ok && row;
    }
    s.holds("persistent_caches_equal_storage_layers", ok, detail.str());
  });

  s.guarded("fusion_weight_gradients", [&] {
    double worst = 0.0;
    for (const char* name : {"FusedKV", "DenseFusion", "FusedKV-Lite-Learnable"}) {
      const Model m(toy_config(name), opts.seed);
      Batch b;
      b.tokens = {{1, 5, 3, 7, 2, 9, 4, 6}};
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < m.params().size(); ++i)
        if (m.params()[i].name.find(".fuse_") != std::string::npos) idx.push_back(i);
      std::vector<Tensor> fusion;
      for (auto i : idx) fusion.push_back(m.params()[i].value);
      ScalarFunction f = [&](Tape& tape, std::span<const Var> p) {
        std::vector<Var> leaves;
        std::size_t next = 0;
        for (std::size_t i = 0; i < m.params().size(); ++i) {
          if (next < idx.size() && idx[next] == i) leaves.push_back(p[next++]);
          else leaves.push_back(tape.leaf(m.params()[i].value));
        }
        return forward_loss(tape, m, leaves, b);
      };
      worst = std::max(worst, grad_check(f, fusion, 1e-5));
    }
    s.below("fusion_weight_grad_check", worst, 1e-4);
  });
  return s.take();
}

// ---------------------------------------------------------------- attention

std::vector<CheckResult> attention_suite(const VerifyOptions& opts) {
  Suite s("attention");
  Rng rng(opts.seed);

  s.guarded("causality", [&] {
    const AttentionConfig cfg{4, 2, 8};
    const std::size_t len = 7;
    const auto positions = iota(len);
    const Tensor q = random_tensor({4, len, 8}, rng), k = random_tensor({2, len, 8}, rng),
                 v = random_tensor({2, len, 8}, rng);
    const Tensor base = attend(q, k, v, cfg, positions);
    bool ok = true;
    for (std::size_t cut = 1; cut < len; ++cut) {
      Tensor k2 = k, v2 = v;
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t p = cut; p < len; ++p)
          for (std::size_t e = 0; e < 8; ++e) k2[(h * len + p) * 8 + e] = v2[(h * len + p) * 8 + e] = 0.0;
      const Tensor out = attend(q, k2, v2, cfg, positions);
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t p = 0; p < cut; ++p)
          for (std::size_t e = 0; e < 8; ++e) ok = ok && out[(h * len + p) * 8 + e] == base[(h * len + p) * 8 + e];
    }
    s.holds("future_kv_never_changes_present_outputs", ok);
  });

  s.guarded("two_path_equivalence", [&] {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t d = 8, len = 6;
      const AttentionConfig cfg{4, 2, d};
      const SharingPlan plan = plan_for_strategy(trial % 2 ? "FusedKV" : "DenseFusion", 6, 3);
      const CacheMap stored = random_caches(plan, 2, len, d, rng);
      const FusionWeights w = init_normal(plan, opts.seed + trial, d);
      const Tensor q = random_tensor({4, len, d}, rng);
      const auto positions = iota(len);
      for (auto l : plan.reconstruction_layers()) {
        const auto [k, v] = reconstruct(plan, w, stored, l);
        worst = std::max(worst, max_abs_diff(attend_fused(q, plan, w, stored, l, cfg, positions),
                                             attend(q, k, v, cfg, positions)));
      }
    }
    s.below("attend_fused_equals_attend_of_reconstruct", worst, 1e-12);
  });

  s.guarded("shift_invariance", [&] {
    const std::size_t d = 8, len = 6, delta = 7;
    const AttentionConfig cfg{2, 2, d};
    const RopeSchedule sched(d);
    const SharingPlan plan = plan_for_strategy("FusedKV", 4, 2);
    const FusionWeights w = init_normal(plan, opts.seed, d);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const Tensor q = random_tensor({2, len, d}, rng);
      std::vector<Tensor> keys, values;
      for (int i = 0; i < 2; ++i) {
        keys.push_back(random_tensor({2, len, d}, rng));
        values.push_back(random_tensor({2, len, d}, rng));
      }
      auto run = [&](std::size_t offset) {
        const auto abs_pos = iota(len, offset);
        CacheMap stored;
        stored.emplace(1, LayerCache(1, apply_rope(keys[0], abs_pos, sched), values[0]));
        stored.emplace(2, LayerCache(2, apply_rope(keys[1], abs_pos, sched), values[1]));
        return attend_fused(apply_rope(q, abs_pos, sched), plan, w, stored, 3, cfg, iota(len));
      };
      worst = std::max(worst, max_abs_diff(run(0), run(delta)));
    }
    s.below("fused_attention_shift_invariance", worst, 1e-10);
  });

  s.guarded("gqa_grouping", [&] {
    const std::size_t d = 8, len = 5;
    const auto positions = iota(len);
    const Tensor q = random_tensor({4, len, d}, rng), k = random_tensor({2, len, d}, rng),
                 v = random_tensor({2, len, d}, rng);
    Tensor k_rep({4, len, d}), v_rep({4, len, d});
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t i = 0; i < len * d; ++i) {
        k_rep[h * len * d + i] = k[(h / 2) * len * d + i];
        v_rep[h * len * d + i] = v[(h / 2) * len * d + i];
      }
    s.holds("gqa_equals_mha_on_repeated_kv",
            attend(q, k, v, {4, 2, d}, positions) == attend(q, k_rep, v_rep, {4, 4, d}, positions));
  });
  return s.take();
}

// ---------------------------------------------------------------- model

std::size_t closed_form_parameters(const ModelConfig& c, const SharingPlan& plan) {
  const std::size_t d = c.d_model, hd = c.head_dim(), qw = c.query_heads * hd, kvw = c.kv_heads * hd;
  std::size_t n = c.vocab * d + d + d * c.vocab;
  for (std::size_t l = 1; l <= c.layers; ++l) {
    n += 2 * d + d * qw + qw * d + d * 2 * c.ffn_dim + c.ffn_dim * d;
    if (plan.is_storage(l)) {
      n += 2 * d * kvw;
      continue;
    }
    const auto& r = plan.recipe(l);
    if (r.kind != ReconstructionKind::WeightedFusion) continue;
    const bool vec = r.granularity == WeightGranularity::Vector;
    n += r.key_sources.size() * (vec ? hd / 2 : 1) + r.value_sources.size() * (vec ? hd : 1);
  }
  return n;
}

std::vector<CheckResult> model_suite(const VerifyOptions& opts) {
  Suite s("model");

  s.guarded("parameter_accounting", [&] {
    bool ok = true;
    std::string detail;
    for (const auto& st : strategy_catalog()) {
      const Model m(desk_config(st.name()), opts.seed);
      if (m.parameter_count() != closed_form_parameters(m.config(), m.plan())) {
        ok = false;
        detail += st.name() + " ";
      }
      for (auto l : m.plan().reconstruction_layers()) ok = ok && !m.layer(l).has_kv_projection();
    }
    s.holds("parameter_count_closed_form", ok, detail);
  });

  s.guarded("loss_at_init", [&] {
    const Model m(desk_config("Vanilla"), opts.seed);
    TaskConfig tc;
    tc.kind = TaskKind::Copy;
    TaskSampler sampler(tc, m.config().vocab, opts.seed);
    const double loss = forward_loss(m, sampler.next());
    const double expected = std::log(static_cast<double>(m.config().vocab));
    s.below("initial_loss_near_log_vocab", std::abs(loss - expected) / expected, 0.15);
  });

  s.guarded("end_to_end_gradients", [&] {
    double worst = 0.0;
    std::string worst_name;
    Batch b;
    b.tokens = {{1, 5, 3, 7, 2, 9, 4, 6}, {0, 2, 4, 8, 10, 12, 14, 3}};
    for (const auto& st : strategy_catalog()) {
      const Model m(toy_config(st.name()), opts.seed);
      std::vector<Tensor> params;
      for (const auto& p : m.params()) params.push_back(p.value);
      ScalarFunction f = [&](Tape& tape, std::span<const Var> leaves) { return forward_loss(tape, m, leaves, b); };
      const double err = grad_check(f, params, 1e-5);
      if (err > worst) {
        worst = err;
        worst_name = st.name();
      }
    }
    s.below("full_model_grad_check", worst, 1e-4, "worst strategy " + worst_name);
  });

  auto decode_gap = [&](Precision precision) {
    double worst = 0.0;
    Rng rng(opts.seed);
    for (const auto& st : strategy_catalog()) {
      ModelConfig cfg = desk_config(st.name());
      cfg.precision = precision;
      const Model m(cfg, opts.seed);
      std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab) - 1);
      std::vector<int> prompt(32);
      for (auto& t : prompt) t = tok(rng);
      const DecodeResult r = decode(m, prompt, 16);
      std::vector<int> all = prompt;
      all.insert(all.end(), r.generated.begin(), r.generated.end() - 1);
      const Tensor full = full_logits(m, all);
      const std::size_t V = cfg.vocab;
      for (std::size_t i = 0; i < prompt.size() * V; ++i) worst = std::max(worst, std::abs(r.prompt_logits[i] - full[i]));
      for (std::size_t g = 0; g < r.step_logits.size(); ++g)
        for (std::size_t v = 0; v < V; ++v)
          worst = std::max(worst, std::abs(r.step_logits[g][v] - full[(prompt.size() - 1 + g) * V + v]));
    }
    return worst;
  };
  s.guarded("incremental_decode_double", [&] { s.below("incremental_decode_double", decode_gap(Precision::Double), 1e-10); });
  s.guarded("incremental_decode_single", [&] { s.below("incremental_decode_single", decode_gap(Precision::Single), 1e-4); });

  s.guarded("gradient_paths", [&] {
    bool ok = true;
    std::ostringstream detail;
    TaskConfig tc;
    for (const char* name : {"FusedKV", "FusedKV-Lite"}) {
      const Model m(desk_config(name), opts.seed);
      TaskSampler sampler(tc, m.config().vocab, opts.seed);
      const Batch b = sampler.next();
      for (const auto& [layer, recipe] : m.plan().recipes()) {
        (void)layer;
        for (int kind = 0; kind < 2; ++kind) {
          for (auto src : kind == 0 ? recipe.key_sources : recipe.value_sources) {
            const CachePathReport rep = cache_gradient_paths(m, b, src, kind == 0);
            const bool row = rep.consumers >= 2 && rep.grad_norm > 0.0;
            if (!row) detail << name << " layer " << src << (kind == 0 ? " K" : " V") << " has " << rep.consumers << " paths; ";
            ok = ok && row;
          }
        }
      }
    }
    s.holds("source_caches_have_multiple_gradient_paths", ok, detail.str());
  });
  return s.take();
}

// ---------------------------------------------------------------- costmodel

std::vector<CheckResult> costmodel_suite(const VerifyOptions&) {
  Suite s("costmodel");
  s.guarded("table_ratios", [&] {
    bool memory = true, io = true, lite_io = true;
    for (std::uint64_t L : {1u, 24u, 61u})
      for (std::uint64_t S : {1u, 1000u, 8192u}) {
        WorkloadSpec w{L, S, 0, 128, 16, 4, 2};
        const auto mha = table1_costs(CostMethod::MHA, w), fk = table1_costs(CostMethod::FusedKV, w),
                   lite = table1_costs(CostMethod::FusedKVLite, w);
        memory = memory && 2 * fk.cache_memory == mha.cache_memory;
        io = io && 2 * fk.cache_io == 3 * mha.cache_io;
        lite_io = lite_io && lite.cache_io == mha.cache_io;
      }
    s.holds("fusedkv_cache_memory_half", memory);
    s.holds("fusedkv_cache_io_three_halves", io);
    s.holds("lite_cache_io_unchanged", lite_io);
    WorkloadSpec w{24, 32768, 0, 128, 128, 2, 2};
    const auto gqa = table1_costs(CostMethod::MHA, w), yoco = table1_costs(CostMethod::YOCO, w),
               fk = table1_costs(CostMethod::FusedKV, w);
    // Fusion term against the 4S attention term of the decode row.
    const auto fusion = fk.decode_flops - yoco.decode_flops;
    const auto attention = w.layers * w.query_heads * w.head_dim * 4 * w.seq_len;
    s.holds("fusion_decode_overhead_3_over_256", fusion * 256 == attention * 3);
    (void)gqa;
  });

  s.guarded("monotonicity", [&] {
    bool ok = true;
    const WorkloadSpec base{8, 512, 0, 64, 8, 4, 2};
    for (auto m : all_cost_methods()) {
      for (int field = 0; field < 5; ++field) {
        WorkloadSpec a = base, b = base;
        std::uint64_t* fa[] = {&a.layers, &a.seq_len, &a.head_dim, &a.query_heads, &a.kv_heads};
        std::uint64_t* fb[] = {&b.layers, &b.seq_len, &b.head_dim, &b.query_heads, &b.kv_heads};
        *fb[field] = *fa[field] * 2;
        if (field == 4) b.query_heads = std::max(b.query_heads, b.kv_heads);
        const auto x = table1_costs(m, a), y = table1_costs(m, b);
        ok = ok && y.prefill_flops >= x.prefill_flops && y.decode_flops >= x.decode_flops &&
             y.cache_memory >= x.cache_memory && y.cache_io >= x.cache_io;
      }
    }
    s.holds("costs_nondecreasing_in_every_extent", ok);
  });

  s.guarded("roofline_regimes", [&] {
    double ttft_worst = 0.0, tpot_mem_worst = 0.0, tpot_compute_worst = 0.0;
    std::size_t compute_devices = 0;
    for (const auto& dev : builtin_devices()) {
      const WorkloadSpec mha_spec{24, 32768, 0, 128, 16, 16, 2};
      const auto base = roofline_latency(table1_costs(CostMethod::MHA, mha_spec), dev, 0.0);
      const auto fk = roofline_latency(table1_costs(CostMethod::FusedKV, mha_spec), dev, 0.0);
      ttft_worst = std::max(ttft_worst, std::abs(fk.ttft / base.ttft - 0.5));
      if (!base.decode_compute_bound && !fk.decode_compute_bound)
        tpot_mem_worst = std::max(tpot_mem_worst, std::abs(fk.tpot / base.tpot - 1.5));
      const WorkloadSpec gqa_spec{24, 32768, 0, 128, 128, 2, 2};
      const auto g = roofline_latency(table1_costs(CostMethod::MHA, gqa_spec), dev, 0.0);
      const auto gf = roofline_latency(table1_costs(CostMethod::FusedKV, gqa_spec), dev, 0.0);
      if (g.decode_compute_bound && gf.decode_compute_bound) {
        ++compute_devices;
        tpot_compute_worst = std::max(tpot_compute_worst, gf.tpot / g.tpot - 1.0);
      }
    }
    s.below("ttft_ratio_near_half", ttft_worst, 0.05);
    s.below("memory_bound_tpot_ratio_near_1_5", tpot_mem_worst, 0.05);
    s.holds("compute_bound_regime_reached", compute_devices > 0, std::to_string(compute_devices) + " devices");
    s.below("compute_bound_tpot_overhead", tpot_compute_worst, 3.0 / 256.0 + 0.01);
  });

  s.guarded("sweep_normalization", [&] {
    std::vector<WorkloadSpec> specs;
    for (std::uint64_t S : {1024u, 2048u, 4096u, 8192u}) specs.push_back({24, S, 0, 128, 16, 16, 2});
    const auto rows = sweep({CostMethod::MHA, CostMethod::FusedKVLite, CostMethod::FusedKV}, specs,
                            {builtin_device("h100")}, 0.0);
    bool mha_one = true, lite_io = true;
    for (const auto& r : rows) {
      if (r.method == CostMethod::MHA)
        mha_one = mha_one && r.ttft_ratio == 1.0 && r.tpot_ratio == 1.0 && r.cache_memory_ratio == 1.0 &&
                  r.cache_io_ratio == 1.0;
      if (r.method == CostMethod::FusedKVLite) lite_io = lite_io && r.cache_io_ratio == 1.0;
    }
    s.holds("sweep_row_count", rows.size() == 12);
    s.holds("sweep_mha_ratios_one", mha_one);
    s.holds("sweep_lite_io_ratio_one", lite_io);
  });
  return s.take();
}

}  // namespace

std::vector<std::string> verify_suite_names() {
  return {"numerics", "rope", "sharing", "attention", "model", "costmodel"};
}

std::vector<CheckResult> run_verify_suite(std::string_view suite, const VerifyOptions& opts) {
  if (suite == "all") {
    std::vector<CheckResult> all;
    for (const auto& name : verify_suite_names()) {
      auto part = run_verify_suite(name, opts);
      all.insert(all.end(), part.begin(), part.end());
    }
    return all;
  }
  if (suite == "numerics") return numerics_suite(opts);
  if (suite == "rope") return rope_suite(opts);
  if (suite == "sharing") return sharing_suite(opts);
  if (suite == "attention") return attention_suite(opts);
  if (suite == "model") return model_suite(opts);
  if (suite == "costmodel") return costmodel_suite(opts);
  throw std::invalid_argument("unknown suite '" + std::string(suite) +
                              "' (numerics|rope|sharing|attention|model|costmodel|all)");
}

}  // namespace kvshare
