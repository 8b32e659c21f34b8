// SPDX-License-Identifier: Apache-2.0
#include "kvshare/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvshare {

void AttentionConfig::validate() const {
  if (query_heads == 0 || kv_heads == 0 || query_heads % kv_heads != 0) {
    throw DimensionError("query heads " + std::to_string(query_heads) + " not divisible by kv heads " +
                         std::to_string(kv_heads));
  }
  if (head_dim == 0 || head_dim % 2 != 0) throw DimensionError("head_dim must be even and positive");
}

namespace {

struct Geometry {
  std::size_t hq, hkv, group, sq, sk, d;
};

Geometry check_operands(const Shape& q, const Shape& k, const Shape& v, const AttentionConfig& cfg,
                        std::span<const std::size_t> q_positions) {
  cfg.validate();
  if (q.size() != 3 || q[0] != cfg.query_heads || q[2] != cfg.head_dim) {
    throw DimensionError("queries " + shape_to_string(q) + " do not match " + std::to_string(cfg.query_heads) +
                         " heads of dim " + std::to_string(cfg.head_dim));
  }
  if (k.size() != 3 || k != v || k[0] != cfg.kv_heads || k[2] != cfg.head_dim) {
    throw DimensionError("keys " + shape_to_string(k) + " / values " + shape_to_string(v) +
                         " do not match the kv head grouping");
  }
  if (q_positions.size() != q[1]) {
    throw std::invalid_argument("got " + std::to_string(q_positions.size()) + " query positions for " +
                                std::to_string(q[1]) + " queries");
  }
  for (auto p : q_positions) {
    if (p >= k[1]) {
      throw std::invalid_argument("query position " + std::to_string(p) + " has no key in a cache of length " +
                                  std::to_string(k[1]));
    }
  }
  return {cfg.query_heads, cfg.kv_heads, cfg.group_size(), q[1], k[1], cfg.head_dim};
}

// Normalizes row[0..visible) in place as softmax(scale * row).
void softmax_prefix(double* row, std::size_t visible, double scale) {
  double mx = -INFINITY;
  for (std::size_t c = 0; c < visible; ++c) mx = std::max(mx, scale * row[c]);
  double denom = 0.0;
  for (std::size_t c = 0; c < visible; ++c) {
    row[c] = std::exp(scale * row[c] - mx);
    denom += row[c];
  }
  for (std::size_t c = 0; c < visible; ++c) row[c] /= denom;
}

// Writes probabilities [hq x sq x sk] and the output [hq x sq x d].
void attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, const Geometry& g,
                       std::span<const std::size_t> q_positions, Tensor& probs, Tensor& out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(g.d));
  probs = Tensor({g.hq, g.sq, g.sk});
  out = Tensor({g.hq, g.sq, g.d});
  for (std::size_t h = 0; h < g.hq; ++h) {
    const std::size_t kvh = h / g.group;
    for (std::size_t r = 0; r < g.sq; ++r) {
      const std::size_t visible = q_positions[r] + 1;
      const double* qr = &q[(h * g.sq + r) * g.d];
      double* pr = &probs[(h * g.sq + r) * g.sk];
      for (std::size_t c = 0; c < visible; ++c) {
        const double* kc = &k[(kvh * g.sk + c) * g.d];
        double s = 0.0;
        for (std::size_t e = 0; e < g.d; ++e) s += qr[e] * kc[e];
        pr[c] = s;
      }
      softmax_prefix(pr, visible, scale);
      double* orow = &out[(h * g.sq + r) * g.d];
      for (std::size_t c = 0; c < visible; ++c) {
        const double* vc = &v[(kvh * g.sk + c) * g.d];
        for (std::size_t e = 0; e < g.d; ++e) orow[e] += pr[c] * vc[e];
      }
    }
  }
}

}  // namespace

Tensor attend(const Tensor& q, const Tensor& keys, const Tensor& values, const AttentionConfig& cfg,
              std::span<const std::size_t> q_positions) {
  const Geometry g = check_operands(q.shape(), keys.shape(), values.shape(), cfg, q_positions);
  Tensor probs, out;
  attention_forward(q, keys, values, g, q_positions, probs, out);
  return out;
}

Tensor attend(const Tensor& q, const LayerCache& cache, const AttentionConfig& cfg,
              std::span<const std::size_t> q_positions) {
  return attend(q, cache.keys(), cache.values(), cfg, q_positions);
}

Var attention(Var q, Var keys, Var values, const AttentionConfig& cfg, std::span<const std::size_t> q_positions) {
  const Geometry g = check_operands(q.shape(), keys.shape(), values.shape(), cfg, q_positions);
  Tensor probs, out;
  attention_forward(q.value(), keys.value(), values.value(), g, q_positions, probs, out);
  std::vector<std::size_t> pos(q_positions.begin(), q_positions.end());
  return q.tape().push(
      "attention", std::move(out), {q.id(), keys.id(), values.id()},
      [g, pos = std::move(pos), probs = std::move(probs)](Tape& t, std::size_t self) {
        const std::size_t pq = t.parents(self)[0], pk = t.parents(self)[1], pv = t.parents(self)[2];
        const Tensor& qv = t.value(pq);
        const Tensor& kv = t.value(pk);
        const Tensor& vv = t.value(pv);
        const Tensor dout = t.grad(self);
        Tensor* dq = t.requires_grad(pq) ? &t.grad_slot(pq) : nullptr;
        Tensor* dk = t.requires_grad(pk) ? &t.grad_slot(pk) : nullptr;
        Tensor* dv = t.requires_grad(pv) ? &t.grad_slot(pv) : nullptr;
        const double scale = 1.0 / std::sqrt(static_cast<double>(g.d));
        std::vector<double> dp(g.sk);
        for (std::size_t h = 0; h < g.hq; ++h) {
          const std::size_t kvh = h / g.group;
          for (std::size_t r = 0; r < g.sq; ++r) {
            const std::size_t visible = pos[r] + 1;
            const double* pr = &probs[(h * g.sq + r) * g.sk];
            const double* dor = &dout[(h * g.sq + r) * g.d];
            double dot = 0.0;
            for (std::size_t c = 0; c < visible; ++c) {
              const double* vc = &vv[(kvh * g.sk + c) * g.d];
              double s = 0.0;
              for (std::size_t e = 0; e < g.d; ++e) s += dor[e] * vc[e];
              dp[c] = s;
              dot += pr[c] * s;
            }
            if (dv) {
              for (std::size_t c = 0; c < visible; ++c) {
                double* dvc = &(*dv)[(kvh * g.sk + c) * g.d];
                for (std::size_t e = 0; e < g.d; ++e) dvc[e] += pr[c] * dor[e];
              }
            }
            const double* qr = &qv[(h * g.sq + r) * g.d];
            for (std::size_t c = 0; c < visible; ++c) {
              const double ds = scale * pr[c] * (dp[c] - dot);
              if (ds == 0.0) continue;
              const double* kc = &kv[(kvh * g.sk + c) * g.d];
              if (dq) {
                double* dqr = &(*dq)[(h * g.sq + r) * g.d];
                for (std::size_t e = 0; e < g.d; ++e) dqr[e] += ds * kc[e];
              }
              if (dk) {
                double* dkc = &(*dk)[(kvh * g.sk + c) * g.d];
                for (std::size_t e = 0; e < g.d; ++e) dkc[e] += ds * qr[e];
              }
            }
          }
        }
      });
}

Tensor attend_fused(const Tensor& q, std::span<const WeightedSource> key_sources,
                    std::span<const WeightedSource> value_sources, const AttentionConfig& cfg,
                    std::span<const std::size_t> q_positions) {
  if (key_sources.empty() || value_sources.empty()) throw std::invalid_argument("attend_fused needs sources");
  for (const auto* list : {&key_sources, &value_sources}) {
    for (const auto& src : *list) {
      if (!src.cache) throw std::invalid_argument("attend_fused: null source cache");
      if (src.weight.size() != cfg.head_dim) {
        throw DimensionError("attend_fused weight " + shape_to_string(src.weight.shape()) +
                             " does not match head_dim " + std::to_string(cfg.head_dim));
      }
      if (src.cache->keys().shape() != key_sources[0].cache->keys().shape()) {
        throw std::invalid_argument("attend_fused sources differ in shape");
      }
    }
  }
  for (const auto& src : key_sources) {
    for (std::size_t j = 0; j < cfg.head_dim / 2; ++j) {
      if (src.weight[2 * j] != src.weight[2 * j + 1]) {
        throw std::invalid_argument("attend_fused key weights must be pair-symmetric");
      }
    }
  }
  const Tensor& ref = key_sources[0].cache->keys();
  const Geometry g = check_operands(q.shape(), ref.shape(), ref.shape(), cfg, q_positions);
  const double scale = 1.0 / std::sqrt(static_cast<double>(g.d));

  Tensor out({g.hq, g.sq, g.d});
  std::vector<double> row(g.sk);
  std::vector<double> mixed(g.d);
  std::vector<double> weighted_q(g.d);
  for (std::size_t h = 0; h < g.hq; ++h) {
    const std::size_t kvh = h / g.group;
    for (std::size_t r = 0; r < g.sq; ++r) {
      const std::size_t visible = q_positions[r] + 1;
      const double* qr = &q[(h * g.sq + r) * g.d];
      std::fill(row.begin(), row.end(), 0.0);
      for (const auto& src : key_sources) {
        for (std::size_t e = 0; e < g.d; ++e) weighted_q[e] = qr[e] * src.weight[e];
        const Tensor& k = src.cache->keys();
        for (std::size_t c = 0; c < visible; ++c) {
          const double* kc = &k[(kvh * g.sk + c) * g.d];
          double s = 0.0;
          for (std::size_t e = 0; e < g.d; ++e) s += weighted_q[e] * kc[e];
          row[c] += s;
        }
      }
      softmax_prefix(row.data(), visible, scale);
      double* orow = &out[(h * g.sq + r) * g.d];
      for (const auto& src : value_sources) {
        std::fill(mixed.begin(), mixed.end(), 0.0);
        const Tensor& v = src.cache->values();
        for (std::size_t c = 0; c < visible; ++c) {
          const double* vc = &v[(kvh * g.sk + c) * g.d];
          for (std::size_t e = 0; e < g.d; ++e) mixed[e] += row[c] * vc[e];
        }
        for (std::size_t e = 0; e < g.d; ++e) orow[e] += src.weight[e] * mixed[e];
      }
    }
  }
  return out;
}

Tensor attend_fused(const Tensor& q, const SharingPlan& plan, const FusionWeights& weights, const CacheMap& stored,
                    std::size_t layer, const AttentionConfig& cfg, std::span<const std::size_t> q_positions) {
  const LayerRecipe& recipe = plan.recipe(layer);
  auto cache_of = [&](std::size_t src) -> const LayerCache* {
    auto it = stored.find(src);
    if (it == stored.end()) {
      throw ReconstructionError("layer " + std::to_string(layer) + " needs missing source cache " + std::to_string(src));
    }
    return &it->second;
  };
  const bool fused = recipe.kind == ReconstructionKind::WeightedFusion;
  std::vector<WeightedSource> keys, values;
  for (auto src : recipe.key_sources) {
    keys.push_back({cache_of(src), fused ? weights.key_weight_expanded(layer, src) : Tensor({cfg.head_dim}, 1.0)});
  }
  for (auto src : recipe.value_sources) {
    values.push_back(
        {cache_of(src), fused ? weights.value_weight_expanded(layer, src) : Tensor({cfg.head_dim}, 1.0)});
  }
  return attend_fused(q, keys, values, cfg, q_positions);
}

}  // namespace kvshare
