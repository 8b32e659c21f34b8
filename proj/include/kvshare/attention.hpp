// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

#include "kvshare/autodiff.hpp"
#include "kvshare/rope.hpp"
#include "kvshare/sharing.hpp"
#include "kvshare/tensor.hpp"

namespace kvshare {

/// Head layout. Query head h reads kv head h / group_size().
struct AttentionConfig {
  std::size_t query_heads = 1;
  std::size_t kv_heads = 1;
  std::size_t head_dim = 2;

  std::size_t group_size() const { return query_heads / kv_heads; }
  void validate() const;
};

/// Causal attention of RoPE-rotated queries [H_q x s_q x D] against a cache whose key
/// positions are 0..len-1. A query at position p sees keys at positions <= p.
Tensor attend(const Tensor& q, const LayerCache& cache, const AttentionConfig& cfg,
              std::span<const std::size_t> q_positions);
Tensor attend(const Tensor& q, const Tensor& keys, const Tensor& values, const AttentionConfig& cfg,
              std::span<const std::size_t> q_positions);

/// Differentiable form of attend.
Var attention(Var q, Var keys, Var values, const AttentionConfig& cfg, std::span<const std::size_t> q_positions);

/// A cache together with a length-D weight applied to its keys or values.
struct WeightedSource {
  const LayerCache* cache = nullptr;
  Tensor weight;
};

/// Attention against sum_i a_i ⊙ K_i and sum_j b_j ⊙ V_j without materializing the fused
/// caches: scores are accumulated per source and values are mixed after the softmax.
/// Key weights must be pair-symmetric.
Tensor attend_fused(const Tensor& q, std::span<const WeightedSource> key_sources,
                    std::span<const WeightedSource> value_sources, const AttentionConfig& cfg,
                    std::span<const std::size_t> q_positions);

/// Fused-path attention for reconstruction layer `layer` of a weighted-fusion plan.
Tensor attend_fused(const Tensor& q, const SharingPlan& plan, const FusionWeights& weights, const CacheMap& stored,
                    std::size_t layer, const AttentionConfig& cfg, std::span<const std::size_t> q_positions);

}  // namespace kvshare
