// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kvshare/autodiff.hpp"
#include "kvshare/tensor.hpp"

namespace kvshare {

// Layer indices in this module are 1-based: layers are 1..L.

enum class StrategyKind {
  Vanilla,
  GQA,
  CLA,
  YOCO,
  FusedKV,
  FusedKVLite,
  FusedKVLiteRev,
  FusedKVLiteLearnable,
  DenseFusion,
  SourceIndex,  // valueXkeyY: top layers reuse V from layer X and K from layer Y
};

struct Strategy {
  StrategyKind kind = StrategyKind::Vanilla;
  std::size_t value_source = 0;  // SourceIndex only
  std::size_t key_source = 0;    // SourceIndex only

  /// Accepts the catalog names (case-insensitive), the short aliases Lite, Lite-Rev,
  /// Lite-Learnable, MHA, and source-index names such as value1key8.
  static Strategy parse(std::string_view name);
  std::string name() const;
  /// True for strategies whose storage block is 1..middle with the rest reconstructed.
  bool uses_middle() const;

  friend bool operator==(const Strategy&, const Strategy&) = default;
};

/// Every named strategy in the catalog (source-index ablations excluded).
std::vector<Strategy> strategy_catalog();

class PlanError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ReconstructionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ReconstructionKind { DirectReuse, WeightedFusion };
enum class WeightGranularity { Scalar, Vector };

/// How one reconstruction layer obtains its K and V.
struct LayerRecipe {
  std::size_t layer = 0;
  ReconstructionKind kind = ReconstructionKind::DirectReuse;
  WeightGranularity granularity = WeightGranularity::Scalar;
  std::vector<std::size_t> key_sources;
  std::vector<std::size_t> value_sources;

  /// The source set of the layer: union of key and value sources, ascending.
  std::vector<std::size_t> sources() const;
};

/// Partition of layers into storage and reconstruction sets plus the source mapping.
/// Construction validates that every source is an earlier storage layer, so evaluating
/// layers in order never reads a cache that has not been produced.
class SharingPlan {
 public:
  SharingPlan(std::size_t num_layers, std::vector<LayerRecipe> recipes, Strategy strategy = {});

  std::size_t num_layers() const { return num_layers_; }
  const Strategy& strategy() const { return strategy_; }
  const std::vector<std::size_t>& storage_layers() const { return storage_; }
  std::vector<std::size_t> reconstruction_layers() const;
  bool is_storage(std::size_t layer) const;
  const LayerRecipe& recipe(std::size_t layer) const;
  std::vector<std::size_t> sources(std::size_t layer) const { return recipe(layer).sources(); }
  const std::map<std::size_t, LayerRecipe>& recipes() const { return recipes_; }
  bool has_fusion_weights() const;
  /// True for FusedKV plans: storage 1..n, every layer i > n fuses {1, n} with vector weights.
  bool is_fusedkv_shaped() const;
  std::size_t last_storage_layer() const { return storage_.back(); }

 private:
  std::size_t num_layers_;
  Strategy strategy_;
  std::vector<std::size_t> storage_;
  std::map<std::size_t, LayerRecipe> recipes_;
};

SharingPlan plan_for_strategy(const Strategy& strategy, std::size_t num_layers, std::size_t middle);
SharingPlan plan_for_strategy(std::string_view name, std::size_t num_layers, std::size_t middle);

/// Post-RoPE keys and values of one layer, each [H_kv x s x D].
class LayerCache {
 public:
  LayerCache() = default;
  LayerCache(std::size_t layer, Tensor keys, Tensor values);
  static LayerCache empty(std::size_t layer, std::size_t kv_heads, std::size_t head_dim);

  std::size_t layer() const { return layer_; }
  const Tensor& keys() const { return keys_; }
  const Tensor& values() const { return values_; }
  std::size_t length() const { return keys_.dim(1); }
  std::size_t kv_heads() const { return keys_.dim(0); }
  std::size_t head_dim() const { return keys_.dim(2); }
  std::size_t elements() const { return keys_.size() + values_.size(); }

  /// Appends new positions ([H_kv x t x D] each) after the existing ones.
  void append(const Tensor& new_keys, const Tensor& new_values);

 private:
  std::size_t layer_ = 0;
  Tensor keys_;
  Tensor values_;
};

using CacheMap = std::map<std::size_t, LayerCache>;

/// One weighted source. The weight tensor has one element for scalar fusion; for vector
/// fusion it holds D/2 pair values for keys and D values for values.
struct FusionTerm {
  std::size_t source = 0;
  Tensor weight;
};

struct LayerFusionWeights {
  std::vector<FusionTerm> key;
  std::vector<FusionTerm> value;
};

struct FusionWeights {
  std::size_t head_dim = 0;
  std::map<std::size_t, LayerFusionWeights> layers;

  const LayerFusionWeights& at(std::size_t layer) const;
  const FusionTerm& key_term(std::size_t layer, std::size_t source) const;
  const FusionTerm& value_term(std::size_t layer, std::size_t source) const;
  /// Length-D key weight for (layer, source), pair values duplicated.
  Tensor key_weight_expanded(std::size_t layer, std::size_t source) const;
  /// Length-D value weight for (layer, source), scalars broadcast.
  Tensor value_weight_expanded(std::size_t layer, std::size_t source) const;
};

struct KVPair {
  Var keys;
  Var values;
};

/// Differentiable reconstruction of one layer. `key_weights` / `value_weights` line up with
/// recipe.key_sources / recipe.value_sources and are ignored for direct reuse.
KVPair reconstruct(const LayerRecipe& recipe, std::span<const Var> key_weights,
                   std::span<const Var> value_weights, const std::map<std::size_t, KVPair>& stored);

/// Value-level reconstruction of layer `layer` from stored caches.
std::pair<Tensor, Tensor> reconstruct(const SharingPlan& plan, const FusionWeights& weights,
                                      const CacheMap& stored, std::size_t layer);

/// Ones for every key and value term (selector-free identity weights).
FusionWeights init_ones(const SharingPlan& plan, std::size_t head_dim);

/// Every free entry drawn from N(0, 1); key vectors draw one value per rotary pair.
FusionWeights init_normal(const SharingPlan& plan, std::uint64_t seed, std::size_t head_dim);

/// Per-layer weights of the chained (iterative) reconstruction.
/// For the first reconstruction layer n+1:
///   K = key_carry ⊙ K^1 + key_middle ⊙ K^n,   V = value_first ⊙ V^1 + value_carry ⊙ V^n.
/// For i > n+1:
///   K = key_carry ⊙ K^{i-1} + key_middle ⊙ K^n,   V = value_carry ⊙ V^{i-1} + value_first ⊙ V^1.
/// Key weights store D/2 pair values (or a single scalar); value weights D values (or a scalar).
struct ChainWeights {
  Tensor key_carry;
  Tensor key_middle;
  Tensor value_carry;
  Tensor value_first;
};

struct AuxiliaryWeights {
  std::size_t head_dim = 0;
  std::map<std::size_t, ChainWeights> layers;
};

AuxiliaryWeights sample_auxiliary(const SharingPlan& plan, std::uint64_t seed, std::size_t head_dim,
                                  WeightGranularity granularity = WeightGranularity::Vector);

/// Standard two-source weights whose reconstruction equals the chained one at init.
FusionWeights init_equivalent(const SharingPlan& plan, const AuxiliaryWeights& aux);

/// Chained reconstruction of every reconstruction layer of a FusedKV-shaped plan.
CacheMap iterative_reconstruct(const SharingPlan& plan, const AuxiliaryWeights& aux, const CacheMap& stored);

std::string to_string(ReconstructionKind kind);
std::string to_string(WeightGranularity granularity);

}  // namespace kvshare
