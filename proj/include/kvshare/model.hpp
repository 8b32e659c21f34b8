// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kvshare/attention.hpp"
#include "kvshare/autodiff.hpp"
#include "kvshare/rope.hpp"
#include "kvshare/sharing.hpp"
#include "kvshare/tensor.hpp"

namespace kvshare {

enum class InitScheme { Normal, Equivalent };

std::string to_string(InitScheme scheme);
InitScheme parse_init_scheme(std::string_view name);
std::string to_string(Precision precision);
Precision parse_precision(std::string_view name);

struct ModelConfig {
  std::size_t layers = 8;
  std::size_t d_model = 64;
  std::size_t query_heads = 8;
  std::size_t kv_heads = 8;
  std::size_t vocab = 64;
  std::size_t max_seq = 128;
  std::size_t ffn_dim = 128;
  std::string strategy = "Vanilla";
  std::size_t middle = 4;  // 0 selects layers / 2
  InitScheme init = InitScheme::Normal;
  double init_std = 0.02;
  double rope_base = kDefaultRopeBase;
  Precision precision = Precision::Double;

  std::size_t head_dim() const { return d_model / query_heads; }
  std::size_t resolved_middle() const { return middle == 0 ? layers / 2 : middle; }
  AttentionConfig attention() const { return {query_heads, kv_heads, head_dim()}; }
  void validate() const;

  /// key=value lines, one field per line, in a fixed order.
  std::string to_key_values() const;
  /// Applies one key=value setting; returns false for keys this struct does not own.
  bool set(std::string_view key, std::string_view value);
};

/// Desk-scale defaults for a strategy: L=8, d_model=64, 8 query heads, 4 kv heads for GQA.
ModelConfig desk_config(std::string_view strategy);
/// Two storage plus two reconstruction layers at d_model=16, sized for finite differences.
/// init_std is 0.2: at 0.02 the embeddings sit deep in RMSNorm's high-curvature region.
ModelConfig toy_config(std::string_view strategy);

struct Parameter {
  std::string name;
  Tensor value;
  bool decay = false;  // AdamW weight decay applies
};

/// Indices into Model::params() for one decoder layer. Reconstruction layers have no
/// key/value projections; their fusion weights line up with the recipe's source lists.
struct LayerParams {
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::size_t attn_norm = kNone, wq = kNone, wk = kNone, wv = kNone, wo = kNone;
  std::size_t mlp_norm = kNone, w_up = kNone, w_down = kNone;
  std::vector<std::size_t> key_fusion;
  std::vector<std::size_t> value_fusion;

  bool has_kv_projection() const { return wk != kNone; }
};

/// Token sequences plus per-position loss masks. mask[b][t] selects whether predicting
/// tokens[b][t+1] from position t enters the loss; an empty mask counts every position.
struct Batch {
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<std::uint8_t>> mask;
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);
  /// Reassembles a model from stored parameters (names and shapes must match the config).
  Model(ModelConfig cfg, std::vector<Parameter> params);

  const ModelConfig& config() const { return cfg_; }
  const SharingPlan& plan() const { return plan_; }
  const RopeSchedule& rope() const { return rope_; }
  const std::vector<Parameter>& params() const { return params_; }
  std::vector<Parameter>& params() { return params_; }
  const LayerParams& layer(std::size_t layer) const { return layers_.at(layer - 1); }
  std::size_t parameter_count() const;
  std::size_t find_param(std::string_view name) const;

  /// Current fusion weights keyed like the plan.
  FusionWeights fusion_weights() const;

 private:
  void layout();

  ModelConfig cfg_;
  SharingPlan plan_;
  RopeSchedule rope_;
  std::vector<Parameter> params_;
  std::vector<LayerParams> layers_;
};

/// Node ids recorded during a forward pass, for gradient-path inspection.
struct ForwardTrace {
  std::map<std::size_t, KVPair> layer_kv;  // K/V consumed by every layer's attention
};

/// Logits [s x vocab] for `tokens` placed at positions start..start+s-1. With `caches`, the
/// storage layers append their new K/V there and attend over the full cached prefix; without,
/// the tokens are the whole sequence and start must be 0.
Var forward_logits(Tape& tape, const Model& model, std::span<const Var> params, std::span<const int> tokens,
                   std::size_t start, CacheMap* caches, ForwardTrace* trace = nullptr);

/// Leaves for every model parameter, in parameter order.
std::vector<Var> parameter_leaves(Tape& tape, const Model& model, bool requires_grad);

/// Mean next-token cross-entropy over the masked positions of the batch.
Var forward_loss(Tape& tape, const Model& model, std::span<const Var> params, const Batch& batch,
                 ForwardTrace* trace = nullptr);
double forward_loss(const Model& model, const Batch& batch);

struct LossAndGradients {
  double loss = 0.0;
  std::vector<Tensor> grads;
};
LossAndGradients loss_and_gradients(const Model& model, const Batch& batch);

/// Full-sequence logits without caches.
Tensor full_logits(const Model& model, std::span<const int> tokens);

struct DecodeResult {
  std::vector<int> generated;
  Tensor prompt_logits;             // [prompt_len x vocab] from prefill
  std::vector<Tensor> step_logits;  // logits that chose generated[i]
  std::size_t peak_cache_elements = 0;
  std::size_t persistent_caches = 0;
  std::size_t cache_length = 0;
};

/// Greedy decoding. Only storage layers keep a LayerCache between steps; reconstruction
/// layers rebuild their K/V from those caches on every step.
DecodeResult decode(const Model& model, std::span<const int> prompt, std::size_t new_tokens);

/// Target x source matrices of learned fusion weights: scalar weights as stored, vector
/// weights as mean absolute value. Rows follow the reconstruction layers in order.
struct FusionHeatmap {
  std::vector<std::size_t> targets;
  std::vector<std::size_t> key_sources;
  std::vector<std::size_t> value_sources;
  Tensor key;
  Tensor value;
};

FusionHeatmap fusion_weight_heatmap(const Model& model);

}  // namespace kvshare
