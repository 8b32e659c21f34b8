// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "kvshare/model.hpp"
#include "kvshare/tasks.hpp"

namespace kvshare {

struct OptimizerConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;  // applied to matrices only
  double grad_clip = 1.0;     // global L2 norm; 0 disables
  bool cosine = false;        // cosine decay to lr * min_lr_ratio after warmup
  std::size_t warmup = 0;
  double min_lr_ratio = 0.1;

  double learning_rate(std::size_t step, std::size_t total_steps) const;
};

struct TrainConfig {
  TaskConfig task;
  std::size_t steps = 500;
  std::size_t eval_interval = 10;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
};

/// L2 norms of the Q/K/V projection gradients of one layer at one step.
/// Reconstruction layers have no K/V projections and report has_kv = false.
struct GradNormRecord {
  std::size_t step = 0;
  std::size_t layer = 0;
  double q = 0.0;
  double k = 0.0;
  double v = 0.0;
  bool has_kv = false;
};

struct TrainReport {
  std::vector<double> losses;  // training-batch loss before each update
  std::vector<std::size_t> eval_steps;
  std::vector<double> eval_losses;  // loss on a fixed held-out batch
  std::vector<GradNormRecord> grad_norms;
  std::optional<FusionHeatmap> heatmap;

  double initial_eval_loss() const { return eval_losses.front(); }
  double final_eval_loss() const { return eval_losses.back(); }
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, double loss);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// AdamW over all parameters. Evaluates on a fixed batch at step 0, every eval_interval
/// steps and after the last step. Deterministic for a fixed model seed and config.
TrainReport train(Model& model, const TrainConfig& cfg);

/// Distinct tape consumers of storage layer `layer`'s keys (or values) in one forward pass,
/// together with the L2 norm of the gradient that reaches that cache.
struct CachePathReport {
  std::size_t consumers = 0;
  std::vector<std::string> consumer_ops;
  double grad_norm = 0.0;
};
CachePathReport cache_gradient_paths(const Model& model, const Batch& batch, std::size_t layer, bool keys);

void write_loss_csv(std::ostream& os, const TrainReport& report);
void write_grad_norm_csv(std::ostream& os, const TrainReport& report);
void write_heatmap_csv(std::ostream& os, const FusionHeatmap& heatmap);

}  // namespace kvshare
