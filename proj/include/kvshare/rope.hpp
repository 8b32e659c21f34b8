// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kvshare/autodiff.hpp"
#include "kvshare/tensor.hpp"

namespace kvshare {

inline constexpr double kDefaultRopeBase = 10000.0;

/// Rotation frequencies theta_j = base^(-2j/D) for each of the D/2 two-dimensional subspaces.
class RopeSchedule {
 public:
  explicit RopeSchedule(std::size_t head_dim, double base = kDefaultRopeBase);

  std::size_t head_dim() const { return head_dim_; }
  std::size_t pairs() const { return angles_.size(); }
  double base() const { return base_; }
  double angle(std::size_t j) const { return angles_.at(j); }
  std::span<const double> angles() const { return angles_; }

 private:
  std::size_t head_dim_;
  double base_;
  std::vector<double> angles_;
};

/// Learnable key weight whose two entries in each rotary pair are one stored value,
/// so w[2j] == w[2j+1] holds by construction.
class PairSymmetricWeight {
 public:
  PairSymmetricWeight() = default;
  explicit PairSymmetricWeight(Tensor free);
  static PairSymmetricWeight ones(std::size_t head_dim);

  const Tensor& free() const { return free_; }
  Tensor& free() { return free_; }
  std::size_t head_dim() const { return 2 * free_.size(); }
  Tensor expanded() const;

 private:
  Tensor free_;
};

/// Rotates every row of x (last axis D, second-to-last axis the sequence) by its position.
/// Leading axes, if any, are treated as independent heads sharing the positions.
Tensor apply_rope(const Tensor& x, std::span<const std::size_t> positions, const RopeSchedule& sched);
/// Differentiable rotation; the backward pass rotates by the negated angle.
Var apply_rope(Var x, std::span<const std::size_t> positions, const RopeSchedule& sched);

/// q_m^T (w ⊙ k_n) after rotating q to position m and k to position n.
double score_direct(const Tensor& q, const Tensor& k, std::size_t m, std::size_t n,
                    std::span<const double> w, const RopeSchedule& sched);

/// Same score assembled from the relative-position bracket (weighted by the pair mean) and
/// the absolute-position bracket (weighted by half the pair difference).
double score_decomposed(const Tensor& q, const Tensor& k, std::size_t m, std::size_t n,
                        std::span<const double> w, const RopeSchedule& sched);

/// Score of rotated q against sum_i w_i ⊙ rotated k_i, with every key at position n.
double fused_key_score(const Tensor& q, std::span<const Tensor> keys, std::size_t m, std::size_t n,
                       std::span<const PairSymmetricWeight> weights, const RopeSchedule& sched);

}  // namespace kvshare
