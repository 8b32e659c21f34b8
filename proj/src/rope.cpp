// SPDX-License-Identifier: Apache-2.0
#include "kvshare/rope.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace kvshare {

RopeSchedule::RopeSchedule(std::size_t head_dim, double base) : head_dim_(head_dim), base_(base) {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw DimensionError("rope head_dim must be even and positive, got " + std::to_string(head_dim));
  }
  if (!(base > 1.0)) throw std::invalid_argument("rope base must exceed 1");
  angles_.resize(head_dim / 2);
  for (std::size_t j = 0; j < angles_.size(); ++j) {
    angles_[j] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
  }
}

PairSymmetricWeight::PairSymmetricWeight(Tensor free) : free_(std::move(free)) {
  if (free_.rank() != 1) throw DimensionError("pair-symmetric weight needs a vector of D/2 values");
}

PairSymmetricWeight PairSymmetricWeight::ones(std::size_t head_dim) {
  return PairSymmetricWeight(Tensor({head_dim / 2}, 1.0));
}

Tensor PairSymmetricWeight::expanded() const {
  Tensor w({head_dim()});
  for (std::size_t j = 0; j < free_.size(); ++j) w[2 * j] = w[2 * j + 1] = free_[j];
  return w;
}

namespace {

void check_rope_input(const Shape& shape, std::size_t positions, const RopeSchedule& sched) {
  if (shape.size() < 2 || shape.back() != sched.head_dim() || shape[shape.size() - 2] != positions) {
    throw DimensionError("rope input " + shape_to_string(shape) + " does not match head_dim " +
                         std::to_string(sched.head_dim()) + " and " + std::to_string(positions) +
                         " positions");
  }
}

// sign = +1 rotates forward, -1 applies the inverse rotation.
void rotate_into(const Tensor& x, Tensor& out, std::span<const std::size_t> positions,
                 const RopeSchedule& sched, double sign, bool accumulate) {
  const std::size_t d = sched.head_dim();
  const std::size_t s = positions.size();
  const std::size_t blocks = x.size() / (s * d);
  for (std::size_t r = 0; r < s; ++r) {
    const double pos = static_cast<double>(positions[r]);
    for (std::size_t j = 0; j < sched.pairs(); ++j) {
      const double c = std::cos(pos * sched.angle(j));
      const double sn = sign * std::sin(pos * sched.angle(j));
      for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t base = (b * s + r) * d + 2 * j;
        const double x0 = x[base], x1 = x[base + 1];
        const double y0 = x0 * c - x1 * sn;
        const double y1 = x0 * sn + x1 * c;
        if (accumulate) {
          out[base] += y0;
          out[base + 1] += y1;
        } else {
          out[base] = y0;
          out[base + 1] = y1;
        }
      }
    }
  }
}

void check_vectors(const Tensor& q, const Tensor& k, std::span<const double> w, const RopeSchedule& sched) {
  const std::size_t d = sched.head_dim();
  if (q.size() != d || k.size() != d || w.size() != d) {
    throw DimensionError("score inputs must all have length " + std::to_string(d));
  }
}

}  // namespace

Tensor apply_rope(const Tensor& x, std::span<const std::size_t> positions, const RopeSchedule& sched) {
  check_rope_input(x.shape(), positions.size(), sched);
  Tensor out(x.shape());
  rotate_into(x, out, positions, sched, 1.0, false);
  return out;
}

Var apply_rope(Var x, std::span<const std::size_t> positions, const RopeSchedule& sched) {
  check_rope_input(x.shape(), positions.size(), sched);
  Tensor out(x.shape());
  rotate_into(x.value(), out, positions, sched, 1.0, false);
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  return x.tape().push("rope", std::move(out), {x.id()},
                       [pos = std::move(pos), sched](Tape& t, std::size_t self) {
                         const std::size_t p = t.parents(self)[0];
                         if (!t.requires_grad(p)) return;
                         rotate_into(t.grad(self), t.grad_slot(p), pos, sched, -1.0, true);
                       });
}

double score_direct(const Tensor& q, const Tensor& k, std::size_t m, std::size_t n,
                    std::span<const double> w, const RopeSchedule& sched) {
  check_vectors(q, k, w, sched);
  const std::size_t d = sched.head_dim();
  const std::size_t qm[] = {m};
  const std::size_t kn[] = {n};
  const Tensor qr = apply_rope(q.reshaped({1, d}), qm, sched);
  const Tensor kr = apply_rope(k.reshaped({1, d}), kn, sched);
  double score = 0.0;
  for (std::size_t i = 0; i < d; ++i) score += qr[i] * w[i] * kr[i];
  return score;
}

double score_decomposed(const Tensor& q, const Tensor& k, std::size_t m, std::size_t n,
                        std::span<const double> w, const RopeSchedule& sched) {
  check_vectors(q, k, w, sched);
  const double rel = static_cast<double>(m) - static_cast<double>(n);
  const double abs_sum = static_cast<double>(m) + static_cast<double>(n);
  double score = 0.0;
  for (std::size_t j = 0; j < sched.pairs(); ++j) {
    const double q0 = q[2 * j], q1 = q[2 * j + 1];
    const double k0 = k[2 * j], k1 = k[2 * j + 1];
    const double mean = (w[2 * j] + w[2 * j + 1]) / 2.0;
    const double half_diff = (w[2 * j] - w[2 * j + 1]) / 2.0;
    const double th = sched.angle(j);
    const double relative = (q0 * k0 + q1 * k1) * std::cos(rel * th) + (q0 * k1 - q1 * k0) * std::sin(rel * th);
    const double absolute =
        (q0 * k0 - q1 * k1) * std::cos(abs_sum * th) - (q0 * k1 + q1 * k0) * std::sin(abs_sum * th);
    score += mean * relative + half_diff * absolute;
  }
  return score;
}

double fused_key_score(const Tensor& q, std::span<const Tensor> keys, std::size_t m, std::size_t n,
                       std::span<const PairSymmetricWeight> weights, const RopeSchedule& sched) {
  if (keys.size() != weights.size()) {
    throw std::invalid_argument("fused_key_score: " + std::to_string(keys.size()) + " keys but " +
                                std::to_string(weights.size()) + " weights");
  }
  const std::size_t d = sched.head_dim();
  if (q.size() != d) throw DimensionError("query length must equal head_dim");
  const std::size_t kn[] = {n};
  const std::size_t qm[] = {m};
  Tensor fused({d});
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (keys[i].size() != d || weights[i].head_dim() != d) {
      throw DimensionError("fused key source " + std::to_string(i) + " has the wrong length");
    }
    const Tensor kr = apply_rope(keys[i].reshaped({1, d}), kn, sched);
    const Tensor w = weights[i].expanded();
    for (std::size_t c = 0; c < d; ++c) fused[c] += w[c] * kr[c];
  }
  const Tensor qr = apply_rope(q.reshaped({1, d}), qm, sched);
  double score = 0.0;
  for (std::size_t c = 0; c < d; ++c) score += qr[c] * fused[c];
  return score;
}

}  // namespace kvshare
