// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kvshare/tensor.hpp"

namespace kvshare {

enum class Precision { Double, Single };

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  /// Accumulated gradient after Tape::backward; zeros if the node got none.
  Tensor grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node list is
/// already a topological order and backward is a single reverse sweep.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t node)>;

  explicit Tape(Precision precision = Precision::Double) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const { return precision_; }

  Var leaf(Tensor value, bool requires_grad = false, std::string name = {});
  /// Registers an op result. The backward closure reads grad(node) and accumulates into
  /// grad_slot(parent) for each parent that requires_grad.
  Var push(std::string op, Tensor value, std::vector<std::size_t> parents, Backward backward);

  Var var(std::size_t id) { return Var(this, id); }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }
  Tensor grad(std::size_t id) const;
  /// Gradient accumulator for a node, allocated as zeros on first use.
  Tensor& grad_slot(std::size_t id);

  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  const std::string& name(std::size_t id) const { return nodes_.at(id).name; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  /// Nodes that read `id` as an operand, in tape order.
  std::vector<std::size_t> consumers(std::size_t id) const;
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 and runs every registered backward rule once, newest first.
  void backward(Var root);

 private:
  struct Node {
    std::string op;
    std::string name;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
  };

  void round_if_single(Tensor& t) const;

  Precision precision_;
  std::vector<Node> nodes_;
};

// Differentiable ops. All operands must live on the same tape.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var matmul(Var a, Var b);
Var softmax_causal(Var scores, double scale);
Var rmsnorm(Var x, Var gain);
Var swiglu(Var x);

/// Rows of `table` [vocab x d] gathered by token id -> [tokens x d].
Var embedding(Var table, std::span<const int> tokens);
/// Sum over rows of -log softmax(logits)[target]; rows whose target is negative are skipped.
Var cross_entropy_sum(Var logits, std::span<const int> targets);

/// [s x heads*D] -> [heads x s x D].
Var split_heads(Var x, std::size_t heads);
/// [heads x s x D] -> [s x heads*D].
Var merge_heads(Var x);

/// x[..., D] * w[D], broadcast over the leading axes.
Var scale_last_axis(Var x, Var w);
/// x * w where w has one element.
Var scale_by_scalar(Var x, Var w);
/// free[D/2] -> w[D] with w[2j] = w[2j+1] = free[j]. Gradients of both copies
/// accumulate into the free entry.
Var expand_pairs(Var free);

/// Scalar-valued computation over a list of parameter leaves.
using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double autodiff_value = 0.0;
  double numeric_value = 0.0;
  std::size_t entries_checked = 0;
};

/// Compares tape gradients against central differences over every parameter entry.
/// Relative error per entry is |autodiff - numeric| / (|numeric| + 1e-8).
GradCheckReport grad_check_report(const ScalarFunction& f, const std::vector<Tensor>& params,
                                  double h = 1e-5);
double grad_check(const ScalarFunction& f, const std::vector<Tensor>& params, double h = 1e-5);

/// Plain gradient evaluation (one forward, one backward) in double precision.
std::vector<Tensor> gradients(const ScalarFunction& f, const std::vector<Tensor>& params);

}  // namespace kvshare
