// SPDX-License-Identifier: Apache-2.0
#include "kvshare/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kvshare {

namespace {

void require_same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

void accumulate(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(id_); }

Tensor Var::grad() const { return tape_->grad(id_); }

void Tape::round_if_single(Tensor& t) const {
  if (precision_ != Precision::Single) return;
  for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

Var Tape::leaf(Tensor value, bool requires_grad, std::string name) {
  if (!value.all_finite()) throw EvaluationError("non-finite leaf value '" + name + "'");
  round_if_single(value);
  Node node;
  node.op = "leaf";
  node.name = std::move(name);
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(std::string op, Tensor value, std::vector<std::size_t> parents, Backward backward) {
  if (!value.all_finite()) throw EvaluationError("non-finite output from " + op);
  round_if_single(value);
  Node node;
  node.op = std::move(op);
  node.value = std::move(value);
  node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                   [this](std::size_t p) { return nodes_.at(p).requires_grad; });
  if (node.requires_grad) node.backward = std::move(backward);
  node.parents = std::move(parents);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor Tape::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (n.grad.empty()) return Tensor(n.value.shape());
  return n.grad;
}

Tensor& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

std::vector<std::size_t> Tape::consumers(std::size_t id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = id + 1; i < nodes_.size(); ++i) {
    const auto& p = nodes_[i].parents;
    if (std::find(p.begin(), p.end(), id) != p.end()) out.push_back(i);
  }
  return out;
}

void Tape::backward(Var root) {
  if (&root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
  if (value(root.id()).size() != 1) {
    throw DimensionError("backward needs a scalar root, got " +
                         shape_to_string(value(root.id()).shape()));
  }
  if (!requires_grad(root.id())) return;
  grad_slot(root.id())[0] += 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  Tensor out = a.value();
  accumulate(out, b.value());
  return a.tape().push("add", std::move(out), {a.id(), b.id()}, [](Tape& t, std::size_t self) {
    const auto& ps = t.parents(self);
    for (auto p : ps)
      if (t.requires_grad(p)) accumulate(t.grad_slot(p), t.grad(self));
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().push("mul", std::move(out), {a.id(), b.id()}, [](Tape& t, std::size_t self) {
    const std::size_t pa = t.parents(self)[0], pb = t.parents(self)[1];
    const Tensor g = t.grad(self);
    if (t.requires_grad(pa)) {
      Tensor& ga = t.grad_slot(pa);
      const Tensor& vb = t.value(pb);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.requires_grad(pb)) {
      Tensor& gb = t.grad_slot(pb);
      const Tensor& va = t.value(pa);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return a.tape().push("scale", std::move(out), {a.id()}, [factor](Tape& t, std::size_t self) {
    const std::size_t p = t.parents(self)[0];
    if (!t.requires_grad(p)) return;
    Tensor& gp = t.grad_slot(p);
    const Tensor g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += factor * g[i];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().push("sum", Tensor::scalar(s), {a.id()}, [](Tape& t, std::size_t self) {
    const std::size_t p = t.parents(self)[0];
    if (!t.requires_grad(p)) return;
    const double g = t.grad(self)[0];
    for (double& v : t.grad_slot(p).data()) v += g;
  });
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  Tensor out = matmul(a.value(), b.value());
  return a.tape().push("matmul", std::move(out), {a.id(), b.id()}, [](Tape& t, std::size_t self) {
    const std::size_t pa = t.parents(self)[0], pb = t.parents(self)[1];
    const Tensor g = t.grad(self);
    if (t.requires_grad(pa)) accumulate(t.grad_slot(pa), matmul(g, transpose(t.value(pb))));
    if (t.requires_grad(pb)) accumulate(t.grad_slot(pb), matmul(transpose(t.value(pa)), g));
  });
}

Var softmax_causal(Var scores, double scale_factor) {
  Tensor out = softmax_causal(scores.value(), scale_factor);
  return scores.tape().push(
      "softmax_causal", std::move(out), {scores.id()}, [scale_factor](Tape& t, std::size_t self) {
        const std::size_t p = t.parents(self)[0];
        if (!t.requires_grad(p)) return;
        const Tensor& y = t.value(self);
        const Tensor g = t.grad(self);
        Tensor& gp = t.grad_slot(p);
        const std::size_t s = y.dim(0);
        for (std::size_t r = 0; r < s; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c <= r; ++c) dot += y[r * s + c] * g[r * s + c];
          for (std::size_t c = 0; c <= r; ++c)
            gp[r * s + c] += scale_factor * y[r * s + c] * (g[r * s + c] - dot);
        }
      });
}

Var rmsnorm(Var x, Var gain) {
  require_same_tape(x, gain, "rmsnorm");
  Tensor out = rmsnorm(x.value(), gain.value());
  return x.tape().push("rmsnorm", std::move(out), {x.id(), gain.id()}, [](Tape& t, std::size_t self) {
    const std::size_t px = t.parents(self)[0], pg = t.parents(self)[1];
    const Tensor& xv = t.value(px);
    const Tensor& gv = t.value(pg);
    const Tensor g = t.grad(self);
    const std::size_t d = gv.size();
    const std::size_t rows = xv.size() / d;
    const bool want_x = t.requires_grad(px), want_g = t.requires_grad(pg);
    Tensor* gx = want_x ? &t.grad_slot(px) : nullptr;
    Tensor* gg = want_g ? &t.grad_slot(pg) : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = &xv[r * d];
      const double* dy = &g[r * d];
      double ms = 0.0;
      for (std::size_t c = 0; c < d; ++c) ms += xr[c] * xr[c];
      const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + kRmsNormEpsilon);
      if (gx) {
        double ux = 0.0;
        for (std::size_t c = 0; c < d; ++c) ux += dy[c] * gv[c] * xr[c];
        const double coeff = inv * inv * inv * ux / static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) (*gx)[r * d + c] += inv * dy[c] * gv[c] - xr[c] * coeff;
      }
      if (gg)
        for (std::size_t c = 0; c < d; ++c) (*gg)[c] += dy[c] * xr[c] * inv;
    }
  });
}

Var swiglu(Var x) {
  Tensor out = swiglu(x.value());
  return x.tape().push("swiglu", std::move(out), {x.id()}, [](Tape& t, std::size_t self) {
    const std::size_t p = t.parents(self)[0];
    if (!t.requires_grad(p)) return;
    const Tensor& xv = t.value(p);
    const Tensor g = t.grad(self);
    Tensor& gp = t.grad_slot(p);
    const std::size_t two_h = xv.shape().back(), h = two_h / 2;
    const std::size_t rows = xv.size() / two_h;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < h; ++c) {
        const double a = xv[r * two_h + c];
        const double b = xv[r * two_h + h + c];
        const double sg = sigmoid(a);
        const double dy = g[r * h + c];
        gp[r * two_h + c] += dy * b * sg * (1.0 + a * (1.0 - sg));
        gp[r * two_h + h + c] += dy * a * sg;
      }
    }
  });
}

Var embedding(Var table, std::span<const int> tokens) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("embedding table must be a matrix, got " + shape_to_string(tv.shape()));
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  std::vector<int> ids(tokens.begin(), tokens.end());
  Tensor out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw std::out_of_range("token id " + std::to_string(ids[r]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(&tv[static_cast<std::size_t>(ids[r]) * d], d, &out[r * d]);
  }
  return table.tape().push("embedding", std::move(out), {table.id()},
                           [ids = std::move(ids), d](Tape& t, std::size_t self) {
                             const std::size_t p = t.parents(self)[0];
                             if (!t.requires_grad(p)) return;
                             const Tensor g = t.grad(self);
                             Tensor& gp = t.grad_slot(p);
                             for (std::size_t r = 0; r < ids.size(); ++r)
                               for (std::size_t c = 0; c < d; ++c)
                                 gp[static_cast<std::size_t>(ids[r]) * d + c] += g[r * d + c];
                           });
}

Var cross_entropy_sum(Var logits, std::span<const int> targets) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy logits " + shape_to_string(lv.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = lv.dim(0), vocab = lv.dim(1);
  std::vector<int> tg(targets.begin(), targets.end());
  Tensor probs({rows, vocab});
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tg[r] < 0) continue;
    if (static_cast<std::size_t>(tg[r]) >= vocab) {
      throw std::out_of_range("target id " + std::to_string(tg[r]) + " outside vocabulary");
    }
    const double* row = &lv[r * vocab];
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      probs[r * vocab + c] = std::exp(row[c] - mx);
      z += probs[r * vocab + c];
    }
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] /= z;
    total += mx + std::log(z) - row[tg[r]];
  }
  return logits.tape().push(
      "cross_entropy", Tensor::scalar(total), {logits.id()},
      [tg = std::move(tg), probs = std::move(probs), vocab](Tape& t, std::size_t self) {
        const std::size_t p = t.parents(self)[0];
        if (!t.requires_grad(p)) return;
        const double g = t.grad(self)[0];
        Tensor& gp = t.grad_slot(p);
        for (std::size_t r = 0; r < tg.size(); ++r) {
          if (tg[r] < 0) continue;
          for (std::size_t c = 0; c < vocab; ++c) gp[r * vocab + c] += g * probs[r * vocab + c];
          gp[r * vocab + static_cast<std::size_t>(tg[r])] -= g;
        }
      });
}

Var split_heads(Var x, std::size_t heads) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || heads == 0 || xv.dim(1) % heads != 0) {
    throw DimensionError("split_heads cannot split " + shape_to_string(xv.shape()) + " into " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t s = xv.dim(0), d = xv.dim(1) / heads;
  Tensor out({heads, s, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < d; ++c) out[(h * s + r) * d + c] = xv[r * heads * d + h * d + c];
  return x.tape().push("split_heads", std::move(out), {x.id()}, [heads, s, d](Tape& t, std::size_t self) {
    const std::size_t p = t.parents(self)[0];
    if (!t.requires_grad(p)) return;
    const Tensor g = t.grad(self);
    Tensor& gp = t.grad_slot(p);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t r = 0; r < s; ++r)
        for (std::size_t c = 0; c < d; ++c) gp[r * heads * d + h * d + c] += g[(h * s + r) * d + c];
  });
}

Var merge_heads(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("merge_heads needs [heads x s x D], got " + shape_to_string(xv.shape()));
  const std::size_t heads = xv.dim(0), s = xv.dim(1), d = xv.dim(2);
  Tensor out({s, heads * d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < d; ++c) out[r * heads * d + h * d + c] = xv[(h * s + r) * d + c];
  return x.tape().push("merge_heads", std::move(out), {x.id()}, [heads, s, d](Tape& t, std::size_t self) {
    const std::size_t p = t.parents(self)[0];
    if (!t.requires_grad(p)) return;
    const Tensor g = t.grad(self);
    Tensor& gp = t.grad_slot(p);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t r = 0; r < s; ++r)
        for (std::size_t c = 0; c < d; ++c) gp[(h * s + r) * d + c] += g[r * heads * d + h * d + c];
  });
}

Var scale_last_axis(Var x, Var w) {
  require_same_tape(x, w, "scale_last_axis");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 1 || xv.rank() == 0 || xv.shape().back() != wv.size()) {
    throw DimensionError("scale_last_axis weight " + shape_to_string(wv.shape()) +
                         " does not match " + shape_to_string(xv.shape()));
  }
  const std::size_t d = wv.size();
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= wv[i % d];
  return x.tape().push("scale_last_axis", std::move(out), {x.id(), w.id()}, [d](Tape& t, std::size_t self) {
    const std::size_t px = t.parents(self)[0], pw = t.parents(self)[1];
    const Tensor g = t.grad(self);
    if (t.requires_grad(px)) {
      Tensor& gx = t.grad_slot(px);
      const Tensor& wv2 = t.value(pw);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * wv2[i % d];
    }
    if (t.requires_grad(pw)) {
      Tensor& gw = t.grad_slot(pw);
      const Tensor& xv2 = t.value(px);
      for (std::size_t i = 0; i < g.size(); ++i) gw[i % d] += g[i] * xv2[i];
    }
  });
}

Var scale_by_scalar(Var x, Var w) {
  require_same_tape(x, w, "scale_by_scalar");
  if (w.value().size() != 1) {
    throw DimensionError("scale_by_scalar needs a one-element weight, got " + shape_to_string(w.shape()));
  }
  const double wv = w.value()[0];
  Tensor out = x.value();
  for (double& v : out.data()) v *= wv;
  return x.tape().push("scale_by_scalar", std::move(out), {x.id(), w.id()}, [](Tape& t, std::size_t self) {
    const std::size_t px = t.parents(self)[0], pw = t.parents(self)[1];
    const Tensor g = t.grad(self);
    if (t.requires_grad(px)) {
      Tensor& gx = t.grad_slot(px);
      const double wv2 = t.value(pw)[0];
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * wv2;
    }
    if (t.requires_grad(pw)) {
      const Tensor& xv = t.value(px);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      t.grad_slot(pw)[0] += acc;
    }
  });
}

Var expand_pairs(Var free) {
  const Tensor& fv = free.value();
  if (fv.rank() != 1) throw DimensionError("expand_pairs needs a vector, got " + shape_to_string(fv.shape()));
  const std::size_t half = fv.size();
  Tensor out({2 * half});
  for (std::size_t j = 0; j < half; ++j) out[2 * j] = out[2 * j + 1] = fv[j];
  return free.tape().push("expand_pairs", std::move(out), {free.id()}, [half](Tape& t, std::size_t self) {
    const std::size_t p = t.parents(self)[0];
    if (!t.requires_grad(p)) return;
    const Tensor g = t.grad(self);
    Tensor& gp = t.grad_slot(p);
    for (std::size_t j = 0; j < half; ++j) gp[j] += g[2 * j] + g[2 * j + 1];
  });
}

namespace {

double evaluate(const ScalarFunction& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p));
  Var out = f(tape, leaves);
  if (out.value().size() != 1) throw DimensionError("grad_check needs a scalar-valued function");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw EvaluationError("grad_check: function value is not finite");
  return v;
}

}  // namespace

std::vector<Tensor> gradients(const ScalarFunction& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p, true));
  Var out = f(tape, leaves);
  if (out.value().size() != 1) throw DimensionError("gradients need a scalar-valued function");
  tape.backward(out);
  std::vector<Tensor> grads;
  grads.reserve(leaves.size());
  for (auto l : leaves) grads.push_back(l.grad());
  return grads;
}

GradCheckReport grad_check_report(const ScalarFunction& f, const std::vector<Tensor>& params, double h) {
  if (!(h >= 1e-6 && h <= 1e-4)) throw std::invalid_argument("grad_check step must lie in [1e-6, 1e-4]");
  const std::vector<Tensor> analytic = gradients(f, params);

  GradCheckReport report;
  std::vector<Tensor> work = params;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (std::size_t i = 0; i < work[p].size(); ++i) {
      const double orig = work[p][i];
      work[p][i] = orig + h;
      const double fp = evaluate(f, work);
      work[p][i] = orig - h;
      const double fm = evaluate(f, work);
      work[p][i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double rel = std::abs(analytic[p][i] - numeric) / (std::abs(numeric) + 1e-8);
      ++report.entries_checked;
      if (rel > report.max_relative_error || report.entries_checked == 1) {
        report.max_relative_error = rel;
        report.worst_param = p;
        report.worst_index = i;
        report.autodiff_value = analytic[p][i];
        report.numeric_value = numeric;
      }
    }
  }
  return report;
}

double grad_check(const ScalarFunction& f, const std::vector<Tensor>& params, double h) {
  return grad_check_report(f, params, h).max_relative_error;
}

}  // namespace kvshare
