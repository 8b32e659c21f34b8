// SPDX-License-Identifier: Apache-2.0
#include "kvshare/trainer.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>

namespace kvshare {

double OptimizerConfig::learning_rate(std::size_t step, std::size_t total_steps) const {
  if (step < warmup) return lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (!cosine || total_steps <= warmup) return lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  const double floor = lr * min_lr_ratio;
  return floor + 0.5 * (lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

std::string divergence_message(std::size_t step, double loss) {
  std::ostringstream os;
  os << "training diverged at step " << step << " (loss " << loss << ")";
  return os.str();
}

double round_to(Precision p, double v) {
  return p == Precision::Single ? static_cast<double>(static_cast<float>(v)) : v;
}

}  // namespace

DivergenceError::DivergenceError(std::size_t step, double loss)
    : std::runtime_error(divergence_message(step, loss)), step_(step) {}

TrainReport train(Model& model, const TrainConfig& cfg) {
  if (cfg.steps == 0) throw std::invalid_argument("steps must be at least 1");
  if (cfg.eval_interval == 0) throw std::invalid_argument("eval_interval must be at least 1");
  const Precision precision = model.config().precision;
  TaskSampler sampler(cfg.task, model.config().vocab, cfg.seed);
  TaskSampler eval_sampler(cfg.task, model.config().vocab, cfg.seed ^ 0xA5A5A5A5A5A5A5A5ULL);
  const Batch eval_batch = eval_sampler.next();
  if (cfg.task.sequence_length() > model.config().max_seq) {
    throw std::invalid_argument("task sequences of " + std::to_string(cfg.task.sequence_length()) +
                                " tokens exceed max_seq " + std::to_string(model.config().max_seq));
  }

  auto& params = model.params();
  std::vector<Tensor> m1, m2;
  for (const auto& p : params) {
    m1.emplace_back(p.value.shape());
    m2.emplace_back(p.value.shape());
  }
  const OptimizerConfig& opt = cfg.optimizer;

  TrainReport report;
  auto evaluate = [&](std::size_t step) {
    const double loss = forward_loss(model, eval_batch);
    if (!std::isfinite(loss)) throw DivergenceError(step, loss);
    report.eval_steps.push_back(step);
    report.eval_losses.push_back(loss);
  };
  evaluate(0);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Batch batch = sampler.next();
    LossAndGradients lg;
    try {
      lg = loss_and_gradients(model, batch);
    } catch (const EvaluationError&) {
      throw DivergenceError(step, NAN);
    }
    if (!std::isfinite(lg.loss)) throw DivergenceError(step, lg.loss);
    report.losses.push_back(lg.loss);

    if (step % cfg.eval_interval == 0 || step + 1 == cfg.steps) {
      for (std::size_t l = 1; l <= model.config().layers; ++l) {
        const LayerParams& lp = model.layer(l);
        GradNormRecord rec;
        rec.step = step;
        rec.layer = l;
        rec.q = l2_norm(lg.grads[lp.wq]);
        rec.has_kv = lp.has_kv_projection();
        if (rec.has_kv) {
          rec.k = l2_norm(lg.grads[lp.wk]);
          rec.v = l2_norm(lg.grads[lp.wv]);
        }
        report.grad_norms.push_back(rec);
      }
    }

    double total_sq = 0.0;
    for (const auto& g : lg.grads)
      for (double v : g.data()) total_sq += v * v;
    const double total = std::sqrt(total_sq);
    if (!std::isfinite(total)) throw DivergenceError(step, lg.loss);
    const double clip = (opt.grad_clip > 0.0 && total > opt.grad_clip) ? opt.grad_clip / total : 1.0;

    const double lr = opt.learning_rate(step, cfg.steps);
    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(opt.beta1, t), c2 = 1.0 - std::pow(opt.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].value.data();
      const auto g = lg.grads[i].data();
      auto a = m1[i].data();
      auto b = m2[i].data();
      const double decay = params[i].decay ? opt.weight_decay : 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] * clip;
        a[j] = opt.beta1 * a[j] + (1.0 - opt.beta1) * gj;
        b[j] = opt.beta2 * b[j] + (1.0 - opt.beta2) * gj * gj;
        const double update = (a[j] / c1) / (std::sqrt(b[j] / c2) + opt.eps);
        w[j] = round_to(precision, w[j] - lr * (update + decay * w[j]));
      }
    }

    if ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps) evaluate(step + 1);
  }
  if (model.plan().has_fusion_weights()) report.heatmap = fusion_weight_heatmap(model);
  return report;
}

CachePathReport cache_gradient_paths(const Model& model, const Batch& batch, std::size_t layer, bool keys) {
  if (!model.plan().is_storage(layer)) {
    throw std::invalid_argument("layer " + std::to_string(layer) + " is not a storage layer");
  }
  Tape tape(model.config().precision);
  const auto leaves = parameter_leaves(tape, model, true);
  Batch first;
  first.tokens = {batch.tokens.at(0)};
  if (!batch.mask.empty()) first.mask = {batch.mask.at(0)};
  ForwardTrace trace;
  Var loss = forward_loss(tape, model, leaves, first, &trace);
  tape.backward(loss);
  const KVPair& kv = trace.layer_kv.at(layer);
  const std::size_t id = keys ? kv.keys.id() : kv.values.id();
  CachePathReport rep;
  const auto consumers = tape.consumers(id);
  rep.consumers = consumers.size();
  for (auto c : consumers) rep.consumer_ops.push_back(tape.op(c));
  rep.grad_norm = l2_norm(tape.grad(id));
  return rep;
}

void write_loss_csv(std::ostream& os, const TrainReport& report) {
  os << std::setprecision(17);
  os << "step,train_loss,eval_loss\n";
  std::size_t e = 0;
  for (std::size_t s = 0; s <= report.losses.size(); ++s) {
    const bool has_train = s < report.losses.size();
    const bool has_eval = e < report.eval_steps.size() && report.eval_steps[e] == s;
    if (!has_train && !has_eval) continue;
    os << s << ',';
    if (has_train) os << report.losses[s];
    os << ',';
    if (has_eval) os << report.eval_losses[e++];
    os << '\n';
  }
}

void write_grad_norm_csv(std::ostream& os, const TrainReport& report) {
  os << std::setprecision(17);
  os << "step,layer,q_norm,k_norm,v_norm\n";
  for (const auto& r : report.grad_norms) {
    os << r.step << ',' << r.layer << ',' << r.q << ',';
    if (r.has_kv) os << r.k << ',' << r.v;
    else os << ',';
    os << '\n';
  }
}

void write_heatmap_csv(std::ostream& os, const FusionHeatmap& heatmap) {
  os << std::setprecision(17);
  os << "cache,target,source,weight\n";
  auto emit = [&](const char* kind, const std::vector<std::size_t>& sources, const Tensor& m) {
    for (std::size_t r = 0; r < heatmap.targets.size(); ++r)
      for (std::size_t c = 0; c < sources.size(); ++c)
        os << kind << ',' << heatmap.targets[r] << ',' << sources[c] << ',' << m[r * sources.size() + c] << '\n';
  };
  emit("key", heatmap.key_sources, heatmap.key);
  emit("value", heatmap.value_sources, heatmap.value);
}

}  // namespace kvshare
