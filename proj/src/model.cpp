// SPDX-License-Identifier: Apache-2.0
#include "kvshare/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace kvshare {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::size_t parse_size(std::string_view key, std::string_view value) {
  try {
    std::size_t used = 0;
    const std::string v(value);
    const long long n = std::stoll(v, &used);
    if (used != v.size() || n < 0) throw std::invalid_argument("bad");
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + std::string(key) + "' expects a non-negative integer, got '" +
                                std::string(value) + "'");
  }
}

double parse_real(std::string_view key, std::string_view value) {
  try {
    std::size_t used = 0;
    const std::string v(value);
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("bad");
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + std::string(key) + "' expects a number, got '" +
                                std::string(value) + "'");
  }
}

constexpr std::uint64_t kFusionSeedOffset = 0x9E3779B97F4A7C15ULL;

}  // namespace

std::string to_string(InitScheme scheme) { return scheme == InitScheme::Normal ? "normal" : "equivalent"; }

InitScheme parse_init_scheme(std::string_view name) {
  const std::string n = lower(name);
  if (n == "normal") return InitScheme::Normal;
  if (n == "equivalent") return InitScheme::Equivalent;
  throw std::invalid_argument("unknown init scheme '" + std::string(name) + "' (normal|equivalent)");
}

std::string to_string(Precision precision) { return precision == Precision::Double ? "double" : "single"; }

Precision parse_precision(std::string_view name) {
  const std::string n = lower(name);
  if (n == "double" || n == "f64") return Precision::Double;
  if (n == "single" || n == "f32") return Precision::Single;
  throw std::invalid_argument("unknown precision '" + std::string(name) + "' (double|single)");
}

void ModelConfig::validate() const {
  if (layers == 0 || d_model == 0 || vocab == 0 || max_seq == 0 || ffn_dim == 0) {
    throw std::invalid_argument("model extents must be positive");
  }
  if (query_heads == 0 || d_model % query_heads != 0) {
    throw std::invalid_argument("d_model " + std::to_string(d_model) + " is not a multiple of query_heads " +
                                std::to_string(query_heads));
  }
  if (head_dim() % 2 != 0) throw std::invalid_argument("head_dim must be even for RoPE");
  if (kv_heads == 0 || query_heads % kv_heads != 0) {
    throw std::invalid_argument("query_heads must be divisible by kv_heads");
  }
  const Strategy s = Strategy::parse(strategy);
  if (s.uses_middle() && resolved_middle() >= layers) {
    throw std::invalid_argument("middle layer " + std::to_string(resolved_middle()) + " must be below layers " +
                                std::to_string(layers));
  }
  if (!(init_std > 0.0)) throw std::invalid_argument("init_std must be positive");
}

std::string ModelConfig::to_key_values() const {
  std::ostringstream os;
  os.precision(17);
  os << "layers=" << layers << '\n'
     << "d_model=" << d_model << '\n'
     << "query_heads=" << query_heads << '\n'
     << "kv_heads=" << kv_heads << '\n'
     << "vocab=" << vocab << '\n'
     << "max_seq=" << max_seq << '\n'
     << "ffn_dim=" << ffn_dim << '\n'
     << "strategy=" << strategy << '\n'
     << "middle=" << middle << '\n'
     << "init=" << to_string(init) << '\n'
     << "init_std=" << init_std << '\n'
     << "rope_base=" << rope_base << '\n'
     << "precision=" << to_string(precision) << '\n';
  return os.str();
}

bool ModelConfig::set(std::string_view key, std::string_view value) {
  std::string k(key);
  std::replace(k.begin(), k.end(), '-', '_');
  if (k == "layers") layers = parse_size(key, value);
  else if (k == "d_model") d_model = parse_size(key, value);
  else if (k == "query_heads" || k == "heads") query_heads = parse_size(key, value);
  else if (k == "kv_heads") kv_heads = parse_size(key, value);
  else if (k == "vocab") vocab = parse_size(key, value);
  else if (k == "max_seq") max_seq = parse_size(key, value);
  else if (k == "ffn_dim") ffn_dim = parse_size(key, value);
  else if (k == "strategy") strategy = Strategy::parse(value).name();
  else if (k == "middle") middle = parse_size(key, value);
  else if (k == "init") init = parse_init_scheme(value);
  else if (k == "init_std") init_std = parse_real(key, value);
  else if (k == "rope_base") rope_base = parse_real(key, value);
  else if (k == "precision") precision = parse_precision(value);
  else return false;
  return true;
}

ModelConfig desk_config(std::string_view strategy) {
  ModelConfig cfg;
  cfg.strategy = Strategy::parse(strategy).name();
  if (Strategy::parse(strategy).kind == StrategyKind::GQA) cfg.kv_heads = 4;
  return cfg;
}

ModelConfig toy_config(std::string_view strategy) {
  ModelConfig cfg;
  cfg.strategy = Strategy::parse(strategy).name();
  cfg.layers = 4;
  cfg.middle = 2;
  cfg.d_model = 16;
  cfg.query_heads = 2;
  cfg.kv_heads = Strategy::parse(strategy).kind == StrategyKind::GQA ? 1 : 2;
  cfg.vocab = 16;
  cfg.max_seq = 64;
  cfg.ffn_dim = 16;
  cfg.init_std = 0.2;
  return cfg;
}

Model::Model(ModelConfig cfg, std::uint64_t seed)
    : cfg_((cfg.validate(), std::move(cfg))),
      plan_(plan_for_strategy(cfg_.strategy, cfg_.layers, cfg_.middle)),
      rope_(cfg_.head_dim(), cfg_.rope_base) {
  layout();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, cfg_.init_std);
  for (auto& p : params_) {
    if (p.name.find(".fuse_") != std::string::npos) continue;
    const bool is_norm = p.name.find("norm") != std::string::npos;
    for (auto& v : p.value.data()) v = is_norm ? 1.0 : normal(rng);
  }
  if (plan_.has_fusion_weights()) {
    const std::size_t d = cfg_.head_dim();
    const std::uint64_t fusion_seed = seed + kFusionSeedOffset;
    const FusionWeights fw = cfg_.init == InitScheme::Equivalent
                                 ? init_equivalent(plan_, sample_auxiliary(plan_, fusion_seed, d))
                                 : init_normal(plan_, fusion_seed, d);
    for (const auto& [layer, lw] : fw.layers) {
      const LayerParams& lp = layers_.at(layer - 1);
      for (std::size_t t = 0; t < lw.key.size(); ++t) params_[lp.key_fusion.at(t)].value = lw.key[t].weight;
      for (std::size_t t = 0; t < lw.value.size(); ++t) params_[lp.value_fusion.at(t)].value = lw.value[t].weight;
    }
  }
  if (cfg_.precision == Precision::Single) {
    for (auto& p : params_)
      for (auto& v : p.value.data()) v = static_cast<double>(static_cast<float>(v));
  }
}

Model::Model(ModelConfig cfg, std::vector<Parameter> params)
    : cfg_((cfg.validate(), std::move(cfg))),
      plan_(plan_for_strategy(cfg_.strategy, cfg_.layers, cfg_.middle)),
      rope_(cfg_.head_dim(), cfg_.rope_base) {
  layout();
  if (params.size() != params_.size()) {
    throw std::invalid_argument("expected " + std::to_string(params_.size()) + " parameters, got " +
                                std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != params_[i].name || params[i].value.shape() != params_[i].value.shape()) {
      throw std::invalid_argument("parameter " + std::to_string(i) + " is '" + params[i].name + "' " +
                                  shape_to_string(params[i].value.shape()) + ", expected '" + params_[i].name +
                                  "' " + shape_to_string(params_[i].value.shape()));
    }
    params_[i].value = std::move(params[i].value);
  }
}

void Model::layout() {
  const std::size_t d = cfg_.d_model, hd = cfg_.head_dim();
  const std::size_t q_width = cfg_.query_heads * hd, kv_width = cfg_.kv_heads * hd;
  auto add_param = [&](std::string name, Shape shape, bool decay) {
    params_.push_back({std::move(name), Tensor(std::move(shape)), decay});
    return params_.size() - 1;
  };
  params_.clear();
  layers_.assign(cfg_.layers, {});
  add_param("embed", {cfg_.vocab, d}, true);
  for (std::size_t l = 1; l <= cfg_.layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    LayerParams& lp = layers_[l - 1];
    lp.attn_norm = add_param(prefix + "attn_norm", {d}, false);
    lp.wq = add_param(prefix + "wq", {d, q_width}, true);
    if (plan_.is_storage(l)) {
      lp.wk = add_param(prefix + "wk", {d, kv_width}, true);
      lp.wv = add_param(prefix + "wv", {d, kv_width}, true);
    } else {
      const LayerRecipe& r = plan_.recipe(l);
      if (r.kind == ReconstructionKind::WeightedFusion) {
        const bool vec = r.granularity == WeightGranularity::Vector;
        for (auto src : r.key_sources)
          lp.key_fusion.push_back(add_param(prefix + "fuse_k.src" + std::to_string(src), {vec ? hd / 2 : 1}, false));
        for (auto src : r.value_sources)
          lp.value_fusion.push_back(add_param(prefix + "fuse_v.src" + std::to_string(src), {vec ? hd : 1}, false));
      }
    }
    lp.wo = add_param(prefix + "wo", {q_width, d}, true);
    lp.mlp_norm = add_param(prefix + "mlp_norm", {d}, false);
    lp.w_up = add_param(prefix + "w_up", {d, 2 * cfg_.ffn_dim}, true);
    lp.w_down = add_param(prefix + "w_down", {cfg_.ffn_dim, d}, true);
  }
  add_param("final_norm", {d}, false);
  add_param("lm_head", {d, cfg_.vocab}, true);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t Model::find_param(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

FusionWeights Model::fusion_weights() const {
  FusionWeights fw;
  fw.head_dim = cfg_.head_dim();
  for (const auto& [layer, r] : plan_.recipes()) {
    if (r.kind != ReconstructionKind::WeightedFusion) continue;
    const LayerParams& lp = layers_.at(layer - 1);
    LayerFusionWeights lw;
    for (std::size_t t = 0; t < r.key_sources.size(); ++t)
      lw.key.push_back({r.key_sources[t], params_[lp.key_fusion[t]].value});
    for (std::size_t t = 0; t < r.value_sources.size(); ++t)
      lw.value.push_back({r.value_sources[t], params_[lp.value_fusion[t]].value});
    fw.layers.emplace(layer, std::move(lw));
  }
  return fw;
}

std::vector<Var> parameter_leaves(Tape& tape, const Model& model, bool requires_grad) {
  std::vector<Var> leaves;
  leaves.reserve(model.params().size());
  for (const auto& p : model.params()) leaves.push_back(tape.leaf(p.value, requires_grad, p.name));
  return leaves;
}

Var forward_logits(Tape& tape, const Model& model, std::span<const Var> params, std::span<const int> tokens,
                   std::size_t start, CacheMap* caches, ForwardTrace* trace) {
  const ModelConfig& cfg = model.config();
  if (params.size() != model.params().size()) throw std::invalid_argument("parameter leaf count mismatch");
  if (tokens.empty()) throw std::invalid_argument("forward needs at least one token");
  if (!caches && start != 0) throw std::invalid_argument("uncached forward must start at position 0");
  if (start + tokens.size() > cfg.max_seq) {
    throw std::length_error("sequence of " + std::to_string(start + tokens.size()) + " tokens exceeds max_seq " +
                            std::to_string(cfg.max_seq));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) {
      throw std::out_of_range("token " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg.vocab));
    }
  }
  std::vector<std::size_t> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = start + i;

  const SharingPlan& plan = model.plan();
  const AttentionConfig acfg = cfg.attention();
  Var x = embedding(params[model.find_param("embed")], tokens);
  std::map<std::size_t, KVPair> kv;
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    const LayerParams& lp = model.layer(l);
    Var h = rmsnorm(x, params[lp.attn_norm]);
    Var q = apply_rope(split_heads(matmul(h, params[lp.wq]), cfg.query_heads), positions, model.rope());
    KVPair cur;
    if (plan.is_storage(l)) {
      Var k = apply_rope(split_heads(matmul(h, params[lp.wk]), cfg.kv_heads), positions, model.rope());
      Var v = split_heads(matmul(h, params[lp.wv]), cfg.kv_heads);
      if (caches) {
        auto it = caches->try_emplace(l, LayerCache::empty(l, cfg.kv_heads, cfg.head_dim())).first;
        it->second.append(k.value(), v.value());
        cur = {tape.leaf(it->second.keys()), tape.leaf(it->second.values())};
      } else {
        cur = {k, v};
      }
    } else {
      std::vector<Var> kw, vw;
      for (auto idx : lp.key_fusion) kw.push_back(params[idx]);
      for (auto idx : lp.value_fusion) vw.push_back(params[idx]);
      cur = reconstruct(plan.recipe(l), kw, vw, kv);
    }
    kv[l] = cur;
    Var attn = attention(q, cur.keys, cur.values, acfg, positions);
    x = add(x, matmul(merge_heads(attn), params[lp.wo]));
    Var h2 = rmsnorm(x, params[lp.mlp_norm]);
    x = add(x, matmul(swiglu(matmul(h2, params[lp.w_up])), params[lp.w_down]));
  }
  Var logits = matmul(rmsnorm(x, params[model.find_param("final_norm")]), params[model.find_param("lm_head")]);
  if (trace) trace->layer_kv = std::move(kv);
  return logits;
}

Var forward_loss(Tape& tape, const Model& model, std::span<const Var> params, const Batch& batch,
                 ForwardTrace* trace) {
  if (batch.tokens.empty()) throw std::invalid_argument("empty batch");
  if (!batch.mask.empty() && batch.mask.size() != batch.tokens.size()) {
    throw std::invalid_argument("batch mask count does not match sequence count");
  }
  Var total;
  std::size_t count = 0;
  for (std::size_t b = 0; b < batch.tokens.size(); ++b) {
    const auto& seq = batch.tokens[b];
    if (seq.size() < 2) {
      throw std::invalid_argument("sequence " + std::to_string(b) + " has no next-token pairs (length " +
                                  std::to_string(seq.size()) + ")");
    }
    const std::vector<std::uint8_t>* mask = batch.mask.empty() ? nullptr : &batch.mask[b];
    if (mask && !mask->empty() && mask->size() != seq.size() - 1) {
      throw std::invalid_argument("mask of sequence " + std::to_string(b) + " must have length " +
                                  std::to_string(seq.size() - 1));
    }
    std::vector<int> targets(seq.size(), -1);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      if (!mask || mask->empty() || (*mask)[t]) {
        targets[t] = seq[t + 1];
        ++count;
      }
    }
    Var logits = forward_logits(tape, model, params, seq, 0, nullptr, b == 0 ? trace : nullptr);
    Var ce = cross_entropy_sum(logits, targets);
    total = total.valid() ? add(total, ce) : ce;
  }
  if (count == 0) throw std::invalid_argument("batch mask selects no targets");
  return scale(total, 1.0 / static_cast<double>(count));
}

double forward_loss(const Model& model, const Batch& batch) {
  Tape tape(model.config().precision);
  const auto leaves = parameter_leaves(tape, model, false);
  return forward_loss(tape, model, leaves, batch).value().item();
}

LossAndGradients loss_and_gradients(const Model& model, const Batch& batch) {
  Tape tape(model.config().precision);
  const auto leaves = parameter_leaves(tape, model, true);
  Var loss = forward_loss(tape, model, leaves, batch);
  tape.backward(loss);
  LossAndGradients out;
  out.loss = loss.value().item();
  out.grads.reserve(leaves.size());
  for (auto l : leaves) out.grads.push_back(l.grad());
  return out;
}

Tensor full_logits(const Model& model, std::span<const int> tokens) {
  Tape tape(model.config().precision);
  const auto leaves = parameter_leaves(tape, model, false);
  return forward_logits(tape, model, leaves, tokens, 0, nullptr).value();
}

namespace {

Tensor last_row(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  Tensor out({cols});
  std::copy_n(&logits[(rows - 1) * cols], cols, out.data().begin());
  return out;
}

int argmax(const Tensor& row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return static_cast<int>(best);
}

std::size_t cache_elements(const CacheMap& caches) {
  std::size_t n = 0;
  for (const auto& [layer, c] : caches) n += c.elements();
  return n;
}

}  // namespace

DecodeResult decode(const Model& model, std::span<const int> prompt, std::size_t new_tokens) {
  const ModelConfig& cfg = model.config();
  if (prompt.empty()) throw std::invalid_argument("decode needs a non-empty prompt");
  if (prompt.size() + new_tokens > cfg.max_seq) {
    throw std::length_error("prompt of " + std::to_string(prompt.size()) + " plus " + std::to_string(new_tokens) +
                            " new tokens exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  DecodeResult result;
  CacheMap caches;
  Tensor logits;
  {
    Tape tape(cfg.precision);
    const auto leaves = parameter_leaves(tape, model, false);
    logits = forward_logits(tape, model, leaves, prompt, 0, &caches).value();
  }
  result.prompt_logits = logits;
  result.peak_cache_elements = cache_elements(caches);
  std::size_t length = prompt.size();
  for (std::size_t g = 0; g < new_tokens; ++g) {
    Tensor row = last_row(logits);
    const int next = argmax(row);
    result.generated.push_back(next);
    result.step_logits.push_back(std::move(row));
    if (g + 1 == new_tokens) break;
    Tape tape(cfg.precision);
    const auto leaves = parameter_leaves(tape, model, false);
    const int token[] = {next};
    logits = forward_logits(tape, model, leaves, token, length, &caches).value();
    ++length;
    result.peak_cache_elements = std::max(result.peak_cache_elements, cache_elements(caches));
  }
  result.persistent_caches = caches.size();
  result.cache_length = caches.empty() ? 0 : caches.begin()->second.length();
  return result;
}

FusionHeatmap fusion_weight_heatmap(const Model& model) {
  const SharingPlan& plan = model.plan();
  if (!plan.has_fusion_weights()) {
    throw std::invalid_argument("strategy " + plan.strategy().name() + " has no fusion weights");
  }
  const FusionWeights fw = model.fusion_weights();
  FusionHeatmap hm;
  std::set<std::size_t> ks, vs;
  for (const auto& [layer, lw] : fw.layers) {
    hm.targets.push_back(layer);
    for (const auto& t : lw.key) ks.insert(t.source);
    for (const auto& t : lw.value) vs.insert(t.source);
  }
  hm.key_sources.assign(ks.begin(), ks.end());
  hm.value_sources.assign(vs.begin(), vs.end());
  hm.key = Tensor({hm.targets.size(), hm.key_sources.size()});
  hm.value = Tensor({hm.targets.size(), hm.value_sources.size()});
  auto summarize = [](const Tensor& w) {
    if (w.size() == 1) return w[0];
    double s = 0.0;
    for (double v : w.data()) s += std::abs(v);
    return s / static_cast<double>(w.size());
  };
  for (std::size_t r = 0; r < hm.targets.size(); ++r) {
    const LayerFusionWeights& lw = fw.layers.at(hm.targets[r]);
    for (const auto& t : lw.key) {
      const auto c = std::lower_bound(hm.key_sources.begin(), hm.key_sources.end(), t.source) - hm.key_sources.begin();
      hm.key[r * hm.key_sources.size() + static_cast<std::size_t>(c)] = summarize(t.weight);
    }
    for (const auto& t : lw.value) {
      const auto c =
          std::lower_bound(hm.value_sources.begin(), hm.value_sources.end(), t.source) - hm.value_sources.begin();
      hm.value[r * hm.value_sources.size() + static_cast<std::size_t>(c)] = summarize(t.weight);
    }
  }
  return hm;
}

}  // namespace kvshare
