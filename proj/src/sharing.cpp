// SPDX-License-Identifier: Apache-2.0
#include "kvshare/sharing.hpp"

#include <algorithm>
#include <cctype>
#include <random>
#include <regex>
#include <set>

namespace kvshare {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::vector<std::size_t> range_inclusive(std::size_t first, std::size_t last) {
  std::vector<std::size_t> out;
  for (std::size_t i = first; i <= last; ++i) out.push_back(i);
  return out;
}

bool has_duplicates(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  return std::adjacent_find(v.begin(), v.end()) != v.end();
}

}  // namespace

Strategy Strategy::parse(std::string_view name) {
  const std::string n = lower(name);
  if (n == "vanilla" || n == "mha") return {StrategyKind::Vanilla};
  if (n == "gqa") return {StrategyKind::GQA};
  if (n == "cla") return {StrategyKind::CLA};
  if (n == "yoco") return {StrategyKind::YOCO};
  if (n == "fusedkv") return {StrategyKind::FusedKV};
  if (n == "fusedkv-lite" || n == "lite") return {StrategyKind::FusedKVLite};
  if (n == "fusedkv-lite-rev" || n == "lite-rev") return {StrategyKind::FusedKVLiteRev};
  if (n == "fusedkv-lite-learnable" || n == "lite-learnable") return {StrategyKind::FusedKVLiteLearnable};
  if (n == "densefusion" || n == "dense-fusion" || n == "dense") return {StrategyKind::DenseFusion};
  static const std::regex source_index(R"(value(\d+)key(\d+))");
  std::smatch m;
  if (std::regex_match(n, m, source_index)) {
    Strategy s{StrategyKind::SourceIndex};
    s.value_source = std::stoul(m[1].str());
    s.key_source = std::stoul(m[2].str());
    if (s.value_source == 0 || s.key_source == 0) throw PlanError("source indices are 1-based: " + n);
    return s;
  }
  throw PlanError("unknown strategy '" + std::string(name) + "'");
}

std::string Strategy::name() const {
  switch (kind) {
    case StrategyKind::Vanilla: return "Vanilla";
    case StrategyKind::GQA: return "GQA";
    case StrategyKind::CLA: return "CLA";
    case StrategyKind::YOCO: return "YOCO";
    case StrategyKind::FusedKV: return "FusedKV";
    case StrategyKind::FusedKVLite: return "FusedKV-Lite";
    case StrategyKind::FusedKVLiteRev: return "FusedKV-Lite-Rev";
    case StrategyKind::FusedKVLiteLearnable: return "FusedKV-Lite-Learnable";
    case StrategyKind::DenseFusion: return "DenseFusion";
    case StrategyKind::SourceIndex:
      return "value" + std::to_string(value_source) + "key" + std::to_string(key_source);
  }
  return "?";
}

bool Strategy::uses_middle() const {
  switch (kind) {
    case StrategyKind::Vanilla:
    case StrategyKind::GQA:
    case StrategyKind::CLA: return false;
    default: return true;
  }
}

std::vector<Strategy> strategy_catalog() {
  return {{StrategyKind::Vanilla},         {StrategyKind::GQA},
          {StrategyKind::CLA},             {StrategyKind::YOCO},
          {StrategyKind::FusedKV},         {StrategyKind::FusedKVLite},
          {StrategyKind::FusedKVLiteRev},  {StrategyKind::FusedKVLiteLearnable},
          {StrategyKind::DenseFusion}};
}

std::vector<std::size_t> LayerRecipe::sources() const {
  std::set<std::size_t> all(key_sources.begin(), key_sources.end());
  all.insert(value_sources.begin(), value_sources.end());
  return {all.begin(), all.end()};
}

SharingPlan::SharingPlan(std::size_t num_layers, std::vector<LayerRecipe> recipes, Strategy strategy)
    : num_layers_(num_layers), strategy_(strategy) {
  if (num_layers == 0) throw PlanError("a plan needs at least one layer");
  for (auto& r : recipes) {
    if (r.layer < 1 || r.layer > num_layers) {
      throw PlanError("reconstruction layer " + std::to_string(r.layer) + " outside 1.." +
                      std::to_string(num_layers));
    }
    const std::size_t layer = r.layer;
    if (!recipes_.emplace(layer, std::move(r)).second) {
      throw PlanError("layer " + std::to_string(layer) + " has two recipes");
    }
  }
  for (std::size_t l = 1; l <= num_layers; ++l)
    if (!recipes_.count(l)) storage_.push_back(l);
  if (storage_.empty()) throw PlanError("a plan needs at least one storage layer");

  for (const auto& [layer, r] : recipes_) {
    if (r.key_sources.empty() || r.value_sources.empty()) {
      throw PlanError("layer " + std::to_string(layer) + " has no key or value source");
    }
    if (r.kind == ReconstructionKind::DirectReuse &&
        (r.key_sources.size() != 1 || r.value_sources.size() != 1)) {
      throw PlanError("direct reuse at layer " + std::to_string(layer) + " must name one key and one value source");
    }
    if (has_duplicates(r.key_sources) || has_duplicates(r.value_sources)) {
      throw PlanError("duplicate source at layer " + std::to_string(layer));
    }
    for (auto src : r.sources()) {
      if (!is_storage(src)) {
        throw PlanError("layer " + std::to_string(layer) + " reads layer " + std::to_string(src) +
                        ", which is not a storage layer");
      }
      if (src >= layer) {
        throw PlanError("layer " + std::to_string(layer) + " reads later layer " + std::to_string(src));
      }
    }
  }
}

std::vector<std::size_t> SharingPlan::reconstruction_layers() const {
  std::vector<std::size_t> out;
  for (const auto& [layer, r] : recipes_) out.push_back(layer);
  return out;
}

bool SharingPlan::is_storage(std::size_t layer) const {
  return std::binary_search(storage_.begin(), storage_.end(), layer);
}

const LayerRecipe& SharingPlan::recipe(std::size_t layer) const {
  auto it = recipes_.find(layer);
  if (it == recipes_.end()) throw PlanError("layer " + std::to_string(layer) + " is not a reconstruction layer");
  return it->second;
}

bool SharingPlan::has_fusion_weights() const {
  return std::any_of(recipes_.begin(), recipes_.end(),
                     [](const auto& kv) { return kv.second.kind == ReconstructionKind::WeightedFusion; });
}

bool SharingPlan::is_fusedkv_shaped() const {
  if (recipes_.empty()) return false;
  const std::size_t n = storage_.back();
  if (n < 2 || storage_.size() != n) return false;
  for (const auto& [layer, r] : recipes_) {
    const std::vector<std::size_t> anchors{1, n};
    if (r.kind != ReconstructionKind::WeightedFusion || r.key_sources != anchors || r.value_sources != anchors) {
      return false;
    }
  }
  return true;
}

SharingPlan plan_for_strategy(const Strategy& strategy, std::size_t num_layers, std::size_t middle) {
  if (num_layers == 0) throw PlanError("num_layers must be positive");
  std::vector<LayerRecipe> recipes;
  const auto direct = [](std::size_t layer, std::size_t k, std::size_t v) {
    return LayerRecipe{layer, ReconstructionKind::DirectReuse, WeightGranularity::Scalar, {k}, {v}};
  };
  const auto fused = [](std::size_t layer, WeightGranularity g, std::vector<std::size_t> k,
                        std::vector<std::size_t> v) {
    return LayerRecipe{layer, ReconstructionKind::WeightedFusion, g, std::move(k), std::move(v)};
  };

  if (strategy.uses_middle()) {
    if (middle == 0) {
      if (num_layers % 2 != 0) throw PlanError("default middle L/2 needs an even layer count");
      middle = num_layers / 2;
    }
    if (middle < 1 || middle >= num_layers) {
      throw PlanError("middle " + std::to_string(middle) + " must lie in [1, " + std::to_string(num_layers) + ")");
    }
  }
  const std::size_t n = middle;

  switch (strategy.kind) {
    case StrategyKind::Vanilla:
    case StrategyKind::GQA: break;
    case StrategyKind::CLA:
      if (num_layers < 2) throw PlanError("CLA needs at least two layers");
      for (std::size_t i = 2; i <= num_layers; i += 2) recipes.push_back(direct(i, i - 1, i - 1));
      break;
    case StrategyKind::YOCO:
      for (std::size_t i = n + 1; i <= num_layers; ++i) recipes.push_back(direct(i, n, n));
      break;
    case StrategyKind::FusedKV:
      if (n < 2) throw PlanError("FusedKV needs middle >= 2 so that layers 1 and n differ");
      for (std::size_t i = n + 1; i <= num_layers; ++i)
        recipes.push_back(fused(i, WeightGranularity::Vector, {1, n}, {1, n}));
      break;
    case StrategyKind::FusedKVLite:
      for (std::size_t i = n + 1; i <= num_layers; ++i) recipes.push_back(direct(i, n, 1));
      break;
    case StrategyKind::FusedKVLiteRev:
      for (std::size_t i = n + 1; i <= num_layers; ++i) recipes.push_back(direct(i, 1, n));
      break;
    case StrategyKind::FusedKVLiteLearnable:
      for (std::size_t i = n + 1; i <= num_layers; ++i)
        recipes.push_back(fused(i, WeightGranularity::Vector, {n}, {1}));
      break;
    case StrategyKind::DenseFusion:
      for (std::size_t i = n + 1; i <= num_layers; ++i)
        recipes.push_back(fused(i, WeightGranularity::Scalar, range_inclusive(1, n), range_inclusive(1, n)));
      break;
    case StrategyKind::SourceIndex:
      if (strategy.key_source > n || strategy.value_source > n) {
        throw PlanError(strategy.name() + ": sources must be storage layers 1.." + std::to_string(n));
      }
      for (std::size_t i = n + 1; i <= num_layers; ++i)
        recipes.push_back(direct(i, strategy.key_source, strategy.value_source));
      break;
  }
  return SharingPlan(num_layers, std::move(recipes), strategy);
}

SharingPlan plan_for_strategy(std::string_view name, std::size_t num_layers, std::size_t middle) {
  return plan_for_strategy(Strategy::parse(name), num_layers, middle);
}

LayerCache::LayerCache(std::size_t layer, Tensor keys, Tensor values)
    : layer_(layer), keys_(std::move(keys)), values_(std::move(values)) {
  if (keys_.rank() != 3 || keys_.shape() != values_.shape()) {
    throw DimensionError("layer cache needs matching [H_kv x s x D] keys and values, got " +
                         shape_to_string(keys_.shape()) + " and " + shape_to_string(values_.shape()));
  }
}

LayerCache LayerCache::empty(std::size_t layer, std::size_t kv_heads, std::size_t head_dim) {
  return LayerCache(layer, Tensor({kv_heads, 0, head_dim}), Tensor({kv_heads, 0, head_dim}));
}

namespace {

Tensor concat_positions(const Tensor& a, const Tensor& b) {
  const std::size_t h = a.dim(0), sa = a.dim(1), sb = b.dim(1), d = a.dim(2);
  Tensor out({h, sa + sb, d});
  for (std::size_t head = 0; head < h; ++head) {
    std::copy_n(&a.data()[head * sa * d], sa * d, &out.data()[head * (sa + sb) * d]);
    std::copy_n(&b.data()[head * sb * d], sb * d, &out.data()[(head * (sa + sb) + sa) * d]);
  }
  return out;
}

}  // namespace

void LayerCache::append(const Tensor& new_keys, const Tensor& new_values) {
  if (new_keys.rank() != 3 || new_keys.shape() != new_values.shape() || new_keys.dim(0) != kv_heads() ||
      new_keys.dim(2) != head_dim()) {
    throw DimensionError("cannot append " + shape_to_string(new_keys.shape()) + " to cache " +
                         shape_to_string(keys_.shape()));
  }
  // [h x 0 x d] tensors have no storage to copy from.
  if (new_keys.dim(1) == 0) return;
  if (length() == 0) {
    keys_ = new_keys;
    values_ = new_values;
    return;
  }
  keys_ = concat_positions(keys_, new_keys);
  values_ = concat_positions(values_, new_values);
}

const LayerFusionWeights& FusionWeights::at(std::size_t layer) const {
  auto it = layers.find(layer);
  if (it == layers.end()) throw ReconstructionError("no fusion weights for layer " + std::to_string(layer));
  return it->second;
}

namespace {

const FusionTerm& find_term(const std::vector<FusionTerm>& terms, std::size_t layer, std::size_t source,
                            const char* kind) {
  for (const auto& t : terms)
    if (t.source == source) return t;
  throw ReconstructionError(std::string("no ") + kind + " weight for layer " + std::to_string(layer) +
                            " source " + std::to_string(source));
}

Tensor expand_key_weight(const Tensor& w, std::size_t d) {
  Tensor out({d});
  if (w.size() == 1) {
    for (auto& v : out.data()) v = w[0];
  } else if (2 * w.size() == d) {
    for (std::size_t j = 0; j < w.size(); ++j) out[2 * j] = out[2 * j + 1] = w[j];
  } else {
    throw DimensionError("key weight " + shape_to_string(w.shape()) + " does not fit head_dim " + std::to_string(d));
  }
  return out;
}

Tensor expand_value_weight(const Tensor& w, std::size_t d) {
  if (w.size() == d && d != 1) return w.reshaped({d});
  if (w.size() == 1) return Tensor({d}, w[0]);
  throw DimensionError("value weight " + shape_to_string(w.shape()) + " does not fit head_dim " + std::to_string(d));
}

}  // namespace

const FusionTerm& FusionWeights::key_term(std::size_t layer, std::size_t source) const {
  return find_term(at(layer).key, layer, source, "key");
}

const FusionTerm& FusionWeights::value_term(std::size_t layer, std::size_t source) const {
  return find_term(at(layer).value, layer, source, "value");
}

Tensor FusionWeights::key_weight_expanded(std::size_t layer, std::size_t source) const {
  return expand_key_weight(key_term(layer, source).weight, head_dim);
}

Tensor FusionWeights::value_weight_expanded(std::size_t layer, std::size_t source) const {
  return expand_value_weight(value_term(layer, source).weight, head_dim);
}

namespace {

const KVPair& source_of(const std::map<std::size_t, KVPair>& stored, std::size_t layer, std::size_t src) {
  auto it = stored.find(src);
  if (it == stored.end()) {
    throw ReconstructionError("layer " + std::to_string(layer) + " needs missing source cache " + std::to_string(src));
  }
  return it->second;
}

Var weight_key(Var k, Var w) {
  const std::size_t d = k.shape().back();
  if (w.value().size() == 1) return scale_by_scalar(k, w);
  if (2 * w.value().size() != d) {
    throw DimensionError("key weight " + shape_to_string(w.shape()) + " does not fit head_dim " + std::to_string(d));
  }
  return scale_last_axis(k, expand_pairs(w));
}

Var weight_value(Var v, Var w) {
  const std::size_t d = v.shape().back();
  if (w.value().size() == 1) return scale_by_scalar(v, w);
  if (w.value().size() != d) {
    throw DimensionError("value weight " + shape_to_string(w.shape()) + " does not fit head_dim " + std::to_string(d));
  }
  return scale_last_axis(v, w);
}

}  // namespace

KVPair reconstruct(const LayerRecipe& recipe, std::span<const Var> key_weights, std::span<const Var> value_weights,
                   const std::map<std::size_t, KVPair>& stored) {
  const std::size_t layer = recipe.layer;
  const auto sources = recipe.sources();
  const Shape& ref = source_of(stored, layer, sources.front()).keys.shape();
  for (auto src : sources) {
    const KVPair& kv = source_of(stored, layer, src);
    if (kv.keys.shape() != ref || kv.values.shape() != ref) {
      throw ReconstructionError("layer " + std::to_string(layer) + ": source " + std::to_string(src) +
                                " cache " + shape_to_string(kv.keys.shape()) + " differs from " +
                                shape_to_string(ref));
    }
  }

  if (recipe.kind == ReconstructionKind::DirectReuse) {
    return {source_of(stored, layer, recipe.key_sources[0]).keys,
            source_of(stored, layer, recipe.value_sources[0]).values};
  }
  if (key_weights.size() != recipe.key_sources.size() || value_weights.size() != recipe.value_sources.size()) {
    throw ReconstructionError("layer " + std::to_string(layer) + ": weight count does not match source count");
  }
  Var k = weight_key(source_of(stored, layer, recipe.key_sources[0]).keys, key_weights[0]);
  for (std::size_t t = 1; t < recipe.key_sources.size(); ++t)
    k = add(k, weight_key(source_of(stored, layer, recipe.key_sources[t]).keys, key_weights[t]));
  Var v = weight_value(source_of(stored, layer, recipe.value_sources[0]).values, value_weights[0]);
  for (std::size_t t = 1; t < recipe.value_sources.size(); ++t)
    v = add(v, weight_value(source_of(stored, layer, recipe.value_sources[t]).values, value_weights[t]));
  return {k, v};
}

std::pair<Tensor, Tensor> reconstruct(const SharingPlan& plan, const FusionWeights& weights, const CacheMap& stored,
                                      std::size_t layer) {
  const LayerRecipe& recipe = plan.recipe(layer);
  Tape tape;
  std::map<std::size_t, KVPair> leaves;
  for (auto src : recipe.sources()) {
    auto it = stored.find(src);
    if (it == stored.end()) {
      throw ReconstructionError("layer " + std::to_string(layer) + " needs missing source cache " + std::to_string(src));
    }
    leaves[src] = {tape.leaf(it->second.keys()), tape.leaf(it->second.values())};
  }
  std::vector<Var> kw, vw;
  if (recipe.kind == ReconstructionKind::WeightedFusion) {
    for (auto src : recipe.key_sources) kw.push_back(tape.leaf(weights.key_term(layer, src).weight));
    for (auto src : recipe.value_sources) vw.push_back(tape.leaf(weights.value_term(layer, src).weight));
  }
  KVPair out = reconstruct(recipe, kw, vw, leaves);
  return {out.keys.value(), out.values.value()};
}

namespace {

template <typename Fill>
FusionWeights make_weights(const SharingPlan& plan, std::size_t head_dim, Fill fill) {
  if (head_dim == 0 || head_dim % 2 != 0) throw DimensionError("head_dim must be even and positive");
  FusionWeights w;
  w.head_dim = head_dim;
  for (const auto& [layer, r] : plan.recipes()) {
    if (r.kind != ReconstructionKind::WeightedFusion) continue;
    const bool vec = r.granularity == WeightGranularity::Vector;
    LayerFusionWeights lw;
    for (auto src : r.key_sources) lw.key.push_back({src, fill(vec ? head_dim / 2 : 1)});
    for (auto src : r.value_sources) lw.value.push_back({src, fill(vec ? head_dim : 1)});
    w.layers.emplace(layer, std::move(lw));
  }
  return w;
}

}  // namespace

FusionWeights init_ones(const SharingPlan& plan, std::size_t head_dim) {
  return make_weights(plan, head_dim, [](std::size_t n) { return Tensor({n}, 1.0); });
}

FusionWeights init_normal(const SharingPlan& plan, std::uint64_t seed, std::size_t head_dim) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  return make_weights(plan, head_dim, [&](std::size_t n) {
    Tensor t({n});
    for (auto& v : t.data()) v = normal(rng);
    return t;
  });
}

namespace {

void require_fusedkv(const SharingPlan& plan, const char* what) {
  if (!plan.is_fusedkv_shaped()) {
    throw PlanError(std::string(what) + " needs a FusedKV-shaped plan (storage 1..n, sources {1, n})");
  }
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("auxiliary weights disagree in shape");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

Tensor plus(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("auxiliary weights disagree in shape");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

const ChainWeights& chain_at(const AuxiliaryWeights& aux, std::size_t layer) {
  auto it = aux.layers.find(layer);
  if (it == aux.layers.end()) throw PlanError("auxiliary weights missing for layer " + std::to_string(layer));
  return it->second;
}

Tensor apply_key(const Tensor& k, const Tensor& w) {
  const std::size_t d = k.shape().back();
  const Tensor e = expand_key_weight(w, d);
  Tensor out = k;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= e[i % d];
  return out;
}

Tensor apply_value(const Tensor& v, const Tensor& w) {
  const std::size_t d = v.shape().back();
  const Tensor e = expand_value_weight(w, d);
  Tensor out = v;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= e[i % d];
  return out;
}

}  // namespace

AuxiliaryWeights sample_auxiliary(const SharingPlan& plan, std::uint64_t seed, std::size_t head_dim,
                                  WeightGranularity granularity) {
  require_fusedkv(plan, "sample_auxiliary");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const bool vec = granularity == WeightGranularity::Vector;
  auto draw = [&](std::size_t n) {
    Tensor t({n});
    for (auto& v : t.data()) v = normal(rng);
    return t;
  };
  AuxiliaryWeights aux;
  aux.head_dim = head_dim;
  for (auto layer : plan.reconstruction_layers()) {
    ChainWeights c;
    c.key_carry = draw(vec ? head_dim / 2 : 1);
    c.key_middle = draw(vec ? head_dim / 2 : 1);
    c.value_carry = draw(vec ? head_dim : 1);
    c.value_first = draw(vec ? head_dim : 1);
    aux.layers.emplace(layer, std::move(c));
  }
  return aux;
}

FusionWeights init_equivalent(const SharingPlan& plan, const AuxiliaryWeights& aux) {
  require_fusedkv(plan, "init_equivalent");
  const std::size_t n = plan.last_storage_layer();
  FusionWeights w;
  w.head_dim = aux.head_dim;
  Tensor a_first, a_middle, b_first, b_middle;
  for (auto layer : plan.reconstruction_layers()) {
    const ChainWeights& c = chain_at(aux, layer);
    if (layer == n + 1) {
      a_first = c.key_carry;
      a_middle = c.key_middle;
      b_first = c.value_first;
      b_middle = c.value_carry;
    } else {
      a_first = hadamard(c.key_carry, a_first);
      a_middle = plus(hadamard(c.key_carry, a_middle), c.key_middle);
      b_first = plus(hadamard(c.value_carry, b_first), c.value_first);
      b_middle = hadamard(c.value_carry, b_middle);
    }
    LayerFusionWeights lw;
    lw.key = {{1, a_first}, {n, a_middle}};
    lw.value = {{1, b_first}, {n, b_middle}};
    w.layers.emplace(layer, std::move(lw));
  }
  return w;
}

CacheMap iterative_reconstruct(const SharingPlan& plan, const AuxiliaryWeights& aux, const CacheMap& stored) {
  require_fusedkv(plan, "iterative_reconstruct");
  const std::size_t n = plan.last_storage_layer();
  auto get = [&](std::size_t src) -> const LayerCache& {
    auto it = stored.find(src);
    if (it == stored.end()) throw ReconstructionError("missing source cache " + std::to_string(src));
    return it->second;
  };
  const LayerCache& first = get(1);
  const LayerCache& mid = get(n);
  if (first.keys().shape() != mid.keys().shape()) {
    throw ReconstructionError("source caches 1 and " + std::to_string(n) + " differ in length");
  }
  CacheMap out;
  const Tensor* prev_k = nullptr;
  const Tensor* prev_v = nullptr;
  for (auto layer : plan.reconstruction_layers()) {
    const ChainWeights& c = chain_at(aux, layer);
    Tensor k, v;
    if (layer == n + 1) {
      k = plus(apply_key(first.keys(), c.key_carry), apply_key(mid.keys(), c.key_middle));
      v = plus(apply_value(first.values(), c.value_first), apply_value(mid.values(), c.value_carry));
    } else {
      k = plus(apply_key(*prev_k, c.key_carry), apply_key(mid.keys(), c.key_middle));
      v = plus(apply_value(*prev_v, c.value_carry), apply_value(first.values(), c.value_first));
    }
    auto [it, ok] = out.emplace(layer, LayerCache(layer, std::move(k), std::move(v)));
    prev_k = &it->second.keys();
    prev_v = &it->second.values();
  }
  return out;
}

std::string to_string(ReconstructionKind kind) {
  return kind == ReconstructionKind::DirectReuse ? "DirectReuse" : "WeightedFusion";
}

std::string to_string(WeightGranularity granularity) {
  return granularity == WeightGranularity::Scalar ? "Scalar" : "Vector";
}

}  // namespace kvshare
