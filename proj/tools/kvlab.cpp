// SPDX-License-Identifier: Apache-2.0
// kvlab: command-line front end for training, invariant suites, cost sweeps and decode benchmarks.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kvshare/checkpoint.hpp"
#include "kvshare/costmodel.hpp"
#include "kvshare/model.hpp"
#include "kvshare/tasks.hpp"
#include "kvshare/trainer.hpp"
#include "kvshare/verify.hpp"

namespace fs = std::filesystem;
using namespace kvshare;
using json = nlohmann::json;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitInvariant = 3;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvariantFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_file;
  std::string out_dir;
  std::string format = "csv";
  std::uint64_t seed = 0;
};

struct ModelFlags {
  std::string strategy = "Vanilla";
  std::size_t layers = 8, d_model = 64, query_heads = 8, kv_heads = 0, vocab = 64, max_seq = 128, ffn_dim = 128;
  std::size_t middle = 0;
  std::string init = "normal";
  double init_std = 0.02;
  double rope_base = kDefaultRopeBase;
  std::string precision = "double";

  ModelConfig resolve(std::string_view strategy_name) const {
    ModelConfig c;
    c.strategy = Strategy::parse(strategy_name).name();
    c.layers = layers;
    c.d_model = d_model;
    c.query_heads = query_heads;
    c.kv_heads = kv_heads != 0 ? kv_heads
                               : (Strategy::parse(strategy_name).kind == StrategyKind::GQA ? query_heads / 2 : query_heads);
    c.vocab = vocab;
    c.max_seq = max_seq;
    c.ffn_dim = ffn_dim;
    c.middle = middle;
    c.init = parse_init_scheme(init);
    c.init_std = init_std;
    c.rope_base = rope_base;
    c.precision = parse_precision(precision);
    c.validate();
    return c;
  }
};

struct TrainFlags {
  std::string task = "copy";
  std::size_t steps = 500, batch_size = 8, segment = 8, noise = 8, window = 32, alphabet = 0, eval_interval = 10;
  double lr = 3e-3, weight_decay = 0.1, grad_clip = 1.0;
  bool cosine = false;
  std::size_t warmup = 0;

  TrainConfig resolve(std::uint64_t seed) const {
    TrainConfig t;
    t.task.kind = parse_task(task);
    t.task.batch_size = batch_size;
    t.task.segment = segment;
    t.task.noise = noise;
    t.task.window = window;
    t.task.alphabet = alphabet;
    t.steps = steps;
    t.eval_interval = eval_interval;
    t.seed = seed;
    t.optimizer.lr = lr;
    t.optimizer.weight_decay = weight_decay;
    t.optimizer.grad_clip = grad_clip;
    t.optimizer.cosine = cosine;
    t.optimizer.warmup = warmup;
    return t;
  }
};

void add_common(CLI::App* app, Common& c, bool needs_seed) {
  app->add_option("--config", c.config_file, "Plain key=value file; command-line flags win")->check(CLI::ExistingFile);
  app->add_option("--out-dir", c.out_dir, "Output directory (default $KVSHARE_OUT_DIR or ./kvlab-out)");
  app->add_option("--format", c.format, "Report format")->check(CLI::IsMember({"csv", "json"}));
  app->add_option("--seed", c.seed, needs_seed ? "Random seed (required)" : "Random seed");
}

void add_model(CLI::App* app, ModelFlags& m, bool with_strategy) {
  if (with_strategy) app->add_option("--strategy", m.strategy, "Sharing strategy");
  app->add_option("--layers", m.layers, "Decoder layers L");
  app->add_option("--d-model", m.d_model, "Model width");
  app->add_option("--query-heads", m.query_heads, "Query heads H_q");
  app->add_option("--kv-heads", m.kv_heads, "KV heads H_kv (default H_q, or H_q/2 for GQA)");
  app->add_option("--vocab", m.vocab, "Vocabulary size");
  app->add_option("--max-seq", m.max_seq, "Maximum sequence length S");
  app->add_option("--ffn-dim", m.ffn_dim, "SwiGLU hidden width");
  app->add_option("--middle", m.middle, "Middle storage layer n (0 = L/2)");
  app->add_option("--init", m.init, "Fusion weight init")->check(CLI::IsMember({"normal", "equivalent"}));
  app->add_option("--init-std", m.init_std, "Std of linear weight init");
  app->add_option("--rope-base", m.rope_base, "RoPE base");
  app->add_option("--precision", m.precision, "Arithmetic precision")->check(CLI::IsMember({"double", "single"}));
}

void add_train(CLI::App* app, TrainFlags& t) {
  app->add_option("--task", t.task, "copy | induction | char-corpus");
  app->add_option("--steps", t.steps, "Optimizer steps")->check(CLI::PositiveNumber);
  app->add_option("--batch-size", t.batch_size, "Sequences per step")->check(CLI::PositiveNumber);
  app->add_option("--segment", t.segment, "Copied / repeated segment length");
  app->add_option("--noise", t.noise, "Induction noise prefix length");
  app->add_option("--window", t.window, "Char-corpus window length");
  app->add_option("--alphabet", t.alphabet, "Symbols used by copy/induction (0 = vocab - 2)");
  app->add_option("--eval-interval", t.eval_interval, "Steps between evaluations")->check(CLI::PositiveNumber);
  app->add_option("--lr", t.lr, "Peak learning rate");
  app->add_option("--weight-decay", t.weight_decay, "AdamW decay on matrices");
  app->add_option("--grad-clip", t.grad_clip, "Global gradient norm clip (0 disables)");
  app->add_flag("--cosine", t.cosine, "Cosine learning-rate decay");
  app->add_option("--warmup", t.warmup, "Linear warmup steps");
}

/// Fills options that were not given on the command line from a key=value file.
void apply_config_file(CLI::App* app, const std::string& path) {
  if (path.empty()) return;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(b, eq - b), value = line.substr(eq + 1);
    key.erase(key.find_last_not_of(" \t") + 1);
    value.erase(0, value.find_first_not_of(" \t"));
    value.erase(value.find_last_not_of(" \t\r") + 1);
    std::replace(key.begin(), key.end(), '_', '-');
    if (key == "config") throw ConfigError("config files cannot include other config files");
    CLI::Option* opt = app->get_option_no_throw("--" + key);
    if (!opt) throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

std::string git_describe() { return KVSHARE_VERSION; }

fs::path resolve_out_dir(const Common& c) {
  std::string dir = c.out_dir;
  if (dir.empty()) {
    const char* env = std::getenv("KVSHARE_OUT_DIR");
    dir = env && *env ? env : "kvlab-out";
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path probe = fs::path(dir) / ".kvlab-write-test";
  std::ofstream test(probe);
  if (!test) throw ConfigError("output directory " + dir + " is not writable");
  test.close();
  fs::remove(probe, ec);
  return dir;
}

/// Serializes every file write so concurrent runs never interleave output.
class ArtifactWriter {
 public:
  ArtifactWriter(fs::path dir, std::string format) : dir_(std::move(dir)), format_(std::move(format)) {}

  /// Writes a CSV table, or the same rows as a JSON array of objects.
  fs::path table(const std::string& stem, const std::string& csv) {
    std::lock_guard lock(mu_);
    const fs::path path = dir_ / (stem + "." + format_);
    std::ofstream os(path);
    if (format_ == "csv") os << csv;
    else os << csv_to_json(csv).dump(2) << '\n';
    if (!os) throw std::runtime_error("failed writing " + path.string());
    written_.push_back(path.filename().string());
    return path;
  }

  void manifest(const std::string& command, const std::string& resolved_config, std::uint64_t seed,
                const json& extra = json::object()) {
    std::lock_guard lock(mu_);
    json m;
    m["command"] = command;
    m["version"] = git_describe();
    m["seed"] = seed;
    json cfg = json::object();
    std::istringstream in(resolved_config);
    for (std::string line; std::getline(in, line);) {
      const auto eq = line.find('=');
      if (eq == std::string::npos || line[0] == '#' || line[0] == '[') continue;
      std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      key.erase(key.find_last_not_of(' ') + 1);
      value.erase(0, value.find_first_not_of(' '));
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
      cfg[key] = value;
    }
    m["config"] = cfg;
    m["artifacts"] = written_;
    for (auto& [k, v] : extra.items()) m[k] = v;
    std::ofstream os(dir_ / "manifest.json");
    os << m.dump(2) << '\n';
  }

  const fs::path& dir() const { return dir_; }

 private:
  static json csv_to_json(const std::string& csv) {
    std::istringstream in(csv);
    std::string header;
    std::getline(in, header);
    auto split = [](const std::string& line) {
      std::vector<std::string> cells;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
      if (!line.empty() && line.back() == ',') cells.emplace_back();
      return cells;
    };
    const auto cols = split(header);
    json rows = json::array();
    for (std::string line; std::getline(in, line);) {
      const auto cells = split(line);
      json row = json::object();
      for (std::size_t i = 0; i < cols.size(); ++i) {
        const std::string cell = i < cells.size() ? cells[i] : "";
        if (cell.empty()) {
          row[cols[i]] = nullptr;
          continue;
        }
        char* end = nullptr;
        const double v = std::strtod(cell.c_str(), &end);
        if (end && *end == '\0') row[cols[i]] = v;
        else row[cols[i]] = cell;
      }
      rows.push_back(row);
    }
    return rows;
  }

  std::mutex mu_;
  fs::path dir_;
  std::string format_;
  std::vector<std::string> written_;
};

/// "a..b" doubles from a to b; "x,y,z" lists; both may be mixed: "8,16..64".
std::vector<std::uint64_t> expand_range(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  auto number = [&](const std::string& s) -> std::uint64_t {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(s, &used);
      if (used != s.size() || v == 0) throw std::invalid_argument("bad");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("'" + s + "' is not a positive integer in '" + text + "'");
    }
  };
  for (std::string part; std::getline(ss, part, ',');) {
    const auto dots = part.find("..");
    if (dots == std::string::npos) {
      out.push_back(number(part));
      continue;
    }
    const auto lo = number(part.substr(0, dots)), hi = number(part.substr(dots + 2));
    if (lo > hi) throw ConfigError("empty range '" + part + "'");
    for (auto v = lo; v <= hi; v *= 2) out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty value list '" + text + "'");
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');)
    if (!part.empty()) out.push_back(part);
  return out;
}

std::string loss_csv(const TrainReport& r) {
  std::ostringstream os;
  write_loss_csv(os, r);
  return os.str();
}

std::string grad_csv(const TrainReport& r) {
  std::ostringstream os;
  write_grad_norm_csv(os, r);
  return os.str();
}

std::string heatmap_csv(const FusionHeatmap& h) {
  std::ostringstream os;
  write_heatmap_csv(os, h);
  return os.str();
}

std::size_t peak_cache(const Model& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(m.config().vocab) - 1);
  const std::size_t prompt_len = std::min<std::size_t>(16, m.config().max_seq - 1);
  std::vector<int> prompt(prompt_len);
  for (auto& t : prompt) t = tok(rng);
  return decode(m, prompt, 1).peak_cache_elements;
}

// ---------------------------------------------------------------- commands

int cmd_train(CLI::App* app, const Common& c, const ModelFlags& mf, const TrainFlags& tf, const std::string& ckpt) {
  Model model(mf.resolve(mf.strategy), c.seed);
  const TrainConfig tc = tf.resolve(c.seed);
  ArtifactWriter w(resolve_out_dir(c), c.format);
  const TrainReport report = train(model, tc);
  w.table("loss", loss_csv(report));
  w.table("grad_norms", grad_csv(report));
  if (report.heatmap) w.table("heatmap", heatmap_csv(*report.heatmap));
  if (!ckpt.empty()) save_checkpoint(fs::path(ckpt), model);
  w.manifest("train", app->config_to_str(true, false), c.seed, {{"model", model.config().to_key_values()}});
  std::cout << "train " << model.config().strategy << " task=" << to_string(tc.task.kind) << " steps=" << tc.steps
            << " eval_loss " << report.initial_eval_loss() << " -> " << report.final_eval_loss() << " ("
            << w.dir().string() << ")\n";
  return 0;
}

int cmd_verify(CLI::App* app, const Common& c, const std::string& suite, std::size_t trials) {
  VerifyOptions opts;
  opts.seed = c.seed;
  opts.trials = trials;
  ArtifactWriter w(resolve_out_dir(c), c.format);
  std::vector<CheckResult> results;
  try {
    results = run_verify_suite(suite, opts);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  std::ostringstream os;
  os << std::setprecision(17) << "suite,check,passed,measured,threshold,detail\n";
  std::vector<std::string> failed;
  for (const auto& r : results) {
    std::string detail = r.detail;
    std::replace(detail.begin(), detail.end(), ',', ';');
    os << r.suite << ',' << r.name << ',' << (r.passed ? 1 : 0) << ',' << r.measured << ',' << r.threshold << ','
       << detail << '\n';
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.suite << '/' << r.name << " measured=" << r.measured
              << " threshold=" << r.threshold << (r.detail.empty() ? "" : " (" + r.detail + ")") << '\n';
    if (!r.passed) failed.push_back(r.suite + "/" + r.name);
  }
  w.table("verify", os.str());
  w.manifest("verify", app->config_to_str(true, false), c.seed);
  std::cout << "verify " << suite << ": " << results.size() - failed.size() << "/" << results.size() << " passed\n";
  if (!failed.empty()) {
    std::string names;
    for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
    throw InvariantFailure("failing invariants: " + names);
  }
  return 0;
}

struct CostFlags {
  std::string methods = "MHA,YOCO,FusedKV-Lite,FusedKV";
  std::string L = "24", S = "2048..32768", D = "128", Hq = "16", Hkv = "16";
  std::uint64_t s_dec = 0, bytes_per_element = 2;
  std::string devices = "h100";
  double weight_bytes = 0.0;
};

int cmd_cost(CLI::App* app, const Common& c, const CostFlags& f) {
  std::vector<CostMethod> methods;
  std::vector<DeviceProfile> devices;
  try {
    for (const auto& m : split_list(f.methods)) methods.push_back(parse_cost_method(m));
    for (const auto& d : split_list(f.devices))
      devices.push_back(fs::exists(d) ? load_device_profile(d) : builtin_device(d));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (methods.empty() || devices.empty()) throw ConfigError("cost needs at least one method and one device");
  std::vector<WorkloadSpec> specs;
  for (auto L : expand_range(f.L))
    for (auto S : expand_range(f.S))
      for (auto D : expand_range(f.D))
        for (auto hq : expand_range(f.Hq))
          for (auto hkv : expand_range(f.Hkv)) {
            WorkloadSpec w{L, S, f.s_dec, D, hq, hkv, f.bytes_per_element};
            try {
              w.validate();
            } catch (const std::invalid_argument& e) {
              throw ConfigError(e.what());
            }
            specs.push_back(w);
          }
  ArtifactWriter w(resolve_out_dir(c), c.format);
  const auto rows = sweep(methods, specs, devices, f.weight_bytes);
  std::ostringstream os;
  write_sweep_csv(os, rows);
  w.table("cost", os.str());
  w.manifest("cost", app->config_to_str(true, false), c.seed);
  std::cout << "cost: " << rows.size() << " rows (" << methods.size() << " methods x " << specs.size() << " specs x "
            << devices.size() << " devices)\n";
  return 0;
}

int cmd_heatmap(CLI::App* app, const Common& c, const ModelFlags& mf, const TrainFlags& tf, const std::string& ckpt,
                bool train_first) {
  std::optional<Model> model;
  if (!ckpt.empty()) model.emplace(load_checkpoint(fs::path(ckpt)));
  else model.emplace(mf.resolve(mf.strategy), c.seed);
  if (!model->plan().has_fusion_weights()) {
    throw ConfigError("strategy " + model->config().strategy + " has no fusion weights");
  }
  ArtifactWriter w(resolve_out_dir(c), c.format);
  if (train_first) {
    const TrainReport r = train(*model, tf.resolve(c.seed));
    w.table("loss", loss_csv(r));
  }
  const FusionHeatmap h = fusion_weight_heatmap(*model);
  w.table("heatmap", heatmap_csv(h));
  w.manifest("heatmap", app->config_to_str(true, false), c.seed, {{"model", model->config().to_key_values()}});
  std::cout << "heatmap " << model->config().strategy << ": " << h.targets.size() << " targets x "
            << h.key_sources.size() << " key sources, " << h.value_sources.size() << " value sources\n";
  return 0;
}

int cmd_decode_bench(CLI::App* app, const Common& c, const ModelFlags& mf, const std::string& strategies,
                     std::size_t prompt_len, std::size_t new_tokens) {
  std::vector<std::string> names = split_list(strategies);
  if (names.empty())
    for (const auto& s : strategy_catalog()) names.push_back(s.name());
  ArtifactWriter w(resolve_out_dir(c), c.format);
  std::ostringstream os;
  os << std::setprecision(17)
     << "strategy,storage_layers,persistent_caches,peak_cache_elements,peak_cache_ratio,max_logit_gap,decode_seconds\n";
  std::mt19937_64 rng(c.seed);
  std::vector<int> prompt(prompt_len);
  {
    std::uniform_int_distribution<int> tok(0, static_cast<int>(mf.vocab) - 1);
    for (auto& t : prompt) t = tok(rng);
  }
  ModelConfig base = mf.resolve("Vanilla");
  const double vanilla_peak = static_cast<double>(decode(Model(base, c.seed), prompt, new_tokens).peak_cache_elements);
  for (const auto& name : names) {
    const Model m(mf.resolve(name), c.seed);
    const std::size_t vocab = m.config().vocab;
    const auto t0 = std::chrono::steady_clock::now();
    const DecodeResult r = decode(m, prompt, new_tokens);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    double gap = 0.0;
    if (new_tokens > 0) {
      std::vector<int> all = prompt;
      all.insert(all.end(), r.generated.begin(), r.generated.end() - 1);
      const Tensor full = full_logits(m, all);
      for (std::size_t g = 0; g < r.step_logits.size(); ++g)
        for (std::size_t v = 0; v < vocab; ++v)
          gap = std::max(gap, std::abs(r.step_logits[g][v] - full[(prompt_len - 1 + g) * vocab + v]));
    }
    os << m.config().strategy << ',' << m.plan().storage_layers().size() << ',' << r.persistent_caches << ','
       << r.peak_cache_elements << ',' << static_cast<double>(r.peak_cache_elements) / vanilla_peak << ',' << gap
       << ',' << secs << '\n';
  }
  w.table("decode", os.str());
  w.manifest("decode-bench", app->config_to_str(true, false), c.seed);
  std::cout << "decode-bench: " << names.size() << " strategies, prompt " << prompt_len << " + " << new_tokens
            << " tokens\n";
  return 0;
}

int cmd_compare(CLI::App* app, const Common& c, const ModelFlags& mf, const TrainFlags& tf,
                const std::string& strategies, std::size_t jobs) {
  const std::vector<std::string> names = split_list(strategies);
  if (names.size() < 2) throw ConfigError("compare needs at least two strategies");
  std::vector<ModelConfig> cfgs;
  for (const auto& n : names) cfgs.push_back(mf.resolve(n));
  const TrainConfig tc = tf.resolve(c.seed);
  ArtifactWriter w(resolve_out_dir(c), c.format);

  struct Run {
    std::optional<TrainReport> report;
    std::size_t peak = 0;
    std::size_t params = 0;
    std::string error;
  };
  std::vector<Run> runs(names.size());
  std::mutex progress;
  auto work = [&](std::size_t i) {
    try {
      Model m(cfgs[i], c.seed);
      runs[i].params = m.parameter_count();
      runs[i].peak = peak_cache(m, c.seed);
      runs[i].report = train(m, tc);
      w.table("loss_" + m.config().strategy, loss_csv(*runs[i].report));
      std::lock_guard lock(progress);
      std::cout << "  " << m.config().strategy << " done: eval " << runs[i].report->initial_eval_loss() << " -> "
                << runs[i].report->final_eval_loss() << '\n';
    } catch (const std::exception& e) {
      runs[i].error = e.what();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, names.size()));
  std::vector<std::thread> pool;
  std::size_t next = 0;
  std::mutex queue;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard lock(queue);
          if (next >= names.size()) return;
          i = next++;
        }
        work(i);
      }
    });
  }
  for (auto& th : pool) th.join();

  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (!runs[i].error.empty()) {
      w.manifest("compare", app->config_to_str(true, false), c.seed, {{"aborted_by", cfgs[i].strategy}});
      throw std::runtime_error("compare aborted: " + cfgs[i].strategy + ": " + runs[i].error);
    }
  }

  std::ostringstream losses, grads, summary;
  losses << std::setprecision(17) << "strategy,step,train_loss,eval_loss\n";
  grads << std::setprecision(17) << "strategy,step,layer,q_norm,k_norm,v_norm\n";
  summary << std::setprecision(17)
          << "strategy,parameters,peak_cache_elements,peak_cache_ratio,initial_eval_loss,final_eval_loss,loss_ratio\n";
  const double base_peak = static_cast<double>(runs[0].peak);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = *runs[i].report;
    const std::string& name = cfgs[i].strategy;
    std::istringstream l(loss_csv(r)), g(grad_csv(r));
    std::string line;
    std::getline(l, line);
    while (std::getline(l, line)) losses << name << ',' << line << '\n';
    std::getline(g, line);
    while (std::getline(g, line)) grads << name << ',' << line << '\n';
    summary << name << ',' << runs[i].params << ',' << runs[i].peak << ','
            << static_cast<double>(runs[i].peak) / base_peak << ',' << r.initial_eval_loss() << ','
            << r.final_eval_loss() << ',' << r.final_eval_loss() / r.initial_eval_loss() << '\n';
  }
  std::ostringstream claims;
  claims << std::setprecision(17) << "claim,lhs,rhs,lhs_final_loss,rhs_final_loss,holds,status\n";
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (std::size_t j = i + 1; j < runs.size(); ++j) {
      const double a = runs[i].report->final_eval_loss(), b = runs[j].report->final_eval_loss();
      claims << "final_loss_lower," << cfgs[i].strategy << ',' << cfgs[j].strategy << ',' << a << ',' << b << ','
             << (a < b ? 1 : 0) << ",reported not gated\n";
    }
  w.table("compare_loss", losses.str());
  w.table("compare_grad_norms", grads.str());
  w.table("compare_summary", summary.str());
  w.table("compare_claims", claims.str());
  w.manifest("compare", app->config_to_str(true, false), c.seed);
  std::cout << "compare: " << names.size() << " strategies (" << w.dir().string() << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kvlab: cross-layer KV-cache sharing laboratory"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", git_describe());

  Common train_c, verify_c, cost_c, heat_c, dec_c, cmp_c;
  ModelFlags train_m, heat_m, dec_m, cmp_m;
  TrainFlags train_t, heat_t, cmp_t;
  std::string train_ckpt, heat_ckpt, verify_suite = "all", dec_strategies, cmp_strategies;
  std::size_t verify_trials = 1000, dec_prompt = 32, dec_new = 16, cmp_jobs = 1;
  bool heat_train = false;
  CostFlags cost_f;

  auto* train_cmd = app.add_subcommand("train", "Train one model on a synthetic task");
  add_common(train_cmd, train_c, true);
  add_model(train_cmd, train_m, true);
  add_train(train_cmd, train_t);
  train_cmd->add_option("--save-checkpoint", train_ckpt, "Write the trained model here");

  auto* verify_cmd = app.add_subcommand("verify", "Run invariant suites");
  add_common(verify_cmd, verify_c, true);
  verify_cmd->add_option("--suite", verify_suite, "numerics|rope|sharing|attention|model|costmodel|all");
  verify_cmd->add_option("--trials", verify_trials, "Random draws for the RoPE identities");

  auto* cost_cmd = app.add_subcommand("cost", "Analytic cost and roofline latency sweep");
  add_common(cost_cmd, cost_c, false);
  cost_cmd->add_option("--methods", cost_f.methods, "Comma list of MHA, GQA, YOCO, FusedKV-Lite, FusedKV");
  cost_cmd->add_option("--L", cost_f.L, "Layers (list or a..b doubling range)");
  cost_cmd->add_option("--S", cost_f.S, "Prefill lengths (list or a..b doubling range)");
  cost_cmd->add_option("--D", cost_f.D, "Head dims");
  cost_cmd->add_option("--Hq", cost_f.Hq, "Query heads");
  cost_cmd->add_option("--Hkv", cost_f.Hkv, "KV heads");
  cost_cmd->add_option("--s-dec", cost_f.s_dec, "Decode position (0 = S)");
  cost_cmd->add_option("--bytes-per-element", cost_f.bytes_per_element, "Cache element size");
  cost_cmd->add_option("--device", cost_f.devices, "Comma list of built-in names (h100,h20,a100) or profile files");
  cost_cmd->add_option("--weight-bytes", cost_f.weight_bytes, "Weight bytes read per step");

  auto* heat_cmd = app.add_subcommand("heatmap", "Dump fusion weights as a target x source matrix");
  add_common(heat_cmd, heat_c, false);
  add_model(heat_cmd, heat_m, true);
  add_train(heat_cmd, heat_t);
  heat_cmd->add_option("--checkpoint", heat_ckpt, "Load the model from a checkpoint");
  heat_cmd->add_flag("--train", heat_train, "Train before dumping");

  auto* dec_cmd = app.add_subcommand("decode-bench", "Greedy decode statistics per strategy");
  add_common(dec_cmd, dec_c, false);
  add_model(dec_cmd, dec_m, false);
  dec_cmd->add_option("--strategies", dec_strategies, "Comma list (default: whole catalog)");
  dec_cmd->add_option("--prompt-len", dec_prompt, "Prompt tokens");
  dec_cmd->add_option("--new-tokens", dec_new, "Generated tokens");

  auto* cmp_cmd = app.add_subcommand("compare", "Train several strategies under one config");
  add_common(cmp_cmd, cmp_c, true);
  add_model(cmp_cmd, cmp_m, false);
  add_train(cmp_cmd, cmp_t);
  cmp_cmd->add_option("--strategies", cmp_strategies, "Comma list of at least two strategies");
  cmp_cmd->add_option("--jobs", cmp_jobs, "Worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    std::vector<std::pair<CLI::App*, Common*>> commons = {{train_cmd, &train_c}, {verify_cmd, &verify_c},
                                                          {cost_cmd, &cost_c},   {heat_cmd, &heat_c},
                                                          {dec_cmd, &dec_c},     {cmp_cmd, &cmp_c}};
    for (auto& [cmd, common] : commons) {
      if (!cmd->parsed()) continue;
      try {
        apply_config_file(cmd, common->config_file);
      } catch (const CLI::Error& e) {
        throw ConfigError(e.what());
      }
      const bool needs_seed = cmd == train_cmd || cmd == verify_cmd || cmd == cmp_cmd;
      if (needs_seed && cmd->get_option("--seed")->count() == 0) {
        throw ConfigError(cmd->get_name() + " requires --seed (flag or config file)");
      }
    }
    if (train_cmd->parsed()) return cmd_train(train_cmd, train_c, train_m, train_t, train_ckpt);
    if (verify_cmd->parsed()) return cmd_verify(verify_cmd, verify_c, verify_suite, verify_trials);
    if (cost_cmd->parsed()) return cmd_cost(cost_cmd, cost_c, cost_f);
    if (heat_cmd->parsed()) return cmd_heatmap(heat_cmd, heat_c, heat_m, heat_t, heat_ckpt, heat_train);
    if (dec_cmd->parsed()) return cmd_decode_bench(dec_cmd, dec_c, dec_m, dec_strategies, dec_prompt, dec_new);
    if (cmp_cmd->parsed()) return cmd_compare(cmp_cmd, cmp_c, cmp_m, cmp_t, cmp_strategies, cmp_jobs);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InvariantFailure& e) {
    std::cerr << "invariant failure: " << e.what() << '\n';
    return kExitInvariant;
  } catch (const DivergenceError& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
