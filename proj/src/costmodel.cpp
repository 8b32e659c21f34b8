// SPDX-License-Identifier: Apache-2.0
#include "kvshare/costmodel.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace kvshare {

namespace {

using Wide = unsigned __int128;

std::uint64_t narrow(Wide v, const char* what) {
  if (v > std::numeric_limits<std::uint64_t>::max()) {
    throw std::overflow_error(std::string(what) + " exceeds the 64-bit count range");
  }
  return static_cast<std::uint64_t>(v);
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::string to_string(CostMethod method) {
  switch (method) {
    case CostMethod::MHA: return "MHA";
    case CostMethod::YOCO: return "YOCO";
    case CostMethod::FusedKVLite: return "FusedKV-Lite";
    case CostMethod::FusedKV: return "FusedKV";
  }
  return "?";
}

CostMethod parse_cost_method(std::string_view name) {
  const std::string n = lower(name);
  if (n == "mha" || n == "gqa" || n == "mha/gqa" || n == "vanilla") return CostMethod::MHA;
  if (n == "yoco") return CostMethod::YOCO;
  if (n == "fusedkv-lite" || n == "lite") return CostMethod::FusedKVLite;
  if (n == "fusedkv") return CostMethod::FusedKV;
  throw std::invalid_argument("unknown cost method '" + std::string(name) + "' (MHA|GQA|YOCO|FusedKV-Lite|FusedKV)");
}

std::vector<CostMethod> all_cost_methods() {
  return {CostMethod::MHA, CostMethod::YOCO, CostMethod::FusedKVLite, CostMethod::FusedKV};
}

void WorkloadSpec::validate() const {
  if (layers == 0 || seq_len == 0 || head_dim == 0 || query_heads == 0 || kv_heads == 0 || bytes_per_element == 0) {
    throw std::invalid_argument("workload extents must be positive");
  }
  if (query_heads < kv_heads) throw std::invalid_argument("H_q must be at least H_kv");
  if (query_heads % kv_heads != 0) throw std::invalid_argument("H_q must be a multiple of H_kv");
}

void DeviceProfile::validate() const {
  if (!(peak_flops > 0.0) || !(bandwidth > 0.0) || !std::isfinite(peak_flops) || !std::isfinite(bandwidth)) {
    throw std::invalid_argument("device '" + label + "' needs positive peak_flops and bandwidth");
  }
}

DeviceProfile parse_device_profile(std::string_view text) {
  DeviceProfile dev;
  std::istringstream in{std::string(text)};
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("device line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "label") {
      dev.label = value;
    } else if (key == "peak_flops" || key == "bandwidth") {
      double v = 0.0;
      try {
        std::size_t used = 0;
        v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw std::invalid_argument("device line " + std::to_string(lineno) + ": '" + value + "' is not a number");
      }
      (key == "peak_flops" ? dev.peak_flops : dev.bandwidth) = v;
    } else {
      throw std::invalid_argument("device line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  if (dev.label.empty()) dev.label = "custom";
  dev.validate();
  return dev;
}

DeviceProfile load_device_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open device profile " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_device_profile(ss.str());
}

std::vector<DeviceProfile> builtin_devices() {
  return {
      {"h100", 989e12, 3.35e12},
      {"h20", 148e12, 4.0e12},
      {"a100", 312e12, 2.039e12},
  };
}

DeviceProfile builtin_device(std::string_view name) {
  const std::string n = lower(name);
  for (auto& d : builtin_devices())
    if (d.label == n) return d;
  throw std::invalid_argument("unknown device '" + std::string(name) + "' (h100|h20|a100 or a profile file)");
}

CostBreakdown table1_costs(CostMethod method, const WorkloadSpec& w) {
  w.validate();
  const Wide L = w.layers, S = w.seq_len, Sd = w.decode_length(), D = w.head_dim, Hq = w.query_heads,
             Hkv = w.kv_heads;
  const Wide HqD = Hq * D, HkvD = Hkv * D;
  CostBreakdown c;
  c.method = method;
  c.bytes_per_element = w.bytes_per_element;
  Wide prefill = 0, decode = 0, memory = 0, io = 0, write = 0;
  switch (method) {
    case CostMethod::MHA:
      prefill = L * S * HqD * (4 * S + 4 * HqD + 4 * HkvD);
      decode = L * HqD * (4 * Sd + 4 * HqD + 4 * HkvD);
      memory = 2 * L * Sd * HkvD;
      io = 2 * L * Sd * HkvD;
      write = 2 * L * S * HkvD;
      break;
    case CostMethod::YOCO:
    case CostMethod::FusedKVLite:
      prefill = L * S * HqD * (2 * S + 2 * HqD + 2 * HkvD + 2) + 2 * L * HqD * HqD;
      decode = L * HqD * (4 * Sd + 4 * HqD + 2 * HkvD);
      memory = L * Sd * HkvD;
      io = 2 * L * Sd * HkvD;
      write = L * S * HkvD;
      break;
    case CostMethod::FusedKV:
      // L*S*H_q*D * 3*H_kv/H_q and L*H_q*D * 3*S*H_kv/H_q, expanded so they stay integral.
      prefill = L * S * HqD * (2 * S + 2 * HqD + 2 * HkvD + 2) + 3 * L * S * D * Hkv + 2 * L * HqD * HqD;
      decode = L * HqD * (4 * Sd + 4 * HqD + 2 * HkvD) + 3 * L * D * Sd * Hkv;
      memory = L * Sd * HkvD;
      io = 3 * L * Sd * HkvD;
      write = L * S * HkvD;
      break;
  }
  c.prefill_flops = narrow(prefill, "prefill FLOPs");
  c.decode_flops = narrow(decode, "decode FLOPs");
  c.cache_memory = narrow(memory, "cache memory");
  c.cache_io = narrow(io, "cache I/O");
  c.prefill_cache_write = narrow(write, "prefill cache write");
  return c;
}

LatencyEstimate roofline_latency(const CostBreakdown& costs, const DeviceProfile& dev, double weight_bytes) {
  dev.validate();
  if (!(weight_bytes >= 0.0)) throw std::invalid_argument("weight bytes must be nonnegative");
  const double bpe = static_cast<double>(costs.bytes_per_element);
  LatencyEstimate est;
  const double prefill_compute = static_cast<double>(costs.prefill_flops) / dev.peak_flops;
  const double prefill_memory = (static_cast<double>(costs.prefill_cache_write) * bpe + weight_bytes) / dev.bandwidth;
  const double decode_compute = static_cast<double>(costs.decode_flops) / dev.peak_flops;
  const double decode_memory = (static_cast<double>(costs.cache_io) * bpe + weight_bytes) / dev.bandwidth;
  est.ttft = std::max(prefill_compute, prefill_memory);
  est.tpot = std::max(decode_compute, decode_memory);
  est.prefill_compute_bound = prefill_compute >= prefill_memory;
  est.decode_compute_bound = decode_compute >= decode_memory;
  return est;
}

std::vector<SweepRow> sweep(const std::vector<CostMethod>& methods, const std::vector<WorkloadSpec>& specs,
                            const std::vector<DeviceProfile>& devices, double weight_bytes) {
  std::vector<SweepRow> rows;
  for (const auto& dev : devices) {
    for (const auto& spec : specs) {
      const CostBreakdown base = table1_costs(CostMethod::MHA, spec);
      const LatencyEstimate base_lat = roofline_latency(base, dev, weight_bytes);
      for (auto m : methods) {
        SweepRow r{m, spec, dev, table1_costs(m, spec), {}};
        r.latency = roofline_latency(r.costs, dev, weight_bytes);
        auto ratio = [](std::uint64_t a, std::uint64_t b) { return static_cast<double>(a) / static_cast<double>(b); };
        r.prefill_flops_ratio = ratio(r.costs.prefill_flops, base.prefill_flops);
        r.decode_flops_ratio = ratio(r.costs.decode_flops, base.decode_flops);
        r.cache_memory_ratio = ratio(r.costs.cache_memory, base.cache_memory);
        r.cache_io_ratio = ratio(r.costs.cache_io, base.cache_io);
        r.ttft_ratio = r.latency.ttft / base_lat.ttft;
        r.tpot_ratio = r.latency.tpot / base_lat.tpot;
        rows.push_back(std::move(r));
      }
    }
  }
  return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << std::setprecision(17);
  os << "device,method,L,S,s_dec,D,H_q,H_kv,bytes_per_element,prefill_flops,decode_flops,cache_memory,cache_io,"
        "ttft_s,tpot_s,prefill_bound,decode_bound,prefill_flops_ratio,decode_flops_ratio,cache_memory_ratio,"
        "cache_io_ratio,ttft_ratio,tpot_ratio\n";
  for (const auto& r : rows) {
    os << r.device.label << ',' << to_string(r.method) << ',' << r.spec.layers << ',' << r.spec.seq_len << ','
       << r.spec.decode_length() << ',' << r.spec.head_dim << ',' << r.spec.query_heads << ',' << r.spec.kv_heads
       << ',' << r.spec.bytes_per_element << ',' << r.costs.prefill_flops << ',' << r.costs.decode_flops << ','
       << r.costs.cache_memory << ',' << r.costs.cache_io << ',' << r.latency.ttft << ',' << r.latency.tpot << ','
       << (r.latency.prefill_compute_bound ? "compute" : "memory") << ','
       << (r.latency.decode_compute_bound ? "compute" : "memory") << ',' << r.prefill_flops_ratio << ','
       << r.decode_flops_ratio << ',' << r.cache_memory_ratio << ',' << r.cache_io_ratio << ',' << r.ttft_ratio
       << ',' << r.tpot_ratio << '\n';
  }
}

void write_sweep_json(std::ostream& os, const std::vector<SweepRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({
        {"device", r.device.label},
        {"method", to_string(r.method)},
        {"L", r.spec.layers},
        {"S", r.spec.seq_len},
        {"s_dec", r.spec.decode_length()},
        {"D", r.spec.head_dim},
        {"H_q", r.spec.query_heads},
        {"H_kv", r.spec.kv_heads},
        {"bytes_per_element", r.spec.bytes_per_element},
        {"prefill_flops", r.costs.prefill_flops},
        {"decode_flops", r.costs.decode_flops},
        {"cache_memory", r.costs.cache_memory},
        {"cache_io", r.costs.cache_io},
        {"ttft_s", r.latency.ttft},
        {"tpot_s", r.latency.tpot},
        {"prefill_bound", r.latency.prefill_compute_bound ? "compute" : "memory"},
        {"decode_bound", r.latency.decode_compute_bound ? "compute" : "memory"},
        {"prefill_flops_ratio", r.prefill_flops_ratio},
        {"decode_flops_ratio", r.decode_flops_ratio},
        {"cache_memory_ratio", r.cache_memory_ratio},
        {"cache_io_ratio", r.cache_io_ratio},
        {"ttft_ratio", r.ttft_ratio},
        {"tpot_ratio", r.tpot_ratio},
    });
  }
  os << out.dump(2) << '\n';
}

}  // namespace kvshare
