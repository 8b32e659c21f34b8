// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace kvshare {

/// Rows of the analytic complexity table. MHA covers GQA through H_kv.
enum class CostMethod { MHA, YOCO, FusedKVLite, FusedKV };

std::string to_string(CostMethod method);
CostMethod parse_cost_method(std::string_view name);
std::vector<CostMethod> all_cost_methods();

struct WorkloadSpec {
  std::uint64_t layers = 24;      // L
  std::uint64_t seq_len = 8192;   // S, prefill length
  std::uint64_t decode_pos = 0;   // cache length seen by a decode step; 0 means S
  std::uint64_t head_dim = 128;   // D
  std::uint64_t query_heads = 16;  // H_q
  std::uint64_t kv_heads = 16;     // H_kv
  std::uint64_t bytes_per_element = 2;

  std::uint64_t decode_length() const { return decode_pos == 0 ? seq_len : decode_pos; }
  void validate() const;
};

struct DeviceProfile {
  std::string label;
  double peak_flops = 0.0;  // FLOP/s
  double bandwidth = 0.0;   // bytes/s

  void validate() const;
};

/// key=value text with keys label, peak_flops, bandwidth; '#' starts a comment.
DeviceProfile parse_device_profile(std::string_view text);
DeviceProfile load_device_profile(const std::filesystem::path& path);
/// h100, h20, a100.
DeviceProfile builtin_device(std::string_view name);
std::vector<DeviceProfile> builtin_devices();

/// Element and FLOP counts. Cache memory and I/O are taken at the decode position;
/// prefill_cache_write is the cache produced by prefill at length S.
struct CostBreakdown {
  CostMethod method = CostMethod::MHA;
  std::uint64_t prefill_flops = 0;
  std::uint64_t decode_flops = 0;
  std::uint64_t cache_memory = 0;
  std::uint64_t cache_io = 0;
  std::uint64_t prefill_cache_write = 0;
  std::uint64_t bytes_per_element = 2;
};

/// Throws std::overflow_error if a count leaves the uint64 range.
CostBreakdown table1_costs(CostMethod method, const WorkloadSpec& w);

struct LatencyEstimate {
  double ttft = 0.0;  // seconds
  double tpot = 0.0;  // seconds
  bool prefill_compute_bound = false;
  bool decode_compute_bound = false;
};

/// TTFT = max(prefill FLOPs / peak, (prefill cache bytes + weight bytes) / bandwidth)
/// TPOT = max(decode FLOPs / peak, (cache I/O bytes + weight bytes) / bandwidth)
LatencyEstimate roofline_latency(const CostBreakdown& costs, const DeviceProfile& dev, double weight_bytes);

struct SweepRow {
  CostMethod method;
  WorkloadSpec spec;
  DeviceProfile device;
  CostBreakdown costs;
  LatencyEstimate latency;
  // Ratios against MHA at the same spec and device.
  double prefill_flops_ratio = 1.0;
  double decode_flops_ratio = 1.0;
  double cache_memory_ratio = 1.0;
  double cache_io_ratio = 1.0;
  double ttft_ratio = 1.0;
  double tpot_ratio = 1.0;
};

/// Cross product methods x specs x devices, ordered device-major, then spec, then method.
std::vector<SweepRow> sweep(const std::vector<CostMethod>& methods, const std::vector<WorkloadSpec>& specs,
                            const std::vector<DeviceProfile>& devices, double weight_bytes);

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);
void write_sweep_json(std::ostream& os, const std::vector<SweepRow>& rows);

}  // namespace kvshare
