// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "kvshare/costmodel.hpp"
#include "json.hpp"

using namespace kvshare;

TEST_CASE("table cells at L=24, S=8192, D=128, H_q=H_kv=16") {
  const WorkloadSpec w{24, 8192, 0, 128, 16, 16, 2};
  const auto mha = table1_costs(CostMethod::MHA, w);
  CHECK(mha.prefill_flops == 19791209299968ull);
  CHECK(mha.decode_flops == 2415919104ull);
  CHECK(mha.cache_memory == 805306368ull);
  CHECK(mha.cache_io == 805306368ull);
  for (auto m : {CostMethod::YOCO, CostMethod::FusedKVLite}) {
    const auto c = table1_costs(m, w);
    CHECK(c.prefill_flops == 9896611282944ull);
    CHECK(c.decode_flops == 2214592512ull);
    CHECK(c.cache_memory == 402653184ull);
    CHECK(c.cache_io == 805306368ull);
  }
  const auto fk = table1_costs(CostMethod::FusedKV, w);
  CHECK(fk.prefill_flops == 9897819242496ull);
  CHECK(fk.decode_flops == 3422552064ull);
  CHECK(fk.cache_memory == 402653184ull);
  CHECK(fk.cache_io == 1207959552ull);
}

TEST_CASE("GQA row and decode position") {
  // L=2, S=4, D=2, H_q=4, H_kv=2: H_q*D = 8, H_kv*D = 4.
  const WorkloadSpec w{2, 4, 6, 2, 4, 2, 1};
  const auto c = table1_costs(CostMethod::MHA, w);
  CHECK(c.prefill_flops == 2ull * 4 * 8 * (16 + 32 + 16));
  CHECK(c.decode_flops == 2ull * 8 * (24 + 32 + 16));
  CHECK(c.cache_memory == 2ull * 2 * 6 * 4);
  CHECK(c.prefill_cache_write == 2ull * 2 * 4 * 4);
  const auto f = table1_costs(CostMethod::FusedKV, w);
  // 3*H_kv/H_q*L*S*H_q*D = 3*L*S*D*H_kv = 96; decode 3*L*D*S*H_kv = 144 at S=6.
  CHECK(f.prefill_flops == 2ull * 4 * 8 * (8 + 16 + 8 + 2) + 96 + 2ull * 2 * 64);
  CHECK(f.decode_flops == 2ull * 8 * (24 + 32 + 8) + 144);
}

TEST_CASE("ratios hold exactly across sizes") {
  for (std::uint64_t L : {2u, 24u, 80u})
    for (std::uint64_t S : {16u, 4096u, 131072u}) {
      const WorkloadSpec w{L, S, 0, 128, 32, 8, 2};
      const auto mha = table1_costs(CostMethod::MHA, w), fk = table1_costs(CostMethod::FusedKV, w);
      CHECK(2 * fk.cache_memory == mha.cache_memory);
      CHECK(2 * fk.cache_io == 3 * mha.cache_io);
      CHECK(table1_costs(CostMethod::FusedKVLite, w).cache_io == mha.cache_io);
    }
}

TEST_CASE("workload validation and overflow") {
  WorkloadSpec w;
  w.query_heads = 4;
  w.kv_heads = 8;
  CHECK_THROWS(table1_costs(CostMethod::MHA, w));
  w.query_heads = 12;
  CHECK_THROWS(table1_costs(CostMethod::MHA, w));
  WorkloadSpec huge{1ull << 20, 1ull << 30, 0, 1024, 1024, 1024, 2};
  CHECK_THROWS_AS(table1_costs(CostMethod::MHA, huge), std::overflow_error);
  CHECK(parse_cost_method("gqa") == CostMethod::MHA);
  CHECK(parse_cost_method("lite") == CostMethod::FusedKVLite);
  CHECK_THROWS(parse_cost_method("mla"));
}

TEST_CASE("roofline picks the larger of compute and memory time") {
  CostBreakdown c;
  c.prefill_flops = 1000;
  c.decode_flops = 10;
  c.prefill_cache_write = 50;
  c.cache_io = 300;
  c.bytes_per_element = 2;
  const DeviceProfile dev{"toy", 100.0, 10.0};
  const auto l = roofline_latency(c, dev, 20.0);
  CHECK(l.ttft == doctest::Approx(12.0));  // max(1000/100, (100+20)/10)
  CHECK_FALSE(l.prefill_compute_bound);
  CHECK(l.tpot == doctest::Approx(62.0));  // max(0.1, (600+20)/10)
  const auto m = roofline_latency(c, DeviceProfile{"fast-mem", 100.0, 1000.0}, 0.0);
  CHECK(m.ttft == doctest::Approx(10.0));
  CHECK(m.prefill_compute_bound);
}

TEST_CASE("device profiles") {
  const DeviceProfile d = parse_device_profile("# lab box\nlabel = box\npeak_flops = 2e14\nbandwidth=1.5e12\n");
  CHECK(d.label == "box");
  CHECK(d.peak_flops == 2e14);
  CHECK(d.bandwidth == 1.5e12);
  CHECK_THROWS(parse_device_profile("label = x\npeak_flops = 1\n"));
  CHECK_THROWS(parse_device_profile("label = x\npeak_flops = -1\nbandwidth = 1\n"));
  CHECK_THROWS(parse_device_profile("label = x\npeak_flops = 1\nbandwidth = 1\ncolour = red\n"));
  const auto path = std::filesystem::temp_directory_path() / "kvshare_test_device.txt";
  std::ofstream(path) << "label=file\npeak_flops=1e12\nbandwidth=1e11\n";
  CHECK(load_device_profile(path).label == "file");
  std::filesystem::remove(path);
  CHECK(builtin_device("h100").peak_flops == 989e12);
  CHECK(builtin_devices().size() == 3);
  CHECK_THROWS(builtin_device("tpu"));
}

TEST_CASE("latency ratios at long context") {
  for (const auto& dev : builtin_devices()) {
    const WorkloadSpec w{24, 32768, 0, 128, 16, 16, 2};
    const auto base = roofline_latency(table1_costs(CostMethod::MHA, w), dev, 0.0);
    const auto fk = roofline_latency(table1_costs(CostMethod::FusedKV, w), dev, 0.0);
    const auto lite = roofline_latency(table1_costs(CostMethod::FusedKVLite, w), dev, 0.0);
    CHECK(fk.ttft / base.ttft == doctest::Approx(0.5).epsilon(0.1));
    CHECK(fk.tpot / base.tpot == doctest::Approx(1.5).epsilon(0.03));
    CHECK(lite.tpot / base.tpot == doctest::Approx(1.0).epsilon(0.01));
  }
}

TEST_CASE("sweep ordering and writers") {
  std::vector<WorkloadSpec> specs = {{24, 1024, 0, 128, 16, 16, 2}, {24, 2048, 0, 128, 16, 16, 2}};
  const auto rows = sweep({CostMethod::MHA, CostMethod::FusedKV}, specs,
                          {builtin_device("h100"), builtin_device("a100")}, 0.0);
  REQUIRE(rows.size() == 8);
  CHECK(rows[0].device.label == "h100");
  CHECK(rows[0].spec.seq_len == 1024);
  CHECK(rows[1].method == CostMethod::FusedKV);
  CHECK(rows[2].spec.seq_len == 2048);
  CHECK(rows[4].device.label == "a100");
  CHECK(rows[1].cache_memory_ratio == 0.5);
  CHECK(rows[1].cache_io_ratio == 1.5);
  std::ostringstream csv;
  write_sweep_csv(csv, rows);
  std::size_t lines = 0;
  for (char c : csv.str()) lines += c == '\n';
  CHECK(lines == 9);
  std::ostringstream js;
  write_sweep_json(js, rows);
  const auto doc = nlohmann::json::parse(js.str());
  REQUIRE(doc.is_array());
  CHECK(doc.size() == 8);
  CHECK(doc[1]["cache_io_ratio"].get<double>() == 1.5);
}
