// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace kvshare {

/// Outcome of one invariant check. `measured` is compared against `threshold` in the
/// direction the check documents (usually measured < threshold).
struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  std::size_t trials = 1000;  // random draws for the RoPE identities
};

/// numerics, rope, sharing, attention, model, costmodel.
std::vector<std::string> verify_suite_names();

/// Runs one suite, or every suite for "all". Throws std::invalid_argument for unknown names.
std::vector<CheckResult> run_verify_suite(std::string_view suite, const VerifyOptions& opts = {});

}  // namespace kvshare
