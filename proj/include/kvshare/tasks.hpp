// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "kvshare/model.hpp"

namespace kvshare {

enum class TaskKind { Copy, Induction, CharCorpus };

std::string to_string(TaskKind kind);
TaskKind parse_task(std::string_view name);

/// Reserved token ids used by the synthetic tasks.
inline constexpr int kBosToken = 0;
inline constexpr int kSepToken = 1;
inline constexpr int kFirstSymbol = 2;

/// Copy: BOS s_1..s_k SEP s_1..s_k, loss only on the echoed half.
/// Induction: random noise, then a segment that is repeated; loss on the repetition.
/// CharCorpus: windows of a small built-in English text, loss everywhere.
struct TaskConfig {
  TaskKind kind = TaskKind::Copy;
  std::size_t segment = 8;      // symbols copied (copy) or repeated (induction)
  std::size_t noise = 8;        // random prefix length (induction)
  std::size_t window = 32;      // tokens per sample (char corpus)
  std::size_t batch_size = 8;
  std::size_t alphabet = 0;     // symbols drawn for copy/induction; 0 uses vocab - 2

  /// Tokens in one sample.
  std::size_t sequence_length() const;
};

class TaskSampler {
 public:
  TaskSampler(TaskConfig cfg, std::size_t vocab, std::uint64_t seed);

  Batch next();
  const TaskConfig& config() const { return cfg_; }

 private:
  std::vector<int> random_symbols(std::size_t n);

  TaskConfig cfg_;
  std::size_t vocab_;
  std::mt19937_64 rng_;
};

/// The built-in corpus and its character alphabet. Character c maps to its index in the alphabet.
std::string_view char_corpus();
std::string_view char_alphabet();
std::vector<int> encode_chars(std::string_view text);

}  // namespace kvshare
