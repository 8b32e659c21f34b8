// SPDX-License-Identifier: Apache-2.0
#include "kvshare/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace kvshare {

namespace {

constexpr std::string_view kAlphabet = " abcdefghijklmnopqrstuvwxyz.,'\n";

constexpr std::string_view kCorpus =
    "the cache holds the keys and values of every token seen so far. each new token reads the whole cache,\n"
    "so the memory it needs grows with the length of the text and with the number of layers.\n"
    "a layer that keeps its own cache pays for it in memory. a layer that borrows the cache of an earlier layer\n"
    "pays nothing, but it must make do with what the earlier layer chose to remember.\n"
    "the first layers see the words almost as they are written. the middle layers see how the words fit together.\n"
    "so a late layer may take its values from the bottom and its keys from the middle, and lose very little.\n"
    "rotations mark the place of each token. if the weights treat both members of a pair alike,\n"
    "only the distance between two tokens matters, and the place where the text began is forgotten.\n"
    "reading the cache is slow when the cache is large. computing is slow when the model is wide.\n"
    "which one rules depends on the machine, the batch and the length of the prompt.\n"
    "the small model learns to copy, to repeat what it has seen, and to spell the words of this little text.\n"
    "it does not learn much else, but that is enough to show that the gradients flow where they should.\n";

}  // namespace

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Induction: return "induction";
    case TaskKind::CharCorpus: return "char-corpus";
  }
  return "?";
}

TaskKind parse_task(std::string_view name) {
  std::string n(name);
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
  std::replace(n.begin(), n.end(), '_', '-');
  if (n == "copy") return TaskKind::Copy;
  if (n == "induction" || n == "induction-heads") return TaskKind::Induction;
  if (n == "char-corpus" || n == "char" || n == "chars") return TaskKind::CharCorpus;
  throw std::invalid_argument("unknown task '" + std::string(name) + "' (copy|induction|char-corpus)");
}

std::string_view char_corpus() { return kCorpus; }
std::string_view char_alphabet() { return kAlphabet; }

std::vector<int> encode_chars(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) {
    const auto pos = kAlphabet.find(c);
    if (pos == std::string_view::npos) throw std::invalid_argument(std::string("character '") + c + "' not in alphabet");
    out.push_back(static_cast<int>(pos));
  }
  return out;
}

std::size_t TaskConfig::sequence_length() const {
  switch (kind) {
    case TaskKind::Copy: return 2 * segment + 2;
    case TaskKind::Induction: return noise + 2 * segment;
    case TaskKind::CharCorpus: return window;
  }
  return 0;
}

TaskSampler::TaskSampler(TaskConfig cfg, std::size_t vocab, std::uint64_t seed)
    : cfg_(cfg), vocab_(vocab), rng_(seed) {
  if (cfg_.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (cfg_.kind == TaskKind::CharCorpus) {
    if (vocab_ < kAlphabet.size()) {
      throw std::invalid_argument("char-corpus needs vocab >= " + std::to_string(kAlphabet.size()));
    }
    if (cfg_.window < 2 || cfg_.window > kCorpus.size()) throw std::invalid_argument("char-corpus window out of range");
    return;
  }
  if (cfg_.segment == 0) throw std::invalid_argument("segment must be positive");
  if (vocab_ <= static_cast<std::size_t>(kFirstSymbol)) throw std::invalid_argument("vocab too small for task symbols");
  const std::size_t available = vocab_ - kFirstSymbol;
  if (cfg_.alphabet == 0) cfg_.alphabet = available;
  if (cfg_.alphabet > available) {
    throw std::invalid_argument("alphabet of " + std::to_string(cfg_.alphabet) + " exceeds the " +
                                std::to_string(available) + " symbols of the vocabulary");
  }
}

std::vector<int> TaskSampler::random_symbols(std::size_t n) {
  std::uniform_int_distribution<int> pick(kFirstSymbol, kFirstSymbol + static_cast<int>(cfg_.alphabet) - 1);
  std::vector<int> out(n);
  for (auto& t : out) t = pick(rng_);
  return out;
}

Batch TaskSampler::next() {
  Batch batch;
  const std::size_t len = cfg_.sequence_length();
  for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
    std::vector<int> seq;
    std::vector<std::uint8_t> mask(len - 1, 0);
    switch (cfg_.kind) {
      case TaskKind::Copy: {
        const auto sym = random_symbols(cfg_.segment);
        seq.push_back(kBosToken);
        seq.insert(seq.end(), sym.begin(), sym.end());
        seq.push_back(kSepToken);
        seq.insert(seq.end(), sym.begin(), sym.end());
        for (std::size_t t = cfg_.segment + 1; t + 1 < len; ++t) mask[t] = 1;
        break;
      }
      case TaskKind::Induction: {
        seq = random_symbols(cfg_.noise);
        const auto seg = random_symbols(cfg_.segment);
        seq.insert(seq.end(), seg.begin(), seg.end());
        seq.insert(seq.end(), seg.begin(), seg.end());
        for (std::size_t t = cfg_.noise + cfg_.segment; t + 1 < len; ++t) mask[t] = 1;
        break;
      }
      case TaskKind::CharCorpus: {
        std::uniform_int_distribution<std::size_t> start(0, kCorpus.size() - len);
        seq = encode_chars(kCorpus.substr(start(rng_), len));
        std::fill(mask.begin(), mask.end(), 1);
        break;
      }
    }
    batch.tokens.push_back(std::move(seq));
    batch.mask.push_back(std::move(mask));
  }
  return batch;
}

}  // namespace kvshare
