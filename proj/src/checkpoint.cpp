// SPDX-License-Identifier: Apache-2.0
#include "kvshare/checkpoint.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace kvshare {

namespace {

constexpr std::array<char, 8> kMagic = {'K', 'V', 'S', 'H', 'C', 'K', 'P', 'T'};

template <typename U>
void put(std::ostream& os, U v) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes, sizeof(U));
}

template <typename U>
U get(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw std::runtime_error("checkpoint truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw std::runtime_error("checkpoint truncated");
  return s;
}

}  // namespace

void save_checkpoint(std::ostream& os, const Model& model) {
  os.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(os, kCheckpointVersion);
  put_string(os, model.config().to_key_values());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    put_string(os, p.name);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) put<std::uint64_t>(os, d);
    for (double v : p.value.data()) put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint");
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  save_checkpoint(os, model);
}

Model load_checkpoint(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw std::runtime_error("not a checkpoint file");
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  std::istringstream meta(get_string(is));
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    if (!cfg.set(line.substr(0, eq), line.substr(eq + 1))) {
      throw std::runtime_error("unknown checkpoint config key '" + line.substr(0, eq) + "'");
    }
  }
  const auto count = get<std::uint32_t>(is);
  std::vector<Parameter> params;
  params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Parameter p;
    p.name = get_string(is);
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = std::bit_cast<double>(get<std::uint64_t>(is));
    p.value = Tensor(std::move(shape), std::move(data));
    params.push_back(std::move(p));
  }
  Model model(cfg, std::move(params));
  return model;
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return load_checkpoint(is);
}

}  // namespace kvshare
