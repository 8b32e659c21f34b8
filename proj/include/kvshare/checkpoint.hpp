// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <istream>
#include <ostream>

#include "kvshare/model.hpp"

namespace kvshare {

/// Checkpoint container, all integers and floats little-endian:
///
///   "KVSHCKPT"            8 bytes magic
///   u32 version           currently 1
///   u32 meta_len, bytes   ModelConfig::to_key_values() text
///   u32 count
///   count x { u32 name_len, name bytes, u32 rank, rank x u64 dims, prod(dims) x f64 }
///
/// Tensors appear in Model::params() order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(std::ostream& os, const Model& model);
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(std::istream& is);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace kvshare
