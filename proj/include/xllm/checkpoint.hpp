// SPDX-License-Identifier: Apache-2.0
//
// Versioned parameter checkpoints and content hashes.
//
// Layout (all integers little-endian):
//   "XLLMCKPT"             8-byte magic
//   u32 version            currently 1
//   u64 n, n bytes         JSON config of the owning module
//   u64 count              number of tensors
//   count x { u32 name_len, name, u32 rank, rank x u64 extent }
//   payload                every tensor's float64 values, in order
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <json.hpp>

#include "xllm/nn.hpp"

namespace xllm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json config;
  ParamList params;
};

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     const ParamList& params);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Loads into existing tensors. The stored config must equal `expected_config`
// (ConfigError otherwise) and names/shapes must match (CheckpointError).
void load_checkpoint_into(const std::filesystem::path& path, const nlohmann::json& expected_config,
                          const ParamList& params);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
// SHA-256 over names, shapes and little-endian values of every parameter.
std::string params_hash(const ParamList& params);

}  // namespace xllm
