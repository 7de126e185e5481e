#pragma once

// Binary checkpoint container.
//
//   8 bytes   magic "CRFMCKPT"
//   u32       format version
//   u64, n    header JSON: {"model": ModelConfig, "metadata": ...}
//   u64       slot count
//   per slot: u64 + name bytes, u32 rank, rank x u64 dims,
//             size x f64 values
//
// Integers and doubles are little-endian.

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "crossformer/model.hpp"

namespace crossformer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  nlohmann::json metadata = nlohmann::json::object();
};

// Writes to a sibling temporary file and renames it into place, so an
// interrupted save leaves the previous checkpoint intact.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);

// Throws IoError, ParseError, or ValidationError if the slots do not match
// the stored configuration's ledger.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace crossformer
