#pragma once

// Versioned little-endian binary files for base models and run states.
// Layout: 8-byte magic, u32 version, payload, u64 FNV-1a digest of every
// preceding byte. See docs/formats.md.

#include "dualinc/engine.hpp"
#include "dualinc/model.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace dualinc::checkpoint {

inline constexpr std::uint32_t kModelVersion = 1;
inline constexpr std::uint32_t kStateVersion = 1;

std::vector<std::uint8_t> serialize_model(const model::ToyModel& m);
model::ToyModel deserialize_model(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> serialize_state(const engine::TrainedState& s);
engine::TrainedState deserialize_state(const std::vector<std::uint8_t>& bytes);

void save_model(const model::ToyModel& m, const std::filesystem::path& path);
model::ToyModel load_model(const std::filesystem::path& path);

void save_state(const engine::TrainedState& s, const std::filesystem::path& path);
engine::TrainedState load_state(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes through a temporary file and renames it into place.
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace dualinc::checkpoint
