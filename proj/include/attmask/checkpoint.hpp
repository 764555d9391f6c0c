#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "attmask/config.hpp"
#include "attmask/distill.hpp"

namespace attmask {

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kParamsFile = "params.bin";

/// The parts of a manifest needed before the state itself is loaded.
struct CheckpointInfo {
  std::uint64_t config_hash = 0;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  Precision precision = Precision::Float32;
  std::string config_json;
};

/// Writes manifest.json and params.bin into `dir` (created if needed). The
/// blob holds, little-endian in the run's float width: student tensors,
/// teacher tensors, AdamW first moments, second moments, then the [CLS] and
/// patch centers; each group in lexicographic parameter-name order.
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const TrainState<T>& state,
                     const RunConfig& config, std::int64_t epoch);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

/// Restores a state saved by save_checkpoint. Throws StateError when the
/// checkpoint was written under a config with a different hash (training
/// arithmetic would differ) or another float width, and FormatError when the
/// files disagree with their manifest.
template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& dir, const RunConfig& config);

}  // namespace attmask
