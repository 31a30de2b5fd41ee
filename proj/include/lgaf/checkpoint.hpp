#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "lgaf/model.hpp"

namespace lgaf {

inline constexpr int kCheckpointFormatVersion = 1;

/// Version mismatch, missing/truncated blob or checksum failure.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointInfo {
  std::int64_t epoch = 0;
  std::uint64_t dataset_seed = 0;
  /// Free-form extras copied into the manifest (resolved run config, workers).
  nlohmann::json extra = nlohmann::json::object();
};

/// Writes <stem>.json (manifest) and <stem>.bin. Parameters are stored as
/// little-endian float32, batch-norm running statistics as little-endian
/// float64, back to back in manifest order. The manifest carries the model
/// config, the fusion statistics and the crc32 of the blob.
void save_checkpoint(Model<float>& model, const std::filesystem::path& stem, const CheckpointInfo& info = {});

struct LoadedCheckpoint {
  Model<float> model;
  nlohmann::json manifest;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& stem);

/// "<stem>.json" and "<stem>.bin" for a stem that may already carry either suffix.
std::filesystem::path checkpoint_manifest_path(const std::filesystem::path& stem);
std::filesystem::path checkpoint_blob_path(const std::filesystem::path& stem);

}  // namespace lgaf
