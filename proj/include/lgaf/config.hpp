#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "lgaf/degradation.hpp"
#include "lgaf/model.hpp"
#include "lgaf/train_eval.hpp"

namespace lgaf {

/// Everything a run needs, read from one flat TOML file. Keys (all optional):
///
///   seed, fusion_mode, workers, out_dir
///   input_height, input_width, channel_widths, blocks_per_stage, backbone_batch_norm
///   scales, heads, embedding_dim, lanet_reduction, se_reduction, scale_channels, head_batch_norm
///   gfe_batch_norm, lgf_h, lgf_alpha, lgf_eps
///   margin_kind, margin_scale, margin_m
///   lr, momentum, weight_decay, epochs, schedule, batch_size
///   aug_probability, aug_max_crop_area, aug_jitter, aug_min_rescale
///   data_manifest, data_ids, data_per_id, data_seed
///
/// data_manifest names a CSV (path,identity) of PPM images; when it is empty a
/// synthetic set of data_ids x data_per_id images is generated from data_seed.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  std::string data_manifest;
  int data_ids = 20;
  int data_per_id = 50;
  std::uint64_t data_seed = 1;

  void validate() const;
};

/// Raised for unreadable files, unknown keys and ill-typed values. The message
/// names the file and the key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig parse_run_config(const std::string& toml_text, const std::string& source = "<string>");
RunConfig load_run_config(const std::filesystem::path& path);

/// Every key with its resolved value, in the same flat schema.
std::string to_toml(const RunConfig& config);

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace lgaf
