#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "msf/autodiff.hpp"

namespace msf {

/// Metadata stored next to the parameter values.
struct CheckpointInfo {
  nlohmann::json model_config;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  double val_mae = 0.0;
  /// Free-form context, e.g. the resolved experiment configuration.
  nlohmann::json extra = nlohmann::json::object();
};

// A checkpoint is a JSON manifest at `manifest_path` plus a blob of
// little-endian doubles at the same path with the extension replaced by
// ".bin", holding every parameter in manifest order.
void save_checkpoint(const std::string& manifest_path, const ParameterStore& params,
                     const CheckpointInfo& info);

/// Reads the manifest and copies the stored values into `params`. Names and
/// shapes must match exactly; throws ParseError otherwise.
CheckpointInfo load_checkpoint(const std::string& manifest_path, ParameterStore& params);

/// Reads only the manifest metadata.
CheckpointInfo read_checkpoint_info(const std::string& manifest_path);

}  // namespace msf
