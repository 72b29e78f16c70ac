#include "msf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "msf/atomic_file.hpp"
#include "msf/errors.hpp"

namespace msf {

namespace {

constexpr const char* kFormat = "msf-checkpoint-1";

std::string blob_path(const std::string& manifest_path) {
  return std::filesystem::path(manifest_path).replace_extension(".bin").string();
}

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap64(v);
  return v;
}

nlohmann::json read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  try {
    nlohmann::json j = nlohmann::json::parse(is);
    if (j.value("format", "") != kFormat) throw ParseError(path + ": unsupported checkpoint format");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

CheckpointInfo info_from(const nlohmann::json& j) {
  CheckpointInfo info;
  info.model_config = j.at("model_config");
  info.seed = j.at("seed").get<std::uint64_t>();
  info.epoch = j.at("epoch").get<std::size_t>();
  info.val_mae = j.at("val_mae").get<double>();
  info.extra = j.value("extra", nlohmann::json::object());
  return info;
}

}  // namespace

void save_checkpoint(const std::string& manifest_path, const ParameterStore& params,
                     const CheckpointInfo& info) {
  const std::string blob = blob_path(manifest_path);
  nlohmann::json entries = nlohmann::json::array();
  std::string bytes;
  bytes.reserve(params.scalar_count() * 8);
  std::size_t offset = 0;
  for (const Parameter& p : params) {
    entries.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
    for (double v : p.value.storage()) {
      const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
      char buf[8];
      std::memcpy(buf, &bits, 8);
      bytes.append(buf, 8);
    }
    offset += p.value.size();
  }
  nlohmann::json manifest{{"format", kFormat},
                          {"blob", std::filesystem::path(blob).filename().string()},
                          {"scalars", offset},
                          {"parameters", entries},
                          {"model_config", info.model_config},
                          {"seed", info.seed},
                          {"epoch", info.epoch},
                          {"val_mae", info.val_mae},
                          {"extra", info.extra}};
  write_file_atomic(blob, bytes);
  write_file_atomic(manifest_path, manifest.dump(2) + "\n");
}

CheckpointInfo read_checkpoint_info(const std::string& manifest_path) {
  return info_from(read_manifest(manifest_path));
}

CheckpointInfo load_checkpoint(const std::string& manifest_path, ParameterStore& params) {
  const nlohmann::json j = read_manifest(manifest_path);
  const auto blob_file =
      (std::filesystem::path(manifest_path).parent_path() / j.at("blob").get<std::string>()).string();
  std::ifstream is(blob_file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + blob_file);
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string bytes = ss.str();
  const auto scalars = j.at("scalars").get<std::size_t>();
  if (bytes.size() != scalars * 8) throw ParseError(blob_file + ": blob size does not match manifest");

  const auto& entries = j.at("parameters");
  if (entries.size() != params.size()) {
    throw ParseError(manifest_path + ": checkpoint has " + std::to_string(entries.size()) +
                     " parameters, model has " + std::to_string(params.size()));
  }
  std::size_t idx = 0;
  for (Parameter& p : params) {
    const auto& e = entries[idx++];
    if (e.at("name").get<std::string>() != p.name ||
        e.at("shape").get<std::vector<std::size_t>>() != p.value.shape()) {
      throw ParseError(manifest_path + ": parameter " + p.name + " missing or reshaped");
    }
    const auto offset = e.at("offset").get<std::size_t>();
    if (offset + p.value.size() > scalars) throw ParseError(manifest_path + ": offset out of range");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + (offset + i) * 8, 8);
      p.value[i] = std::bit_cast<double>(to_little(bits));
    }
  }
  return info_from(j);
}

}  // namespace msf
