#pragma once

#include "wilke/model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace wilke {

/// One entry of the container header.
struct TensorInfo {
  std::string dtype;
  std::vector<std::int64_t> shape;
  std::uint64_t begin = 0, end = 0;
};

/// Parsed container: header entries, free-form string metadata and the raw payload.
struct TensorContainer {
  std::map<std::string, TensorInfo> tensors;
  std::map<std::string, std::string> metadata;
  std::vector<std::uint8_t> payload;

  /// Copies tensor `name` out as little-endian F32 values.
  std::vector<float> read_f32(const std::string& name) const;
};

/// Parses the container bytes: u64 LE header length, JSON header, payload.
TensorContainer parse_container(const std::vector<std::uint8_t>& bytes);
TensorContainer read_container(const std::filesystem::path& path);

struct LoadedModel {
  ModelF model;
  std::vector<std::string> missing;  // expected by the config, absent from the file
  std::vector<std::string> extra;    // present in the file, unknown to the config
};

/// Loads a model. The config comes from the container metadata unless
/// `config` is given, in which case the two must agree when both exist.
LoadedModel load_weights(const std::filesystem::path& path, std::optional<ModelConfig> config = std::nullopt);

std::vector<std::uint8_t> serialize_weights(const ModelF& model);
void save_weights(const ModelF& model, const std::filesystem::path& path);

std::map<std::string, std::string> config_to_metadata(const ModelConfig& config);
ModelConfig config_from_metadata(const std::map<std::string, std::string>& metadata);

/// FNV-1a 64 over the file bytes, hex encoded; used by run manifests.
std::string file_checksum(const std::filesystem::path& path);
std::string bytes_checksum(const std::vector<std::uint8_t>& bytes);

}  // namespace wilke
