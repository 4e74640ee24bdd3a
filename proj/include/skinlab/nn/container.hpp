#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "json.hpp"
#include "skinlab/nn/layers.hpp"

namespace skinlab::nn {

// Binary checkpoint container: 8-byte magic, u32 format version, u64 header
// length, a JSON header, then raw little-endian float32 tensor payloads. The
// header's "tensors" array lists name, shape and byte offset of each payload.
inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
};

std::string encode_container(const Container& c);
Container decode_container(std::string_view bytes);

// Writes via a temporary file and rename so readers never see a partial file.
void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// Snapshot / restore of every named tensor of a network under `prefix`.
std::map<std::string, Tensor> export_weights(Layer& layer, const std::string& prefix = "");
// Throws WeightsUnavailable when a tensor is missing and ShapeMismatch when
// shapes disagree. Extra entries in `weights` outside `prefix` are ignored.
void import_weights(Layer& layer, const std::map<std::string, Tensor>& weights, const std::string& prefix = "");

}  // namespace skinlab::nn
