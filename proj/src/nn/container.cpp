#include "skinlab/nn/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "skinlab/error.hpp"

namespace skinlab::nn {

namespace {

constexpr char kMagic[8] = {'S', 'K', 'L', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "container payloads are little-endian");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw Error(ErrorCode::IoFailure, "truncated checkpoint container");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::string encode_container(const Container& c) {
  nlohmann::json header = c.header;
  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * sizeof(float);
  }
  header["tensors"] = std::move(index);
  const std::string text = header.dump();

  std::string out;
  out.reserve(8 + 4 + 8 + text.size() + offset);
  out.append(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, t] : c.tensors)
    out.append(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(float));
  return out;
}

Container decode_container(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorCode::IoFailure, "not a checkpoint container (bad magic)");
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kContainerVersion)
    throw Error(ErrorCode::IoFailure, "unsupported container version " + std::to_string(version));
  const auto header_len = take<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw Error(ErrorCode::IoFailure, "truncated checkpoint header");
  Container c;
  try {
    c.header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IoFailure, std::string("corrupt checkpoint header: ") + e.what());
  }
  pos += header_len;
  const std::size_t payload = pos;
  for (const auto& entry : c.header.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<int>>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t count = shape_numel(shape);
    if (payload + offset + count * sizeof(float) > bytes.size())
      throw Error(ErrorCode::IoFailure, "truncated tensor payload for " + entry.at("name").get<std::string>());
    std::vector<float> data(count);
    std::memcpy(data.data(), bytes.data() + payload + offset, count * sizeof(float));
    c.tensors.emplace(entry.at("name").get<std::string>(), Tensor(shape, std::move(data)));
  }
  c.header.erase("tensors");
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const std::string bytes = encode_container(c);
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoFailure, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot rename checkpoint into place: " + ec.message());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_container(ss.str());
}

std::map<std::string, Tensor> export_weights(Layer& layer, const std::string& prefix) {
  std::map<std::string, Tensor> out;
  for (const auto& nt : named_tensors(layer, prefix)) out.emplace(nt.name, *nt.tensor);
  return out;
}

void import_weights(Layer& layer, const std::map<std::string, Tensor>& weights, const std::string& prefix) {
  for (const auto& nt : named_tensors(layer, prefix)) {
    auto it = weights.find(nt.name);
    if (it == weights.end()) throw Error(ErrorCode::WeightsUnavailable, "missing tensor " + nt.name);
    if (it->second.shape() != nt.tensor->shape())
      throw Error(ErrorCode::ShapeMismatch, "tensor " + nt.name + " has shape " + it->second.shape_string() +
                                                ", expected " + nt.tensor->shape_string());
    *nt.tensor = it->second;
  }
}

}  // namespace skinlab::nn
