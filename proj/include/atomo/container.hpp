#pragma once

// Binary container shared by motion files and checkpoints:
//   magic "ATMO" | version u32 LE | header_len u32 LE | header JSON | payload
// The header declares named typed arrays with byte offsets into the payload.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atomo/common.hpp"

namespace atomo::io {

inline constexpr char kMagic[4] = {'A', 'T', 'M', 'O'};
inline constexpr uint32_t kVersion = 1;

class ContainerWriter {
 public:
  explicit ContainerWriter(nlohmann::json header) : header_(std::move(header)) {
    header_["arrays"] = nlohmann::json::array();
  }

  void add_f32(const std::string& name, const float* data, std::vector<int64_t> shape) {
    add(name, "f32", data, sizeof(float), shape);
  }
  void add_f64(const std::string& name, const double* data, std::vector<int64_t> shape) {
    add(name, "f64", data, sizeof(double), shape);
  }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("container: cannot open for write: " + path);
    std::string header = header_.dump();
    uint32_t version = kVersion;
    uint32_t hlen = uint32_t(header.size());
    f.write(kMagic, 4);
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&hlen), 4);
    f.write(header.data(), std::streamsize(header.size()));
    f.write(payload_.data(), std::streamsize(payload_.size()));
    if (!f) throw IoError("container: write failed: " + path);
  }

 private:
  void add(const std::string& name, const char* dtype, const void* data, size_t elem,
           const std::vector<int64_t>& shape) {
    int64_t count = 1;
    for (int64_t s : shape) count *= s;
    size_t bytes = size_t(count) * elem;
    header_["arrays"].push_back(
        {{"name", name}, {"dtype", dtype}, {"shape", shape}, {"offset", payload_.size()}});
    size_t at = payload_.size();
    payload_.resize(at + bytes);
    std::memcpy(payload_.data() + at, data, bytes);
  }

  nlohmann::json header_;
  std::vector<char> payload_;
};

struct Container {
  nlohmann::json header;
  std::vector<char> payload;

  const nlohmann::json& array_desc(const std::string& name) const {
    for (const auto& a : header.at("arrays"))
      if (a.at("name") == name) return a;
    throw FileFormatError("container: missing array '" + name + "'");
  }

  bool has_array(const std::string& name) const {
    for (const auto& a : header.at("arrays"))
      if (a.at("name") == name) return true;
    return false;
  }

  template <typename T>
  std::vector<T> array(const std::string& name) const {
    const auto& d = array_desc(name);
    std::string dtype = d.at("dtype");
    if ((std::is_same_v<T, float> && dtype != "f32") ||
        (std::is_same_v<T, double> && dtype != "f64"))
      throw FileFormatError("container: dtype mismatch for '" + name + "'");
    int64_t count = 1;
    for (int64_t s : d.at("shape").get<std::vector<int64_t>>()) count *= s;
    size_t off = d.at("offset").get<size_t>();
    size_t bytes = size_t(count) * sizeof(T);
    if (off + bytes > payload.size())
      throw FileFormatError("container: array '" + name + "' exceeds payload");
    std::vector<T> out(static_cast<size_t>(count));
    std::memcpy(out.data(), payload.data() + off, bytes);
    return out;
  }

  std::vector<int64_t> shape(const std::string& name) const {
    return array_desc(name).at("shape").get<std::vector<int64_t>>();
  }
};

inline Container read_container(const std::string& path, const std::string& expect_type = "") {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("container: cannot open for read: " + path);
  char magic[4];
  uint32_t version = 0, hlen = 0;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&hlen), 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw FileFormatError("container: bad magic in " + path);
  if (version != kVersion)
    throw FileFormatError("container: unsupported version in " + path);
  std::string header(hlen, '\0');
  f.read(header.data(), hlen);
  if (!f) throw FileFormatError("container: truncated header in " + path);
  Container c;
  try {
    c.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FileFormatError(std::string("container: bad header JSON: ") + e.what());
  }
  c.payload.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  if (!expect_type.empty() &&
      (!c.header.contains("type") || c.header["type"] != expect_type))
    throw FileFormatError("container: expected type '" + expect_type + "' in " + path);
  return c;
}

}  // namespace atomo::io
