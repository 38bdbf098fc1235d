#pragma once

#include "aimfscil/array_bundle.hpp"

#include <bit>
#include <fstream>
#include <map>
#include <vector>

namespace aimfscil {

struct TensorInfo {
  std::string dtype;
  std::vector<std::int64_t> shape;
  std::size_t begin = 0;
  std::size_t end = 0;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

// Lazy reader for the safetensors container: an 8-byte little-endian header
// length, a JSON header, then the raw tensor bytes.
class SafetensorsFile {
 public:
  explicit SafetensorsFile(fs::path path) : path_(std::move(path)), in_(path_, std::ios::binary) {
    require(static_cast<bool>(in_), ErrorKind::storage, "cannot open weights file ", path_);
    std::uint64_t header_len = 0;
    in_.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    require(static_cast<bool>(in_) && header_len < (1ULL << 31), ErrorKind::corruption, "bad safetensors header in ",
            path_);
    std::string header(header_len, '\0');
    in_.read(header.data(), static_cast<std::streamsize>(header_len));
    require(static_cast<bool>(in_), ErrorKind::corruption, "truncated safetensors header in ", path_);
    data_start_ = sizeof(header_len) + header_len;
    try {
      const json parsed = json::parse(header);
      for (const auto& [name, entry] : parsed.items()) {
        if (name == "__metadata__") continue;
        TensorInfo info;
        info.dtype = entry.at("dtype").get<std::string>();
        info.shape = entry.at("shape").get<std::vector<std::int64_t>>();
        info.begin = entry.at("data_offsets").at(0).get<std::size_t>();
        info.end = entry.at("data_offsets").at(1).get<std::size_t>();
        tensors_.emplace(name, std::move(info));
      }
    } catch (const json::exception& e) {
      fail(ErrorKind::corruption, "malformed safetensors header in ", path_, ": ", e.what());
    }
  }

  const fs::path& path() const { return path_; }
  const std::map<std::string, TensorInfo>& tensors() const { return tensors_; }
  bool contains(const std::string& name) const { return tensors_.contains(name); }

  const TensorInfo& info(const std::string& name) const {
    const auto it = tensors_.find(name);
    require(it != tensors_.end(), ErrorKind::validation, "tensor '", name, "' missing from ", path_);
    return it->second;
  }

  // Reads a floating-point tensor (F32, F16 or BF16) as f32.
  std::vector<float> read_f32(const std::string& name) {
    static_assert(std::endian::native == std::endian::little);
    const TensorInfo& t = info(name);
    const std::size_t bytes = t.end - t.begin;
    std::string raw(bytes, '\0');
    in_.seekg(static_cast<std::streamoff>(data_start_ + t.begin));
    in_.read(raw.data(), static_cast<std::streamsize>(bytes));
    require(static_cast<bool>(in_), ErrorKind::corruption, "truncated tensor '", name, "' in ", path_);
    const auto n = static_cast<std::size_t>(t.numel());
    std::vector<float> out(n);
    if (t.dtype == "F32") {
      require(bytes == n * 4, ErrorKind::corruption, "size mismatch for '", name, "'");
      std::memcpy(out.data(), raw.data(), bytes);
    } else if (t.dtype == "F16" || t.dtype == "BF16") {
      require(bytes == n * 2, ErrorKind::corruption, "size mismatch for '", name, "'");
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, raw.data() + 2 * i, 2);
        out[i] = t.dtype == "BF16" ? std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16) : half_to_float(h);
      }
    } else {
      fail(ErrorKind::format, "tensor '", name, "' has unsupported dtype ", t.dtype);
    }
    return out;
  }

 private:
  static float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exponent = (h >> 10) & 0x1fu;
    std::uint32_t mantissa = h & 0x3ffu;
    std::uint32_t bits;
    if (exponent == 0) {
      if (mantissa == 0) {
        bits = sign;
      } else {
        exponent = 127 - 15 + 1;
        while ((mantissa & 0x400u) == 0) {
          mantissa <<= 1;
          --exponent;
        }
        bits = sign | (exponent << 23) | ((mantissa & 0x3ffu) << 13);
      }
    } else if (exponent == 0x1f) {
      bits = sign | 0x7f800000u | (mantissa << 13);
    } else {
      bits = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
    }
    return std::bit_cast<float>(bits);
  }

  fs::path path_;
  std::ifstream in_;
  std::size_t data_start_ = 0;
  std::map<std::string, TensorInfo> tensors_;
};

}  // namespace aimfscil
