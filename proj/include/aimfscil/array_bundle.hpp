#pragma once

// Named f64 arrays stored as one little-endian row-major binary blob plus a
// JSON sidecar (`<stem>.bin` + `<stem>.meta`). Used for feature-cache entries,
// head checkpoints, prototype stores and embedding tables.

#include "aimfscil/common.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <bit>
#include <filesystem>
#include <fstream>
#include <optional>
#include <thread>
#include <unistd.h>
#include <utility>
#include <vector>

namespace aimfscil {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct NamedArray {
  std::string name;
  Matrix value;
};

struct ArrayBundle {
  std::vector<NamedArray> arrays;
  json attributes = json::object();

  const Matrix& at(std::string_view name) const {
    for (const auto& a : arrays)
      if (a.name == name) return a.value;
    fail(ErrorKind::validation, "bundle has no array named '", name, "'");
  }

  bool contains(std::string_view name) const {
    for (const auto& a : arrays)
      if (a.name == name) return true;
    return false;
  }
};

inline constexpr const char* kBundleFormat = "aimfscil-bundle/1";

namespace detail {

inline fs::path with_suffix(const fs::path& stem, const char* suffix) {
  return fs::path(stem.string() + suffix);
}

inline fs::path unique_tmp(const fs::path& target) {
  static std::atomic<std::uint64_t> counter{0};
  const auto tid = std::hash<std::thread::id>{}(std::this_thread::get_id());
  return fs::path(target.string() + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(tid) + "." +
                  std::to_string(counter++));
}

// Write to a private temporary file and rename it over the target so readers
// never observe a partially written file.
inline void atomic_write(const fs::path& target, std::string_view bytes) {
  std::error_code ec;
  if (target.has_parent_path()) {
    fs::create_directories(target.parent_path(), ec);
    require(!ec, ErrorKind::storage, "cannot create directory ", target.parent_path(), ": ", ec.message());
  }
  const fs::path tmp = unique_tmp(target);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::storage, "cannot open ", tmp, " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp, ec);
      fail(ErrorKind::storage, "write failed for ", target);
    }
  }
  fs::rename(tmp, target, ec);
  if (ec) {
    std::error_code ignored;
    fs::remove(tmp, ignored);
    fail(ErrorKind::storage, "cannot move ", tmp, " into place: ", ec.message());
  }
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::storage, "cannot open ", path);
  std::ostringstream oss;
  oss << in.rdbuf();
  return oss.str();
}

}  // namespace detail

inline void write_bundle(const fs::path& stem, const ArrayBundle& bundle) {
  static_assert(std::endian::native == std::endian::little, "bundle format is little-endian");
  std::string blob;
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& [name, value] : bundle.arrays) {
    require(value.allFinite(), ErrorKind::numeric, "array '", name, "' contains non-finite values");
    const std::size_t count = static_cast<std::size_t>(value.size());
    blob.append(reinterpret_cast<const char*>(value.data()), count * sizeof(Scalar));
    entries.push_back({{"name", name}, {"shape", {value.rows(), value.cols()}}, {"offset", offset}});
    offset += count * sizeof(Scalar);
  }
  json meta = {{"format", kBundleFormat},
               {"dtype", "f64"},
               {"layout", "row-major"},
               {"bytes", blob.size()},
               {"checksum", to_hex(Fnv1a64{}.update(blob).digest())},
               {"arrays", entries},
               {"attributes", bundle.attributes}};
  detail::atomic_write(detail::with_suffix(stem, ".bin"), blob);
  detail::atomic_write(detail::with_suffix(stem, ".meta"), meta.dump(2) + "\n");
}

inline bool bundle_exists(const fs::path& stem) {
  return fs::exists(detail::with_suffix(stem, ".meta")) && fs::exists(detail::with_suffix(stem, ".bin"));
}

// Throws ErrorKind::corruption when the blob does not match its sidecar.
inline ArrayBundle read_bundle(const fs::path& stem) {
  const fs::path meta_path = detail::with_suffix(stem, ".meta");
  const fs::path bin_path = detail::with_suffix(stem, ".bin");
  json meta;
  try {
    meta = json::parse(detail::read_file(meta_path));
  } catch (const json::exception& e) {
    fail(ErrorKind::corruption, "unreadable sidecar ", meta_path, ": ", e.what());
  }
  const std::string blob = detail::read_file(bin_path);
  try {
    require(meta.at("format") == kBundleFormat && meta.at("dtype") == "f64", ErrorKind::corruption,
            "unsupported bundle format in ", meta_path);
    require(meta.at("bytes").get<std::size_t>() == blob.size(), ErrorKind::corruption, "size mismatch for ",
            bin_path);
    require(meta.at("checksum").get<std::string>() == to_hex(Fnv1a64{}.update(blob).digest()),
            ErrorKind::corruption, "checksum mismatch for ", bin_path);
    ArrayBundle bundle;
    bundle.attributes = meta.value("attributes", json::object());
    for (const auto& entry : meta.at("arrays")) {
      const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
      const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(Scalar);
      require(rows >= 0 && cols >= 0 && offset + bytes <= blob.size(), ErrorKind::corruption,
              "array extends past end of ", bin_path);
      Matrix value(rows, cols);
      std::memcpy(value.data(), blob.data() + offset, bytes);
      bundle.arrays.push_back({entry.at("name").get<std::string>(), std::move(value)});
    }
    return bundle;
  } catch (const json::exception& e) {
    fail(ErrorKind::corruption, "malformed sidecar ", meta_path, ": ", e.what());
  }
}

}  // namespace aimfscil
