#pragma once

// On-disk cache of block-token stacks:
//   <root>/<weights_id>/<preprocess_id>/<image_id>.bin + .meta
// Keys are namespaced by weights and preprocessing so a backbone swap never
// aliases an older entry. Entries are written with rename-into-place.

#include "aimfscil/array_bundle.hpp"
#include "aimfscil/backbone.hpp"
#include "aimfscil/log.hpp"

#include <chrono>
#include <ctime>
#include <optional>

namespace aimfscil {

struct CacheKey {
  std::string image_id;
  std::string weights_id;
  std::string preprocess_id;

  friend bool operator==(const CacheKey&, const CacheKey&) = default;
};

struct FeatureCacheEntry {
  CacheKey key;
  BlockTokenStack value;
  std::string created_at;
};

enum class CacheStatus { hit, miss, corrupt };

struct CacheLookup {
  CacheStatus status = CacheStatus::miss;
  std::optional<BlockTokenStack> value;
};

namespace detail {

// Keeps [A-Za-z0-9_-] and non-leading dots; everything else becomes %XX.
inline std::string encode_path_component(std::string_view text) {
  require(!text.empty(), ErrorKind::usage, "empty cache key component");
  static constexpr char hex[] = "0123456789ABCDEF";
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    const bool keep = std::isalnum(c) || c == '_' || c == '-' || (c == '.' && i > 0);
    if (keep) {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 0xf];
    }
  }
  return out;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

class FeatureCache {
 public:
  explicit FeatureCache(fs::path root) : root_(std::move(root)) {}

  const fs::path& root() const { return root_; }

  fs::path stem_for(const CacheKey& key) const {
    return root_ / detail::encode_path_component(key.weights_id) / detail::encode_path_component(key.preprocess_id) /
           detail::encode_path_component(key.image_id);
  }

  CacheLookup lookup(const CacheKey& key) const {
    const fs::path stem = stem_for(key);
    if (!bundle_exists(stem)) return {};
    try {
      ArrayBundle bundle = read_bundle(stem);
      const json& a = bundle.attributes;
      require(a.value("image_id", "") == key.image_id && a.value("weights_id", "") == key.weights_id &&
                  a.value("preprocess_id", "") == key.preprocess_id,
              ErrorKind::corruption, "cache entry ", stem, " does not belong to its key");
      BlockTokenStack stack{key.image_id, a.value("backbone", ""), key.weights_id, bundle.at("tokens")};
      return {CacheStatus::hit, std::move(stack)};
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::corruption && e.kind() != ErrorKind::validation && e.kind() != ErrorKind::storage)
        throw;
      log_warning(std::string("ignoring cache entry: ") + e.what());
      return {CacheStatus::corrupt, std::nullopt};
    }
  }

  std::optional<BlockTokenStack> get(const CacheKey& key) const { return lookup(key).value; }

  void put(const FeatureCacheEntry& entry) const {
    const auto& [key, value, created_at] = entry;
    require(value.image_id.empty() || value.image_id == key.image_id, ErrorKind::usage,
            "stack image_id does not match cache key");
    require(value.weights_id == key.weights_id, ErrorKind::usage, "stack weights_id does not match cache key");
    ArrayBundle bundle;
    bundle.arrays.push_back({"tokens", value.tokens});
    bundle.attributes = {{"image_id", key.image_id},
                         {"weights_id", key.weights_id},
                         {"preprocess_id", key.preprocess_id},
                         {"backbone", value.backbone},
                         {"created_at", created_at.empty() ? detail::utc_timestamp() : created_at}};
    write_bundle(stem_for(key), bundle);
  }

  void put(const CacheKey& key, const BlockTokenStack& value) const { put({key, value, {}}); }

 private:
  fs::path root_;
};

inline CacheKey cache_key(const std::string& image_id, const BackboneSpec& spec) {
  return {image_id, spec.weights_id, spec.preprocess.id};
}

}  // namespace aimfscil
