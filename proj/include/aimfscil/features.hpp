#pragma once

#include "aimfscil/dataset.hpp"
#include "aimfscil/feature_cache.hpp"
#include "aimfscil/preprocess.hpp"
#include "aimfscil/vit.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <mutex>
#include <thread>

namespace aimfscil {

// Stub ids ("stub-gauss:seed=3") need nothing else. Named CLIP encoders need a
// safetensors file: `weights` if given, otherwise
// $AIMFSCIL_WEIGHTS_DIR/<name>.safetensors.
inline std::unique_ptr<Backbone> make_backbone(std::string_view id, const fs::path& weights = {}) {
  if (is_stub_backbone(id)) return make_stub_backbone(id);
  const auto config = known_vit_config(id);
  require(config.has_value(), ErrorKind::usage, "unknown backbone '", id,
          "' (expected vit-l-14, vit-b-32, vit-b-16 or a stub-* id)");
  fs::path path = weights;
  if (path.empty()) {
    const char* dir = std::getenv("AIMFSCIL_WEIGHTS_DIR");
    require(dir != nullptr, ErrorKind::usage, "backbone '", id,
            "' needs pretrained weights: pass a safetensors path or set AIMFSCIL_WEIGHTS_DIR");
    path = fs::path(dir) / (std::string(id) + ".safetensors");
  }
  require(fs::exists(path), ErrorKind::storage, "weights file ", path, " not found for backbone '", id, "'");
  return std::make_unique<VitBackbone>(VitBackbone::load(*config, path));
}

struct SkippedImage {
  std::string image_id;
  std::string reason;
};

struct ExtractionSummary {
  std::size_t requested = 0;
  std::size_t extracted = 0;
  std::size_t cache_hits = 0;
  std::size_t corrupt_entries = 0;
  std::vector<SkippedImage> skipped;
};

inline json to_json(const ExtractionSummary& s) {
  json skipped = json::array();
  for (const auto& [id, reason] : s.skipped) skipped.push_back({{"image_id", id}, {"reason", reason}});
  return {{"requested", s.requested},
          {"extracted", s.extracted},
          {"cache_hits", s.cache_hits},
          {"corrupt_entries", s.corrupt_entries},
          {"skipped", skipped}};
}

// Preprocess + extract with an optional cache in front.
class FeatureExtractor {
 public:
  FeatureExtractor(const Backbone& backbone, std::optional<FeatureCache> cache = std::nullopt)
      : backbone_(backbone), cache_(std::move(cache)) {}

  const Backbone& backbone() const { return backbone_; }
  const std::optional<FeatureCache>& cache() const { return cache_; }

  BlockTokenStack extract(const ImageRecord& record) const {
    CacheStatus status = CacheStatus::miss;
    return extract(record, status);
  }

  BlockTokenStack extract(const ImageRecord& record, CacheStatus& status) const {
    const CacheKey key = cache_key(record.image_id, backbone_.spec());
    if (cache_) {
      CacheLookup found = cache_->lookup(key);
      status = found.status;
      if (found.value) return std::move(*found.value);
    } else {
      status = CacheStatus::miss;
    }
    BlockTokenStack stack =
        extract_block_tokens(preprocess_image(record, backbone_.spec()), backbone_, record.image_id);
    if (cache_) cache_->put(key, stack);
    return stack;
  }

  // Fills the cache for every record. Decode/format failures are skipped with
  // a warning unless `strict`, in which case the first one is rethrown.
  ExtractionSummary extract_all(const std::vector<ImageRecord>& records, bool strict, unsigned threads = 1) const {
    ExtractionSummary summary;
    summary.requested = records.size();
    std::mutex mutex;
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::vector<std::optional<SkippedImage>> skipped(records.size());

    auto worker = [&] {
      for (std::size_t i = next++; i < records.size(); i = next++) {
        {
          std::lock_guard lock(mutex);
          if (failure) return;
        }
        try {
          CacheStatus status = CacheStatus::miss;
          extract(records[i], status);
          std::lock_guard lock(mutex);
          if (status == CacheStatus::hit) {
            ++summary.cache_hits;
          } else {
            ++summary.extracted;
            if (status == CacheStatus::corrupt) ++summary.corrupt_entries;
          }
        } catch (const Error& e) {
          const bool skippable = e.kind() == ErrorKind::decode || e.kind() == ErrorKind::format;
          std::lock_guard lock(mutex);
          if (strict || !skippable) {
            if (!failure) failure = std::current_exception();
            return;
          }
          skipped[i] = SkippedImage{records[i].image_id, e.what()};
        }
      }
    };

    threads = std::max(1u, threads);
    if (threads == 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
    for (auto& s : skipped)
      if (s) {
        log_warning("skipped " + s->image_id + ": " + s->reason);
        summary.skipped.push_back(std::move(*s));
      }
    return summary;
  }

 private:
  const Backbone& backbone_;
  std::optional<FeatureCache> cache_;
};

// Source of block-token stacks by image id.
class FeatureSource {
 public:
  virtual ~FeatureSource() = default;
  virtual BlockTokenStack stack(const std::string& image_id) const = 0;
};

class MemoryFeatureSource final : public FeatureSource {
 public:
  void add(BlockTokenStack s) {
    const std::string id = s.image_id;
    stacks_.insert_or_assign(id, std::move(s));
  }

  BlockTokenStack stack(const std::string& image_id) const override {
    const auto it = stacks_.find(image_id);
    require(it != stacks_.end(), ErrorKind::validation, "no features for image '", image_id, "'");
    return it->second;
  }

  std::size_t size() const { return stacks_.size(); }

 private:
  std::map<std::string, BlockTokenStack> stacks_;
};

// Reads only from an already-populated cache.
class CachedFeatureSource final : public FeatureSource {
 public:
  CachedFeatureSource(FeatureCache cache, std::string weights_id, std::string preprocess_id)
      : cache_(std::move(cache)), weights_id_(std::move(weights_id)), preprocess_id_(std::move(preprocess_id)) {}

  BlockTokenStack stack(const std::string& image_id) const override {
    auto found = cache_.get({image_id, weights_id_, preprocess_id_});
    require(found.has_value(), ErrorKind::validation, "no cached features for image '", image_id, "' under ",
            cache_.root() / weights_id_ / preprocess_id_, "; run the `extract` command first");
    return std::move(*found);
  }

 private:
  FeatureCache cache_;
  std::string weights_id_;
  std::string preprocess_id_;
};

// Extracts on demand (through the cache when the extractor has one).
class ExtractingFeatureSource final : public FeatureSource {
 public:
  ExtractingFeatureSource(const Dataset& dataset, const FeatureExtractor& extractor)
      : dataset_(dataset), extractor_(extractor) {}

  BlockTokenStack stack(const std::string& image_id) const override {
    return extractor_.extract(dataset_.at(image_id));
  }

 private:
  const Dataset& dataset_;
  const FeatureExtractor& extractor_;
};

}  // namespace aimfscil
