#pragma once

#include "aimfscil/array_bundle.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace aimfscil {

enum class Split { train, support, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::support: return "support";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "support") return Split::support;
  if (text == "test") return Split::test;
  fail(ErrorKind::validation, "unknown split '", text, "' (expected train, support or test)");
}

struct ImageRecord {
  std::string image_id;
  fs::path path;
  std::string class_label;
  int session_id = 1;
  Split split = Split::train;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

inline json to_json(const ImageRecord& r) {
  return {{"image_id", r.image_id},
          {"path", r.path.generic_string()},
          {"class_label", r.class_label},
          {"session_id", r.session_id},
          {"split", to_string(r.split)}};
}

inline ImageRecord record_from_json(const json& j, const fs::path& base_dir) {
  try {
    ImageRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.path = fs::path(j.at("path").get<std::string>());
    if (r.path.is_relative() && !base_dir.empty()) r.path = base_dir / r.path;
    r.class_label = j.at("class_label").get<std::string>();
    r.session_id = j.at("session_id").get<int>();
    r.split = parse_split(j.at("split").get<std::string>());
    require(!r.image_id.empty(), ErrorKind::validation, "empty image_id");
    require(r.session_id >= 1, ErrorKind::validation, "image '", r.image_id, "': session_id must be >= 1");
    return r;
  } catch (const json::exception& e) {
    fail(ErrorKind::validation, "malformed image record ", j.dump(), ": ", e.what());
  }
}

// Image records indexed by id.
class Dataset {
 public:
  Dataset() = default;

  explicit Dataset(std::vector<ImageRecord> records) : records_(std::move(records)) {
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto [it, inserted] = index_.emplace(records_[i].image_id, i);
      require(inserted, ErrorKind::validation, "duplicate image_id '", records_[i].image_id, "'");
    }
  }

  const std::vector<ImageRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool contains(const std::string& id) const { return index_.contains(id); }

  const ImageRecord& at(const std::string& id) const {
    const auto it = index_.find(id);
    require(it != index_.end(), ErrorKind::validation, "unknown image_id '", id, "'");
    return records_[it->second];
  }

 private:
  std::vector<ImageRecord> records_;
  std::map<std::string, std::size_t> index_;
};

// Accepts either a JSON array of records or JSON-lines (one record per line).
// Relative paths resolve against the manifest's directory.
inline Dataset parse_dataset(std::string_view text, const fs::path& base_dir = {}) {
  std::vector<ImageRecord> records;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string_view::npos && text[first] == '[') {
    json arr;
    try {
      arr = json::parse(text);
    } catch (const json::exception& e) {
      fail(ErrorKind::validation, "dataset manifest is not valid JSON: ", e.what());
    }
    for (const auto& j : arr) records.push_back(record_from_json(j, base_dir));
  } else {
    std::istringstream lines{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(lines, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        records.push_back(record_from_json(json::parse(line), base_dir));
      } catch (const json::exception& e) {
        fail(ErrorKind::validation, "dataset manifest line ", line_no, ": ", e.what());
      }
    }
  }
  return Dataset(std::move(records));
}

inline Dataset load_dataset(const fs::path& path) {
  require(fs::exists(path), ErrorKind::storage, "dataset manifest ", path, " does not exist");
  return parse_dataset(detail::read_file(path), path.parent_path());
}

// Writes JSON-lines; paths are stored relative to the manifest's directory when possible.
inline void write_dataset(const fs::path& path, const Dataset& dataset) {
  std::string out;
  for (auto r : dataset.records()) {
    if (path.has_parent_path()) {
      const auto rel = fs::proximate(fs::absolute(r.path), fs::absolute(path.parent_path()));
      if (!rel.empty() && *rel.begin() != "..") r.path = rel;
    }
    out += to_json(r).dump() + "\n";
  }
  detail::atomic_write(path, out);
}

}  // namespace aimfscil
