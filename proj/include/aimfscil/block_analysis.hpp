#pragma once

// Block-importance frequencies from AIM weights, and export of block-level
// embeddings for external low-dimensional visualisation.

#include "aimfscil/features.hpp"
#include "aimfscil/head.hpp"

#include <span>
#include <variant>

namespace aimfscil {

struct FrequencyHistogram {
  std::vector<long long> counts;  // index 0 = block 1
  long long n_images = 0;
  std::string class_label;
  std::string rule = "argmax per channel; runner-up also counted if > 0.5 * max; ties -> lowest block";

  long long total() const { return std::accumulate(counts.begin(), counts.end(), 0LL); }
};

// For every image and channel: count the block with the largest weight, and
// the block with the second largest weight when it is strictly greater than
// half of the largest. Ties resolve to the lowest block index.
inline FrequencyHistogram block_importance(std::span<const Matrix> weights_per_image, std::string class_label = {}) {
  require(!weights_per_image.empty(), ErrorKind::usage, "block_importance needs at least one weight matrix");
  const Eigen::Index n = weights_per_image.front().rows();
  const Eigen::Index d = weights_per_image.front().cols();
  require(n >= 1 && d >= 1, ErrorKind::usage, "weight matrices must be non-empty");
  FrequencyHistogram h;
  h.counts.assign(static_cast<std::size_t>(n), 0);
  h.class_label = std::move(class_label);
  for (const auto& w : weights_per_image) {
    require(w.rows() == n && w.cols() == d, ErrorKind::usage, "weight matrix is ", w.rows(), "x", w.cols(),
            ", expected ", n, "x", d);
    for (Eigen::Index c = 0; c < d; ++c) {
      Eigen::Index first = 0;
      for (Eigen::Index i = 1; i < n; ++i)
        if (w(i, c) > w(first, c)) first = i;
      ++h.counts[static_cast<std::size_t>(first)];
      if (n < 2) continue;
      Eigen::Index second = first == 0 ? 1 : 0;
      for (Eigen::Index i = 0; i < n; ++i)
        if (i != first && w(i, c) > w(second, c)) second = i;
      if (w(second, c) > 0.5 * w(first, c)) ++h.counts[static_cast<std::size_t>(second)];
    }
    ++h.n_images;
  }
  return h;
}

inline json to_json(const FrequencyHistogram& h) {
  json counts = json::object();
  for (std::size_t i = 0; i < h.counts.size(); ++i) counts[std::to_string(i + 1)] = h.counts[i];
  return {{"class_label", h.class_label}, {"n_images", h.n_images}, {"rule", h.rule},
          {"counts", counts},             {"total", h.total()}};
}

// "block,count,normalized" with counts divided by the histogram total.
inline std::string histogram_csv(const FrequencyHistogram& h) {
  std::ostringstream oss;
  oss << "block,count,normalized\n";
  const double total = static_cast<double>(std::max(1LL, h.total()));
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    oss << i + 1 << ',' << h.counts[i] << ',' << std::fixed << std::setprecision(6)
        << static_cast<double>(h.counts[i]) / total << '\n';
  return oss.str();
}

// ---------------------------------------------------------------------------
// Embedding export

struct BlockSelector {
  enum class Kind { low, full, custom };
  Kind kind = Kind::low;
  int low_blocks = 2;
  std::vector<int> blocks;  // 1-based, custom only

  static BlockSelector low(int k = 2) { return {Kind::low, k, {}}; }
  static BlockSelector full() { return {Kind::full, 0, {}}; }
  static BlockSelector custom(std::vector<int> b) { return {Kind::custom, 0, std::move(b)}; }

  // 1-based indices for a backbone with n blocks.
  std::vector<int> resolve(int n) const {
    std::vector<int> out;
    switch (kind) {
      case Kind::low:
        require(low_blocks >= 1 && low_blocks <= n, ErrorKind::validation, "low-level selector needs 1..", n,
                " blocks, got ", low_blocks);
        for (int i = 1; i <= low_blocks; ++i) out.push_back(i);
        break;
      case Kind::full:
        for (int i = 1; i <= n; ++i) out.push_back(i);
        break;
      case Kind::custom:
        require(!blocks.empty(), ErrorKind::validation, "custom block selector is empty");
        for (int b : blocks) {
          require(b >= 1 && b <= n, ErrorKind::validation, "block index ", b, " outside 1..", n);
          out.push_back(b);
        }
        break;
    }
    return out;
  }

  std::string describe() const {
    switch (kind) {
      case Kind::low: return "low:" + std::to_string(low_blocks);
      case Kind::full: return "full";
      case Kind::custom: {
        std::string s = "custom:";
        for (std::size_t i = 0; i < blocks.size(); ++i) s += (i ? "," : "") + std::to_string(blocks[i]);
        return s;
      }
    }
    return "";
  }
};

// Parses "low", "low:3", "full" or "custom:1,5,9" (or a bare "1,5,9").
inline BlockSelector parse_block_selector(std::string_view text) {
  if (text == "low") return BlockSelector::low();
  if (text == "full") return BlockSelector::full();
  auto ints = [&](std::string_view list) {
    std::vector<int> out;
    std::string item;
    std::istringstream in{std::string(list)};
    while (std::getline(in, item, ',')) {
      try {
        std::size_t used = 0;
        out.push_back(std::stoi(item, &used));
        require(used == item.size(), ErrorKind::validation, "bad block index '", item, "'");
      } catch (const std::logic_error&) {
        fail(ErrorKind::validation, "bad block index '", item, "'");
      }
    }
    return out;
  };
  if (text.starts_with("low:")) {
    const auto v = ints(text.substr(4));
    require(v.size() == 1, ErrorKind::validation, "low selector takes one block count");
    return BlockSelector::low(v.front());
  }
  if (text.starts_with("custom:")) return BlockSelector::custom(ints(text.substr(7)));
  return BlockSelector::custom(ints(text));
}

struct EmbeddingRow {
  std::string image_id;
  std::string class_label;
  Vector vector;
};

// Mean of the selected blocks' projected (f1) tokens.
inline Vector block_level_embedding(const Matrix& tokens, const HeadParams& params, const BlockSelector& selector) {
  const Matrix projected = project_tokens(tokens, params);
  Vector sum = Vector::Zero(projected.cols());
  const auto blocks = selector.resolve(static_cast<int>(projected.rows()));
  for (int b : blocks) sum += projected.row(b - 1).transpose();
  return sum / static_cast<double>(blocks.size());
}

inline std::vector<EmbeddingRow> export_embeddings(const std::vector<ImageRecord>& images,
                                                   const FeatureSource& features, const HeadParams& params,
                                                   const BlockSelector& selector) {
  std::vector<EmbeddingRow> rows;
  for (const auto& r : images)
    rows.push_back({r.image_id, r.class_label, block_level_embedding(features.stack(r.image_id).tokens, params, selector)});
  return rows;
}

// Embedding table as binary arrays + sidecar (row order = `rows` order).
inline void write_embedding_table(const fs::path& stem, const std::vector<EmbeddingRow>& rows,
                                  const BlockSelector& selector) {
  require(!rows.empty(), ErrorKind::usage, "no embeddings to write");
  Matrix table(static_cast<Eigen::Index>(rows.size()), rows.front().vector.size());
  json ids = json::array(), labels = json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    table.row(static_cast<Eigen::Index>(i)) = rows[i].vector.transpose();
    ids.push_back(rows[i].image_id);
    labels.push_back(rows[i].class_label);
  }
  ArrayBundle bundle;
  bundle.arrays.push_back({"embeddings", std::move(table)});
  bundle.attributes = {{"kind", "embedding-table"}, {"selector", selector.describe()}, {"image_ids", ids},
                       {"class_labels", labels}};
  write_bundle(stem, bundle);
}

}  // namespace aimfscil
