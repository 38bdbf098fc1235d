#pragma once

#include "aimfscil/backbone.hpp"
#include "aimfscil/dataset.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace aimfscil {

// Decodes to an 8-bit RGB image. Only three-channel images are accepted.
inline cv::Mat decode_rgb(const fs::path& path) {
  require(fs::exists(path), ErrorKind::decode, "cannot decode ", path, ": file does not exist");
  cv::Mat raw;
  try {
    raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    fail(ErrorKind::decode, "cannot decode ", path, ": ", e.what());
  }
  require(!raw.empty(), ErrorKind::decode, "cannot decode ", path, ": not a readable image");
  require(raw.channels() == 3, ErrorKind::format, "image ", path, " has ", raw.channels(),
          " channel(s); expected 3 (RGB)");
  cv::Mat bgr8;
  switch (raw.depth()) {
    case CV_8U: bgr8 = raw; break;
    case CV_16U: raw.convertTo(bgr8, CV_8U, 255.0 / 65535.0); break;
    default: fail(ErrorKind::format, "image ", path, " has unsupported sample depth");
  }
  cv::Mat rgb;
  cv::cvtColor(bgr8, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

// Shortest side to `recipe.resolution` (cubic when enlarging, area when
// shrinking), centre crop to a square, scale to [0,1], then (x - mean) / std.
inline PreprocessedImage preprocess_rgb(const cv::Mat& rgb, const PreprocessRecipe& recipe) {
  require(rgb.type() == CV_8UC3, ErrorKind::format, "expected 8-bit RGB image");
  const int r = recipe.resolution;
  cv::Mat resized = rgb;
  const int h = rgb.rows, w = rgb.cols;
  if (std::min(h, w) != r) {
    const int new_h = h <= w ? r : static_cast<int>(static_cast<long long>(r) * h / w);
    const int new_w = h <= w ? static_cast<int>(static_cast<long long>(r) * w / h) : r;
    const int interp = std::min(h, w) > r ? cv::INTER_AREA : cv::INTER_CUBIC;
    cv::resize(rgb, resized, cv::Size(new_w, new_h), 0, 0, interp);
  }
  const int top = static_cast<int>(std::lround((resized.rows - r) / 2.0));
  const int left = static_cast<int>(std::lround((resized.cols - r) / 2.0));
  const cv::Mat crop = resized(cv::Rect(left, top, r, r));

  PreprocessedImage out{r, r, recipe.id, std::vector<float>(static_cast<std::size_t>(r) * r * 3)};
  for (int y = 0; y < r; ++y) {
    const auto* row = crop.ptr<cv::Vec3b>(y);
    for (int x = 0; x < r; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = (static_cast<float>(row[x][c]) / 255.0f - recipe.mean[c]) / recipe.stddev[c];
  }
  return out;
}

inline PreprocessedImage preprocess_image(const ImageRecord& record, const BackboneSpec& spec) {
  return preprocess_rgb(decode_rgb(record.path), spec.preprocess);
}

}  // namespace aimfscil
