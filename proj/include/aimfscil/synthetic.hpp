#pragma once

// Synthetic attribution corpora: every class is a flat colour with per-pixel
// jitter, written as PNG files next to a dataset manifest and a session
// manifest. Paired with the stub-gauss backbone this gives well-separated
// feature clusters without any pretrained weights.

#include "aimfscil/session.hpp"

#include <opencv2/imgcodecs.hpp>

namespace aimfscil {

struct SyntheticOptions {
  int image_size = 16;
  int train_per_base_class = 24;
  int support_per_novel_class = 8;  // pool the K shots are drawn from
  int test_per_class = 10;
  int jitter = 3;  // +/- levels of uniform per-pixel noise
  std::uint64_t seed = 0;
};

// Distinct colours on a 4x4x4 grid over [40, 215], visited in a fixed
// scrambled order so consecutive classes are not neighbours.
inline std::array<int, 3> synthetic_class_colour(std::size_t k) {
  require(k < 64, ErrorKind::usage, "synthetic corpora support at most 64 classes");
  const std::size_t cell = (k * 37 + 11) % 64;
  const auto level = [](std::size_t v) { return 40 + static_cast<int>(v) * 175 / 3; };
  return {level(cell % 4), level((cell / 4) % 4), level(cell / 16)};
}

struct SyntheticCorpus {
  Dataset dataset;
  SessionManifest manifest;
  fs::path dataset_path;
  fs::path manifest_path;
};

inline SyntheticCorpus generate_synthetic_corpus(const fs::path& dir, const SessionManifest& schedule,
                                                 const SyntheticOptions& opt) {
  require(opt.image_size >= 1 && opt.test_per_class >= 1 && opt.train_per_base_class >= 1, ErrorKind::usage,
          "synthetic corpus sizes must be >= 1");
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  require(!ec, ErrorKind::storage, "cannot create ", dir / "images", ": ", ec.message());

  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<int> jitter(-opt.jitter, opt.jitter);
  std::vector<ImageRecord> records;
  std::size_t class_index = 0;
  for (const auto& s : schedule.sessions) {
    for (const auto& c : s.classes) {
      const auto colour = synthetic_class_colour(class_index++);
      const int pool = s.is_base() ? opt.train_per_base_class : std::max(opt.support_per_novel_class, s.shot.value_or(1));
      auto emit = [&](Split split, int count) {
        for (int i = 0; i < count; ++i) {
          cv::Mat img(opt.image_size, opt.image_size, CV_8UC3);
          for (int y = 0; y < img.rows; ++y)
            for (int x = 0; x < img.cols; ++x)
              for (int ch = 0; ch < 3; ++ch)  // OpenCV stores BGR
                img.at<cv::Vec3b>(y, x)[2 - ch] = cv::saturate_cast<uchar>(colour[ch] + jitter(rng));
          std::string id = "s" + std::to_string(s.id) + "c" + std::to_string(class_index - 1) + "-" +
                           to_string(split) + "-" + std::to_string(i);
          const fs::path rel = fs::path("images") / (id + ".png");
          require(cv::imwrite((dir / rel).string(), img), ErrorKind::storage, "cannot write ", dir / rel);
          records.push_back({std::move(id), dir / rel, c.label, s.id, split});
        }
      };
      emit(s.is_base() ? Split::train : Split::support, pool);
      emit(Split::test, opt.test_per_class);
    }
  }
  SyntheticCorpus corpus;
  corpus.dataset = Dataset(std::move(records));
  corpus.dataset_path = dir / "dataset.jsonl";
  write_dataset(corpus.dataset_path, corpus.dataset);
  corpus.manifest = fill_manifest(schedule, corpus.dataset, opt.seed);
  corpus.manifest_path = dir / "manifest.json";
  json j = to_json(corpus.manifest);
  j["dataset"] = "dataset.jsonl";
  detail::atomic_write(corpus.manifest_path, j.dump(2) + "\n");
  return corpus;
}

}  // namespace aimfscil
