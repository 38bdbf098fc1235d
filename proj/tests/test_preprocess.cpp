#include "test_support.hpp"

#include <fstream>
#include <opencv2/imgcodecs.hpp>

using namespace aimfscil;
using aimfscil::testing::TempDir;

namespace {

fs::path write_png(const fs::path& path, const cv::Mat& bgr) {
  EXPECT_TRUE(cv::imwrite(path.string(), bgr));
  return path;
}

ImageRecord record_for(const fs::path& path) { return {"img", path, "A", 1, Split::test}; }

BackboneSpec spec_with(const PreprocessRecipe& recipe) { return {"stub", 1, 1, recipe, "w"}; }

}  // namespace

TEST(Preprocess, ClipL14RecipeIs224) {
  // The published ViT-L/14 image processor resizes the shortest edge to 224 and centre-crops 224x224.
  TempDir dir;
  cv::Mat img(300, 400, CV_8UC3);
  cv::randu(img, 0, 255);
  const auto out = preprocess_image(record_for(write_png(dir / "a.png", img)), spec_with(clip_recipe(224)));
  EXPECT_EQ(out.height, 224);
  EXPECT_EQ(out.width, 224);
  EXPECT_EQ(out.pixels.size(), 224u * 224u * 3u);
  EXPECT_EQ(out.recipe_id, "clip-224");
}

TEST(Preprocess, SolidGrayIsAffineNormalized) {
  TempDir dir;
  const int v = 128;
  const auto path = write_png(dir / "g.png", cv::Mat(224, 224, CV_8UC3, cv::Scalar(v, v, v)));
  const PreprocessRecipe recipe = clip_recipe(224);
  const auto out = preprocess_image(record_for(path), spec_with(recipe));
  for (int c = 0; c < 3; ++c) {
    const float expected = (static_cast<float>(v) / 255.0f - recipe.mean[c]) / recipe.stddev[c];
    for (int y : {0, 100, 223})
      for (int x : {0, 57, 223}) EXPECT_FLOAT_EQ(out.at(y, x, c), expected);
  }
}

TEST(Preprocess, ChannelOrderIsRgb) {
  TempDir dir;
  // OpenCV writes BGR; pure red in RGB terms.
  const auto path = write_png(dir / "r.png", cv::Mat(4, 4, CV_8UC3, cv::Scalar(0, 0, 255)));
  const auto out = preprocess_image(record_for(path), spec_with(stub_recipe(4)));
  EXPECT_FLOAT_EQ(out.at(0, 0, 0), 1.0f);
  EXPECT_FLOAT_EQ(out.at(0, 0, 1), -1.0f);
  EXPECT_FLOAT_EQ(out.at(0, 0, 2), -1.0f);
}

TEST(Preprocess, CentreCropOfWideImage) {
  TempDir dir;
  cv::Mat img(4, 8, CV_8UC3, cv::Scalar(0, 0, 0));
  img.colRange(2, 6).setTo(cv::Scalar(255, 255, 255));
  const auto out = preprocess_image(record_for(write_png(dir / "w.png", img)), spec_with(stub_recipe(4)));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_FLOAT_EQ(out.at(y, x, 0), 1.0f);
}

TEST(Preprocess, SameFileTwiceIsBitIdentical) {
  TempDir dir;
  cv::Mat img(97, 131, CV_8UC3);
  cv::randu(img, 0, 255);
  const auto path = write_png(dir / "a.png", img);
  EXPECT_EQ(preprocess_image(record_for(path), spec_with(clip_recipe(224))),
            preprocess_image(record_for(path), spec_with(clip_recipe(224))));
}

TEST(Preprocess, CorruptFileIsDecodeErrorNamingPath) {
  TempDir dir;
  std::ofstream(dir / "bad.png") << "definitely not a png";
  try {
    preprocess_image(record_for(dir / "bad.png"), spec_with(stub_recipe()));
    FAIL() << "expected decode error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::decode);
    EXPECT_NE(std::string(e.what()).find("bad.png"), std::string::npos);
  }
  EXPECT_ERROR_KIND(preprocess_image(record_for(dir / "missing.png"), spec_with(stub_recipe())), ErrorKind::decode);
}

TEST(Preprocess, WrongChannelCountIsFormatError) {
  TempDir dir;
  const auto gray = write_png(dir / "g.png", cv::Mat(8, 8, CV_8UC1, cv::Scalar(3)));
  EXPECT_ERROR_KIND(preprocess_image(record_for(gray), spec_with(stub_recipe())), ErrorKind::format);
  const auto rgba = write_png(dir / "a.png", cv::Mat(8, 8, CV_8UC4, cv::Scalar(1, 2, 3, 4)));
  EXPECT_ERROR_KIND(preprocess_image(record_for(rgba), spec_with(stub_recipe())), ErrorKind::format);
}

TEST(Preprocess, SixteenBitInputIsScaledTo8Bit) {
  TempDir dir;
  const auto path = write_png(dir / "d.png", cv::Mat(4, 4, CV_16UC3, cv::Scalar(65535, 65535, 65535)));
  const auto out = preprocess_image(record_for(path), spec_with(stub_recipe(4)));
  EXPECT_FLOAT_EQ(out.at(1, 1, 1), 1.0f);
}
