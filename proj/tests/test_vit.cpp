#include "test_support.hpp"

#include <fstream>

using namespace aimfscil;

namespace {

const VitConfig kTiny{"tiny-clip", 32, 8, 16, 3, 2, 32};

PreprocessedImage fixture_pixels() {
  PreprocessedImage img{32, 32, "clip-32", std::vector<float>(32 * 32 * 3)};
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(1.5 * std::sin(0.3 * y + 0.7 * x + 1.1 * c));
  return img;
}

}  // namespace

// Reference values come from the Hugging Face CLIPVisionModel (see data/make_tiny_clip.py).
TEST(Vit, ClsTokensMatchReferenceImplementation) {
  const json expected = json::parse(aimfscil::testing::slurp(aimfscil::testing::data_dir() / "tiny_clip_expected.json"));
  const VitBackbone vit = VitBackbone::load(kTiny, aimfscil::testing::data_dir() / "tiny_clip_vision.safetensors");
  const BlockTokenStack s = vit.extract(fixture_pixels(), "fixture");
  const auto& cls = expected.at("cls_tokens");
  ASSERT_EQ(s.tokens.rows(), static_cast<Eigen::Index>(cls.size()));
  for (Eigen::Index i = 0; i < s.tokens.rows(); ++i) {
    ASSERT_EQ(s.tokens.cols(), static_cast<Eigen::Index>(cls[i].size()));
    for (Eigen::Index j = 0; j < s.tokens.cols(); ++j) {
      const double ref = cls[i][j].get<double>();
      EXPECT_NEAR(s.tokens(i, j), ref, 1e-4 * std::max(1.0, std::abs(ref))) << "block " << i + 1 << " dim " << j;
    }
  }
}

TEST(Vit, WeightsStayFrozenAndExtractionRepeats) {
  const VitBackbone vit = VitBackbone::load(kTiny, aimfscil::testing::data_dir() / "tiny_clip_vision.safetensors");
  const auto before = vit.weights_checksum();
  const auto a = vit.extract(fixture_pixels());
  const auto b = vit.extract(fixture_pixels());
  EXPECT_EQ(a, b);
  EXPECT_EQ(before, vit.weights_checksum());
  EXPECT_EQ(vit.spec().weights_id, "tiny-clip-" + to_hex(before));
}

TEST(Vit, WrongConfigIsRejectedAtLoad) {
  VitConfig two_layers = kTiny;
  two_layers.layers = 2;
  EXPECT_ERROR_KIND(VitBackbone::load(two_layers, aimfscil::testing::data_dir() / "tiny_clip_vision.safetensors"),
                    ErrorKind::validation);
  VitConfig wide = kTiny;
  wide.width = 32;
  EXPECT_THROW(VitBackbone::load(wide, aimfscil::testing::data_dir() / "tiny_clip_vision.safetensors"), Error);
}

TEST(Vit, PublishedEncoderShapes) {
  // OpenAI CLIP ViT-L/14: 24 blocks of width 1024 at 224 px; ViT-B/32 and ViT-B/16: 12 blocks of width 768.
  const auto l14 = known_vit_config("vit-l-14");
  ASSERT_TRUE(l14);
  EXPECT_EQ(l14->layers, 24);
  EXPECT_EQ(l14->width, 1024);
  EXPECT_EQ(l14->image_size, 224);
  EXPECT_EQ(l14->n_tokens(), 257);
  const auto b32 = known_vit_config("vit-b-32");
  ASSERT_TRUE(b32);
  EXPECT_EQ(b32->layers, 12);
  EXPECT_EQ(b32->width, 768);
  EXPECT_EQ(b32->n_tokens(), 50);
  EXPECT_FALSE(known_vit_config("vit-h-14"));
}

TEST(Vit, RandomB32ProducesTwelveBy768Stack) {
  const VitBackbone vit = VitBackbone::random(*known_vit_config("vit-b-32"), 3);
  PreprocessedImage img{224, 224, "clip-224", std::vector<float>(224 * 224 * 3, 0.1f)};
  const auto s = vit.extract(img);
  EXPECT_EQ(s.tokens.rows(), 12);
  EXPECT_EQ(s.tokens.cols(), 768);
  EXPECT_TRUE(s.tokens.allFinite());
}

TEST(Safetensors, MissingFileAndGarbageAreReported) {
  aimfscil::testing::TempDir dir;
  EXPECT_ERROR_KIND(SafetensorsFile(dir / "none.safetensors"), ErrorKind::storage);
  std::ofstream(dir / "bad.safetensors") << "xx";
  EXPECT_THROW(SafetensorsFile(dir / "bad.safetensors"), Error);
}
