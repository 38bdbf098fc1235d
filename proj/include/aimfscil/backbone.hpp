#pragma once

// Frozen image encoders that expose one [CLS] token per transformer block.
// Besides real CLIP vision transformers (vit.hpp) there are three analytic
// stub encoders so the rest of the pipeline runs without pretrained weights:
//
//   stub-const  block i (1-based) outputs the constant vector (i, i, ..., i)
//   stub-hash   every entry is a seeded hash of the preprocessed pixel bytes
//   stub-gauss  a smooth random-feature map of the image's mean colour plus
//               per-image Gaussian noise, so images of one flat colour form
//               a tight cluster and distinct colours form distinct clusters

#include "aimfscil/common.hpp"

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace aimfscil {

struct PreprocessRecipe {
  std::string id;
  int resolution = 224;
  std::array<float, 3> mean{};
  std::array<float, 3> stddev{};

  friend bool operator==(const PreprocessRecipe&, const PreprocessRecipe&) = default;
};

// OpenAI CLIP normalisation constants.
inline PreprocessRecipe clip_recipe(int resolution) {
  return {"clip-" + std::to_string(resolution), resolution, {0.48145466f, 0.4578275f, 0.40821073f},
          {0.26862954f, 0.26130258f, 0.27577711f}};
}

inline PreprocessRecipe stub_recipe(int resolution = 16) {
  return {"stub-" + std::to_string(resolution), resolution, {0.5f, 0.5f, 0.5f}, {0.5f, 0.5f, 0.5f}};
}

struct BackboneSpec {
  std::string name;
  int n_blocks = 0;
  int token_dim = 0;
  PreprocessRecipe preprocess;
  std::string weights_id;
};

inline void validate(const BackboneSpec& spec) {
  require(spec.n_blocks >= 1, ErrorKind::contract, "backbone '", spec.name, "': n_blocks must be >= 1");
  require(spec.token_dim >= 1, ErrorKind::contract, "backbone '", spec.name, "': token_dim must be >= 1");
  require(spec.preprocess.resolution >= 1, ErrorKind::contract, "backbone '", spec.name, "': bad resolution");
  require(!spec.weights_id.empty(), ErrorKind::contract, "backbone '", spec.name, "': empty weights_id");
  if (spec.name == "vit-l-14")
    require(spec.n_blocks == 24 && spec.token_dim == 1024, ErrorKind::contract, "vit-l-14 must be 24 x 1024");
}

// Normalised H x W x 3 tensor, row-major HWC, RGB channel order.
struct PreprocessedImage {
  int height = 0;
  int width = 0;
  std::string recipe_id;
  std::vector<float> pixels;

  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  friend bool operator==(const PreprocessedImage&, const PreprocessedImage&) = default;
};

struct BlockTokenStack {
  std::string image_id;
  std::string backbone;
  std::string weights_id;
  Matrix tokens;  // n_blocks x token_dim, row i = [CLS] of block i (input -> output order)

  Eigen::Index n_blocks() const { return tokens.rows(); }
  Eigen::Index token_dim() const { return tokens.cols(); }

  friend bool operator==(const BlockTokenStack& a, const BlockTokenStack& b) {
    return a.image_id == b.image_id && a.backbone == b.backbone && a.weights_id == b.weights_id &&
           a.tokens.rows() == b.tokens.rows() && a.tokens.cols() == b.tokens.cols() && a.tokens == b.tokens;
  }
};

class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual const BackboneSpec& spec() const = 0;

  // Checksum over every frozen parameter; identical before and after extraction.
  virtual std::uint64_t weights_checksum() const = 0;

  // Shape-checks the input, runs the frozen encoder and checks every block's
  // output for non-finite values.
  BlockTokenStack extract(const PreprocessedImage& image, std::string image_id = {}) const {
    const auto& s = spec();
    const int r = s.preprocess.resolution;
    require(image.height == r && image.width == r && image.pixels.size() == static_cast<std::size_t>(r) * r * 3,
            ErrorKind::contract, "backbone '", s.name, "' expects ", r, "x", r, "x3 input, got ", image.height, "x",
            image.width, " (", image.pixels.size(), " values)");
    require(image.recipe_id.empty() || image.recipe_id == s.preprocess.id, ErrorKind::contract,
            "image was preprocessed with '", image.recipe_id, "' but backbone expects '", s.preprocess.id, "'");
    Matrix tokens = run(image);
    require(tokens.rows() == s.n_blocks && tokens.cols() == s.token_dim, ErrorKind::contract, "backbone '",
            s.name, "' produced ", tokens.rows(), "x", tokens.cols(), " tokens");
    for (Eigen::Index i = 0; i < tokens.rows(); ++i)
      require(tokens.row(i).allFinite(), ErrorKind::numeric, "non-finite activation in block ", i + 1, " of '",
              s.name, "'");
    return {std::move(image_id), s.name, s.weights_id, std::move(tokens)};
  }

 protected:
  virtual Matrix run(const PreprocessedImage& image) const = 0;
};

inline BlockTokenStack extract_block_tokens(const PreprocessedImage& image, const Backbone& backbone,
                                            std::string image_id = {}) {
  return backbone.extract(image, std::move(image_id));
}

// ---------------------------------------------------------------------------
// Stub backbones

struct StubOptions {
  int n_blocks = 4;
  int token_dim = 32;
  std::uint64_t seed = 0;
  int resolution = 16;
  // stub-gauss only
  double amplitude = 1.0;
  double frequency = 6.0;
  double noise = 0.01;
};

class ConstStubBackbone final : public Backbone {
 public:
  explicit ConstStubBackbone(const StubOptions& opt)
      : spec_{"stub-const", opt.n_blocks, opt.token_dim, stub_recipe(opt.resolution),
              "stub-const-n" + std::to_string(opt.n_blocks) + "-d" + std::to_string(opt.token_dim)} {
    validate(spec_);
  }
  const BackboneSpec& spec() const override { return spec_; }
  std::uint64_t weights_checksum() const override { return Fnv1a64{}.update(spec_.weights_id).digest(); }

 protected:
  Matrix run(const PreprocessedImage&) const override {
    Matrix t(spec_.n_blocks, spec_.token_dim);
    for (int i = 0; i < spec_.n_blocks; ++i) t.row(i).setConstant(static_cast<Scalar>(i + 1));
    return t;
  }

 private:
  BackboneSpec spec_;
};

namespace detail {

inline std::uint64_t pixel_hash(const PreprocessedImage& image, std::uint64_t seed) {
  Fnv1a64 h;
  h.update_value(seed);
  h.update(image.pixels.data(), image.pixels.size() * sizeof(float));
  return h.digest();
}

// Uniform in [-1, 1) from the top 53 bits.
inline double unit_interval(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

}  // namespace detail

class HashStubBackbone final : public Backbone {
 public:
  explicit HashStubBackbone(const StubOptions& opt)
      : seed_(opt.seed),
        spec_{"stub-hash", opt.n_blocks, opt.token_dim, stub_recipe(opt.resolution),
              "stub-hash-n" + std::to_string(opt.n_blocks) + "-d" + std::to_string(opt.token_dim) + "-s" +
                  std::to_string(opt.seed)} {
    validate(spec_);
  }
  const BackboneSpec& spec() const override { return spec_; }
  std::uint64_t weights_checksum() const override { return Fnv1a64{}.update(spec_.weights_id).digest(); }

 protected:
  // entry (i, j) = unit(splitmix64(h ^ splitmix64(i * d + j))), h = FNV-1a(seed || pixel bytes)
  Matrix run(const PreprocessedImage& image) const override {
    const std::uint64_t h = detail::pixel_hash(image, seed_);
    Matrix t(spec_.n_blocks, spec_.token_dim);
    for (int i = 0; i < spec_.n_blocks; ++i)
      for (int j = 0; j < spec_.token_dim; ++j) {
        const auto index = static_cast<std::uint64_t>(i) * spec_.token_dim + j;
        t(i, j) = detail::unit_interval(splitmix64(h ^ splitmix64(index)));
      }
    return t;
  }

 private:
  std::uint64_t seed_;
  BackboneSpec spec_;
};

class GaussStubBackbone final : public Backbone {
 public:
  explicit GaussStubBackbone(const StubOptions& opt)
      : opt_(opt),
        spec_{"stub-gauss", opt.n_blocks, opt.token_dim, stub_recipe(opt.resolution), make_weights_id(opt)} {
    validate(spec_);
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    const auto entries = static_cast<Eigen::Index>(opt.n_blocks) * opt.token_dim;
    directions_.resize(entries, 3);
    phases_.resize(entries);
    for (Eigen::Index k = 0; k < entries; ++k) {
      for (int c = 0; c < 3; ++c) directions_(k, c) = normal(rng);
      phases_(k) = phase(rng);
    }
  }

  const BackboneSpec& spec() const override { return spec_; }

  std::uint64_t weights_checksum() const override {
    Fnv1a64 h;
    h.update_value(checksum(directions_));
    h.update_value(checksum(phases_));
    return h.digest();
  }

  // Noise-free block tokens for a given mean colour (normalised units).
  Matrix cluster_center(const std::array<double, 3>& mean_colour) const {
    Matrix t(spec_.n_blocks, spec_.token_dim);
    const Eigen::Vector3d m(mean_colour[0], mean_colour[1], mean_colour[2]);
    for (Eigen::Index k = 0; k < directions_.rows(); ++k) {
      const double projection = directions_.row(k).dot(m);
      t.data()[k] = opt_.amplitude * std::cos(opt_.frequency * projection + phases_(k));
    }
    return t;
  }

  const StubOptions& options() const { return opt_; }

 protected:
  Matrix run(const PreprocessedImage& image) const override {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    const std::size_t pixels = image.pixels.size() / 3;
    for (std::size_t p = 0; p < pixels; ++p)
      for (int c = 0; c < 3; ++c) mean[c] += image.pixels[p * 3 + c];
    for (auto& m : mean) m /= static_cast<double>(pixels);
    Matrix t = cluster_center(mean);
    std::mt19937_64 rng(detail::pixel_hash(image, opt_.seed));
    std::normal_distribution<double> normal(0.0, opt_.noise);
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] += normal(rng);
    return t;
  }

 private:
  static std::string make_weights_id(const StubOptions& o) {
    std::ostringstream oss;
    oss << "stub-gauss-n" << o.n_blocks << "-d" << o.token_dim << "-s" << o.seed << "-a" << o.amplitude << "-f"
        << o.frequency << "-z" << o.noise;
    return oss.str();
  }

  StubOptions opt_;
  BackboneSpec spec_;
  Matrix directions_;
  Vector phases_;
};

// Parses "stub-gauss" or "stub-gauss:seed=3,n=4,d=32,res=16,noise=0.01".
inline std::pair<std::string, std::map<std::string, std::string>> parse_backbone_id(std::string_view id) {
  std::map<std::string, std::string> params;
  const auto colon = id.find(':');
  const std::string name(id.substr(0, colon));
  if (colon != std::string_view::npos) {
    std::string_view rest = id.substr(colon + 1);
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const std::string_view item = rest.substr(0, comma);
      const auto eq = item.find('=');
      require(eq != std::string_view::npos && eq > 0, ErrorKind::usage, "malformed backbone parameter '", item,
              "' in '", id, "'");
      params[std::string(item.substr(0, eq))] = std::string(item.substr(eq + 1));
      rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    }
  }
  return {name, params};
}

inline StubOptions stub_options_from(const std::map<std::string, std::string>& params) {
  StubOptions o;
  for (const auto& [key, value] : params) {
    try {
      if (key == "n") o.n_blocks = std::stoi(value);
      else if (key == "d") o.token_dim = std::stoi(value);
      else if (key == "seed") o.seed = std::stoull(value);
      else if (key == "res") o.resolution = std::stoi(value);
      else if (key == "amp") o.amplitude = std::stod(value);
      else if (key == "freq") o.frequency = std::stod(value);
      else if (key == "noise") o.noise = std::stod(value);
      else fail(ErrorKind::usage, "unknown stub backbone parameter '", key, "'");
    } catch (const std::logic_error&) {
      fail(ErrorKind::usage, "bad value '", value, "' for stub backbone parameter '", key, "'");
    }
  }
  return o;
}

inline bool is_stub_backbone(std::string_view id) { return parse_backbone_id(id).first.starts_with("stub-"); }

inline std::unique_ptr<Backbone> make_stub_backbone(std::string_view id) {
  const auto [name, params] = parse_backbone_id(id);
  const StubOptions opt = stub_options_from(params);
  if (name == "stub-const") return std::make_unique<ConstStubBackbone>(opt);
  if (name == "stub-hash") return std::make_unique<HashStubBackbone>(opt);
  if (name == "stub-gauss") return std::make_unique<GaussStubBackbone>(opt);
  fail(ErrorKind::usage, "unknown stub backbone '", name, "'");
}

}  // namespace aimfscil
