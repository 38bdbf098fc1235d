#pragma once

// CLIP vision transformer (pre-LayerNorm blocks, quick-GELU MLP) evaluated on
// the CPU. Weights are read from a safetensors file using the Hugging Face
// `CLIPVisionModel` / `CLIPModel` tensor names, with or without the
// "vision_model." prefix.
// Only the [CLS] row of each block's residual-stream output is kept.

#include "aimfscil/backbone.hpp"
#include "aimfscil/safetensors.hpp"

#include <cmath>
#include <random>

namespace aimfscil {

struct VitConfig {
  std::string name;
  int image_size = 224;
  int patch_size = 14;
  int width = 1024;
  int layers = 24;
  int heads = 16;
  int mlp_dim = 4096;
  float layer_norm_eps = 1e-5f;

  int grid() const { return image_size / patch_size; }
  int n_tokens() const { return grid() * grid() + 1; }
};

inline VitConfig vit_l14_config() { return {"vit-l-14", 224, 14, 1024, 24, 16, 4096}; }
inline VitConfig vit_b32_config() { return {"vit-b-32", 224, 32, 768, 12, 12, 3072}; }
inline VitConfig vit_b16_config() { return {"vit-b-16", 224, 16, 768, 12, 12, 3072}; }

inline std::optional<VitConfig> known_vit_config(std::string_view name) {
  if (name == "vit-l-14") return vit_l14_config();
  if (name == "vit-b-32") return vit_b32_config();
  if (name == "vit-b-16") return vit_b16_config();
  return std::nullopt;
}

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVectorF = Eigen::RowVectorXf;

struct VitLayerWeights {
  RowVectorF ln1_w, ln1_b, ln2_w, ln2_b;
  MatrixF q_w, k_w, v_w, o_w;  // [out, in]
  RowVectorF q_b, k_b, v_b, o_b;
  MatrixF fc1_w, fc2_w;
  RowVectorF fc1_b, fc2_b;
};

struct VitWeights {
  MatrixF patch_w;  // [width, 3 * patch * patch], input index = c * p * p + ky * p + kx
  RowVectorF class_embedding;
  MatrixF position_embedding;  // [n_tokens, width]
  RowVectorF pre_ln_w, pre_ln_b;
  std::vector<VitLayerWeights> layers;
};

namespace detail {

template <typename F>
void for_each_tensor(const VitWeights& w, F&& f) {
  f(w.patch_w.data(), w.patch_w.size());
  f(w.class_embedding.data(), w.class_embedding.size());
  f(w.position_embedding.data(), w.position_embedding.size());
  f(w.pre_ln_w.data(), w.pre_ln_w.size());
  f(w.pre_ln_b.data(), w.pre_ln_b.size());
  for (const auto& l : w.layers) {
    for (const RowVectorF* v : {&l.ln1_w, &l.ln1_b, &l.ln2_w, &l.ln2_b, &l.q_b, &l.k_b, &l.v_b, &l.o_b, &l.fc1_b,
                                &l.fc2_b})
      f(v->data(), v->size());
    for (const MatrixF* m : {&l.q_w, &l.k_w, &l.v_w, &l.o_w, &l.fc1_w, &l.fc2_w}) f(m->data(), m->size());
  }
}

inline MatrixF layer_norm(const MatrixF& x, const RowVectorF& w, const RowVectorF& b, float eps) {
  MatrixF out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const float mean = x.row(r).mean();
    const float var = (x.row(r).array() - mean).square().mean();
    out.row(r) = ((x.row(r).array() - mean) / std::sqrt(var + eps)).matrix().cwiseProduct(w) + b;
  }
  return out;
}

inline MatrixF affine(const MatrixF& x, const MatrixF& w, const RowVectorF& b) {
  MatrixF y = x * w.transpose();
  y.rowwise() += b;
  return y;
}

}  // namespace detail

class VitBackbone final : public Backbone {
 public:
  VitBackbone(VitConfig config, VitWeights weights) : config_(std::move(config)), weights_(std::move(weights)) {
    check_shapes();
    spec_ = {config_.name, config_.layers, config_.width, clip_recipe(config_.image_size),
             config_.name + "-" + to_hex(weights_checksum())};
    validate(spec_);
  }

  static VitBackbone load(const VitConfig& config, const fs::path& path) {
    SafetensorsFile file(path);
    const std::string prefix = file.contains("vision_model.embeddings.class_embedding") ? "vision_model." : "";
    const int d = config.width;
    const int p = config.patch_size;
    auto mat = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
      const auto& info = file.info(prefix + name);
      require(info.numel() == rows * cols, ErrorKind::validation, "tensor '", prefix + name, "' has ", info.numel(),
              " values, expected ", rows, "x", cols, " for ", config.name);
      const auto values = file.read_f32(prefix + name);
      return MatrixF(Eigen::Map<const MatrixF>(values.data(), rows, cols));
    };
    auto vec = [&](const std::string& name, Eigen::Index n) { return RowVectorF(mat(name, 1, n)); };

    VitWeights w;
    w.patch_w = mat("embeddings.patch_embedding.weight", d, 3 * p * p);
    w.class_embedding = vec("embeddings.class_embedding", d);
    w.position_embedding = mat("embeddings.position_embedding.weight", config.n_tokens(), d);
    w.pre_ln_w = vec("pre_layrnorm.weight", d);
    w.pre_ln_b = vec("pre_layrnorm.bias", d);
    require(!file.contains(prefix + "encoder.layers." + std::to_string(config.layers) + ".layer_norm1.weight"),
            ErrorKind::validation, path, " has more than ", config.layers, " blocks; wrong config for ", config.name);
    for (int i = 0; i < config.layers; ++i) {
      const std::string l = "encoder.layers." + std::to_string(i) + ".";
      VitLayerWeights lw;
      lw.ln1_w = vec(l + "layer_norm1.weight", d);
      lw.ln1_b = vec(l + "layer_norm1.bias", d);
      lw.ln2_w = vec(l + "layer_norm2.weight", d);
      lw.ln2_b = vec(l + "layer_norm2.bias", d);
      lw.q_w = mat(l + "self_attn.q_proj.weight", d, d);
      lw.q_b = vec(l + "self_attn.q_proj.bias", d);
      lw.k_w = mat(l + "self_attn.k_proj.weight", d, d);
      lw.k_b = vec(l + "self_attn.k_proj.bias", d);
      lw.v_w = mat(l + "self_attn.v_proj.weight", d, d);
      lw.v_b = vec(l + "self_attn.v_proj.bias", d);
      lw.o_w = mat(l + "self_attn.out_proj.weight", d, d);
      lw.o_b = vec(l + "self_attn.out_proj.bias", d);
      lw.fc1_w = mat(l + "mlp.fc1.weight", config.mlp_dim, d);
      lw.fc1_b = vec(l + "mlp.fc1.bias", config.mlp_dim);
      lw.fc2_w = mat(l + "mlp.fc2.weight", d, config.mlp_dim);
      lw.fc2_b = vec(l + "mlp.fc2.bias", d);
      w.layers.push_back(std::move(lw));
    }
    return VitBackbone(config, std::move(w));
  }

  // Gaussian(0, 0.02) parameters with unit LayerNorm gains; for shape checks only.
  static VitBackbone random(const VitConfig& config, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 0.02f);
    auto mat = [&](Eigen::Index r, Eigen::Index c) {
      MatrixF m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
      return m;
    };
    auto vec = [&](Eigen::Index n) { return RowVectorF(mat(1, n)); };
    const int d = config.width;
    const int p = config.patch_size;
    VitWeights w;
    w.patch_w = mat(d, 3 * p * p);
    w.class_embedding = vec(d);
    w.position_embedding = mat(config.n_tokens(), d);
    w.pre_ln_w = RowVectorF::Ones(d);
    w.pre_ln_b = RowVectorF::Zero(d);
    for (int i = 0; i < config.layers; ++i) {
      VitLayerWeights lw;
      lw.ln1_w = lw.ln2_w = RowVectorF::Ones(d);
      lw.ln1_b = lw.ln2_b = RowVectorF::Zero(d);
      lw.q_w = mat(d, d), lw.k_w = mat(d, d), lw.v_w = mat(d, d), lw.o_w = mat(d, d);
      lw.q_b = vec(d), lw.k_b = vec(d), lw.v_b = vec(d), lw.o_b = vec(d);
      lw.fc1_w = mat(config.mlp_dim, d);
      lw.fc1_b = vec(config.mlp_dim);
      lw.fc2_w = mat(d, config.mlp_dim);
      lw.fc2_b = vec(d);
      w.layers.push_back(std::move(lw));
    }
    return VitBackbone(config, std::move(w));
  }

  const BackboneSpec& spec() const override { return spec_; }
  const VitConfig& config() const { return config_; }

  std::uint64_t weights_checksum() const override {
    Fnv1a64 h;
    detail::for_each_tensor(weights_, [&](const float* data, Eigen::Index n) {
      h.update(data, static_cast<std::size_t>(n) * sizeof(float));
    });
    return h.digest();
  }

 protected:
  Matrix run(const PreprocessedImage& image) const override {
    const int p = config_.patch_size;
    const int g = config_.grid();
    const int d = config_.width;
    const int heads = config_.heads;
    const int head_dim = d / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    const float eps = config_.layer_norm_eps;

    MatrixF patches(g * g, 3 * p * p);
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx)
        for (int c = 0; c < 3; ++c)
          for (int ky = 0; ky < p; ++ky)
            for (int kx = 0; kx < p; ++kx)
              patches(gy * g + gx, c * p * p + ky * p + kx) = image.at(gy * p + ky, gx * p + kx, c);

    MatrixF x(config_.n_tokens(), d);
    x.row(0) = weights_.class_embedding;
    x.bottomRows(g * g) = patches * weights_.patch_w.transpose();
    x += weights_.position_embedding;
    x = detail::layer_norm(x, weights_.pre_ln_w, weights_.pre_ln_b, eps);

    Matrix cls(config_.layers, d);
    const Eigen::Index t = x.rows();
    for (int li = 0; li < config_.layers; ++li) {
      const auto& l = weights_.layers[static_cast<std::size_t>(li)];
      MatrixF h = detail::layer_norm(x, l.ln1_w, l.ln1_b, eps);
      const MatrixF q = detail::affine(h, l.q_w, l.q_b) * scale;
      const MatrixF k = detail::affine(h, l.k_w, l.k_b);
      const MatrixF v = detail::affine(h, l.v_w, l.v_b);
      MatrixF attended(t, d);
      for (int hd = 0; hd < heads; ++hd) {
        MatrixF scores = q.middleCols(hd * head_dim, head_dim) * k.middleCols(hd * head_dim, head_dim).transpose();
        for (Eigen::Index r = 0; r < t; ++r) {
          const float m = scores.row(r).maxCoeff();
          scores.row(r) = (scores.row(r).array() - m).exp();
          scores.row(r) /= scores.row(r).sum();
        }
        attended.middleCols(hd * head_dim, head_dim) = scores * v.middleCols(hd * head_dim, head_dim);
      }
      x += detail::affine(attended, l.o_w, l.o_b);

      h = detail::layer_norm(x, l.ln2_w, l.ln2_b, eps);
      MatrixF f = detail::affine(h, l.fc1_w, l.fc1_b);
      f = f.array() * (1.0f / (1.0f + (-1.702f * f.array()).exp()));
      x += detail::affine(f, l.fc2_w, l.fc2_b);

      cls.row(li) = x.row(0).cast<Scalar>();
    }
    return cls;
  }

 private:
  void check_shapes() const {
    const auto& c = config_;
    require(c.image_size > 0 && c.patch_size > 0 && c.image_size % c.patch_size == 0, ErrorKind::contract,
            c.name, ": image size must be a multiple of the patch size");
    require(c.heads > 0 && c.width % c.heads == 0, ErrorKind::contract, c.name, ": width not divisible by heads");
    require(static_cast<int>(weights_.layers.size()) == c.layers, ErrorKind::contract, c.name, ": expected ",
            c.layers, " blocks");
    require(weights_.patch_w.rows() == c.width && weights_.patch_w.cols() == 3 * c.patch_size * c.patch_size,
            ErrorKind::contract, c.name, ": bad patch embedding shape");
    require(weights_.position_embedding.rows() == c.n_tokens(), ErrorKind::contract, c.name,
            ": bad position embedding shape");
  }

  VitConfig config_;
  VitWeights weights_;
  BackboneSpec spec_;
};

}  // namespace aimfscil
