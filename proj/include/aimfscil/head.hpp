#pragma once

// Trainable head over a stack of per-block [CLS] tokens:
//
//   projected = f1(tokens)                     n x d1, f1 shared across blocks
//   raw       = aim(projected)                 n x d1, aim shared across blocks
//   scaled    = softmax over blocks, per channel
//   integrated[c] = sum_i scaled[i,c] * projected[i,c]
//   embedding = f2(integrated)                 d2
//   logits    = classifier(embedding)          n_base_classes
//
// f1, aim and f2 are stacks of (Linear -> Dropout -> ReLU) blocks.

#include "aimfscil/array_bundle.hpp"
#include "aimfscil/backbone.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <functional>
#include <numeric>
#include <random>
#include <span>

namespace aimfscil {

enum class Mode { train, eval };

struct HeadConfig {
  int n_blocks = 24;
  int d0 = 1024;
  int d1 = 1024;
  int d2 = 1024;
  int n_base_classes = 16;
  int projector_depth = 2;  // Linear/Dropout/ReLU blocks per projector; hidden width = d1
  double dropout_rate = 0.5;
  double learning_rate = 0.001;
  int batch_size = 128;
  int epochs = 20;
  std::uint64_t seed = 0;

  // d1 = d2 = d0.
  static HeadConfig for_backbone(int n_blocks, int d0, int n_base_classes) {
    HeadConfig c;
    c.n_blocks = n_blocks;
    c.d0 = c.d1 = c.d2 = d0;
    c.n_base_classes = n_base_classes;
    return c;
  }
};

inline void validate(const HeadConfig& c) {
  require(c.n_blocks >= 1 && c.d0 >= 1 && c.d1 >= 1 && c.d2 >= 1 && c.n_base_classes >= 1, ErrorKind::usage,
          "head dimensions must all be >= 1");
  require(c.projector_depth >= 1, ErrorKind::usage, "projector_depth must be >= 1");
  require(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0, ErrorKind::usage, "dropout_rate must be in [0, 1)");
  require(c.learning_rate >= 0.0 && std::isfinite(c.learning_rate), ErrorKind::usage,
          "learning_rate must be finite and >= 0");
  require(c.batch_size >= 1, ErrorKind::usage, "batch_size must be >= 1");
  require(c.epochs >= 1, ErrorKind::usage, "epochs must be >= 1");
}

inline json to_json(const HeadConfig& c) {
  return {{"n_blocks", c.n_blocks},          {"d0", c.d0},
          {"d1", c.d1},                      {"d2", c.d2},
          {"n_base_classes", c.n_base_classes}, {"projector_depth", c.projector_depth},
          {"dropout_rate", c.dropout_rate},  {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},      {"epochs", c.epochs},
          {"seed", c.seed}};
}

inline HeadConfig head_config_from_json(const json& j) {
  HeadConfig c;
  c.n_blocks = j.at("n_blocks").get<int>();
  c.d0 = j.at("d0").get<int>();
  c.d1 = j.at("d1").get<int>();
  c.d2 = j.at("d2").get<int>();
  c.n_base_classes = j.at("n_base_classes").get<int>();
  c.projector_depth = j.value("projector_depth", 2);
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline std::uint64_t config_hash(const HeadConfig& c) { return Fnv1a64{}.update(to_json(c).dump()).digest(); }

struct Linear {
  Matrix weight;  // out x in
  Matrix bias;    // 1 x out

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }

  Matrix apply(const Matrix& x) const {
    Matrix y = x * weight.transpose();
    y.rowwise() += bias.row(0);
    return y;
  }
};

struct Projector {
  std::vector<Linear> blocks;

  Eigen::Index in_dim() const { return blocks.front().in_dim(); }
  Eigen::Index out_dim() const { return blocks.back().out_dim(); }
};

struct HeadParams {
  Projector f1;
  Projector aim;
  Projector f2;
  Linear classifier;
};

// Visits every parameter tensor in a fixed order with a stable name.
template <typename Params, typename F>
  requires std::same_as<std::remove_const_t<Params>, HeadParams>
void visit_params(Params& p, F&& f) {
  auto projector = [&](auto& proj, const std::string& prefix) {
    for (std::size_t k = 0; k < proj.blocks.size(); ++k) {
      f(prefix + "." + std::to_string(k) + ".weight", proj.blocks[k].weight);
      f(prefix + "." + std::to_string(k) + ".bias", proj.blocks[k].bias);
    }
  };
  projector(p.f1, "f1");
  projector(p.aim, "aim");
  projector(p.f2, "f2");
  f(std::string("classifier.weight"), p.classifier.weight);
  f(std::string("classifier.bias"), p.classifier.bias);
}

inline HeadParams zeros_like(const HeadParams& p) {
  HeadParams z = p;
  visit_params(z, [](const std::string&, Matrix& m) { m.setZero(); });
  return z;
}

inline std::uint64_t params_checksum(const HeadParams& p) {
  Fnv1a64 h;
  visit_params(p, [&](const std::string& name, const Matrix& m) {
    h.update(name);
    h.update_value(checksum(m));
  });
  return h.digest();
}

inline bool operator==(const HeadParams& a, const HeadParams& b) {
  std::vector<const Matrix*> lhs, rhs;
  visit_params(a, [&](const std::string&, const Matrix& m) { lhs.push_back(&m); });
  visit_params(b, [&](const std::string&, const Matrix& m) { rhs.push_back(&m); });
  if (lhs.size() != rhs.size()) return false;
  for (std::size_t i = 0; i < lhs.size(); ++i)
    if (lhs[i]->rows() != rhs[i]->rows() || lhs[i]->cols() != rhs[i]->cols() || *lhs[i] != *rhs[i]) return false;
  return true;
}

namespace detail {

// U(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
inline Linear init_linear(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Linear l{Matrix(out, in), Matrix(1, out)};
  for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias.data()[i] = u(rng);
  return l;
}

inline Projector init_projector(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, int depth,
                                std::mt19937_64& rng) {
  Projector p;
  for (int k = 0; k < depth; ++k)
    p.blocks.push_back(init_linear(k == 0 ? in : hidden, k + 1 == depth ? out : hidden, rng));
  return p;
}

}  // namespace detail

inline HeadParams init_head(const HeadConfig& c) {
  validate(c);
  std::mt19937_64 rng(c.seed);
  HeadParams p;
  p.f1 = detail::init_projector(c.d0, c.d1, c.d1, c.projector_depth, rng);
  p.aim = detail::init_projector(c.d1, c.d1, c.d1, c.projector_depth, rng);
  p.f2 = detail::init_projector(c.d1, c.d1, c.d2, c.projector_depth, rng);
  p.classifier = detail::init_linear(c.d2, c.n_base_classes, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward primitives (rows are independent samples)

struct ProjectorTrace {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;   // affine outputs
  std::vector<Matrix> gain;  // dropout multipliers; empty in eval mode
};

struct Dropout {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;
};

inline Matrix projector_forward(const Projector& proj, const Matrix& x, Mode mode, Dropout dropout = {},
                                ProjectorTrace* trace = nullptr) {
  require(x.cols() == proj.in_dim(), ErrorKind::contract, "projector expects width ", proj.in_dim(), ", got ",
          x.cols());
  const bool drop = mode == Mode::train && dropout.rate > 0.0;
  require(!drop || dropout.rng != nullptr, ErrorKind::usage, "train-mode dropout needs a random generator");
  Matrix a = x;
  for (const auto& block : proj.blocks) {
    if (trace) trace->inputs.push_back(a);
    Matrix z = block.apply(a);
    if (trace) trace->pre.push_back(z);
    if (drop) {
      const double keep_gain = 1.0 / (1.0 - dropout.rate);
      Matrix g(z.rows(), z.cols());
      for (Eigen::Index i = 0; i < g.size(); ++i) {
        const double u = static_cast<double>((*dropout.rng)() >> 11) * 0x1.0p-53;
        g.data()[i] = u < dropout.rate ? 0.0 : keep_gain;
      }
      z = z.cwiseProduct(g);
      if (trace) trace->gain.push_back(std::move(g));
    }
    a = z.cwiseMax(0.0);
  }
  return a;
}

// Returns d(input); writes (not accumulates) parameter gradients into `grads`.
inline Matrix projector_backward(const Projector& proj, const ProjectorTrace& trace, const Matrix& d_out,
                                 Projector& grads) {
  Matrix d = d_out;
  for (std::size_t k = proj.blocks.size(); k-- > 0;) {
    const Matrix& z = trace.pre[k];
    Matrix dz(d.rows(), d.cols());
    if (trace.gain.empty()) {
      dz = (z.array() > 0.0).select(d, 0.0);
    } else {
      const Matrix& g = trace.gain[k];
      dz = ((z.array() * g.array()) > 0.0).select(d.cwiseProduct(g), 0.0);
    }
    grads.blocks[k].weight = dz.transpose() * trace.inputs[k];
    grads.blocks[k].bias = dz.colwise().sum();
    d = dz * proj.blocks[k].weight;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Per-image operations

inline Matrix project_tokens(const Matrix& tokens, const HeadParams& params) {
  require(tokens.cols() == params.f1.in_dim(), ErrorKind::contract, "token width ", tokens.cols(),
          " does not match head input width ", params.f1.in_dim());
  return projector_forward(params.f1, tokens, Mode::eval);
}

inline Matrix project_tokens(const BlockTokenStack& stack, const HeadParams& params) {
  return project_tokens(stack.tokens, params);
}

inline Matrix compute_raw_weights(const Matrix& projected, const HeadParams& params) {
  require(projected.cols() == params.aim.in_dim(), ErrorKind::contract, "projected width ", projected.cols(),
          " does not match AIM input width ", params.aim.in_dim());
  Matrix raw = projector_forward(params.aim, projected, Mode::eval);
  require(raw.allFinite(), ErrorKind::numeric, "AIM produced non-finite weights");
  return raw;
}

// Softmax over the block axis (rows) of every channel column.
inline Matrix scale_weights(const Matrix& raw) {
  require(raw.rows() >= 1 && raw.allFinite(), ErrorKind::numeric, "raw weights must be non-empty and finite");
  Matrix scaled(raw.rows(), raw.cols());
  for (Eigen::Index c = 0; c < raw.cols(); ++c) {
    const double m = raw.col(c).maxCoeff();
    scaled.col(c) = (raw.col(c).array() - m).exp();
    scaled.col(c) /= scaled.col(c).sum();
  }
  return scaled;
}

inline Vector integrate_tokens(const Matrix& projected, const Matrix& scaled) {
  require(projected.rows() == scaled.rows() && projected.cols() == scaled.cols(), ErrorKind::contract,
          "projected (", projected.rows(), "x", projected.cols(), ") and weights (", scaled.rows(), "x",
          scaled.cols(), ") differ in shape");
  return projected.cwiseProduct(scaled).colwise().sum().transpose();
}

inline Matrix scaled_weights_for(const Matrix& tokens, const HeadParams& params) {
  return scale_weights(compute_raw_weights(project_tokens(tokens, params), params));
}

struct HeadOutput {
  Vector embedding;
  Vector logits;
};

inline HeadOutput forward(const Matrix& tokens, const HeadParams& params, Mode mode, Dropout dropout = {}) {
  require(tokens.cols() == params.f1.in_dim(), ErrorKind::contract, "token width ", tokens.cols(),
          " does not match head input width ", params.f1.in_dim());
  const Matrix projected = projector_forward(params.f1, tokens, mode, dropout);
  const Matrix raw = projector_forward(params.aim, projected, mode, dropout);
  require(raw.allFinite(), ErrorKind::numeric, "AIM produced non-finite weights");
  const Vector integrated = integrate_tokens(projected, scale_weights(raw));
  const Matrix embedding = projector_forward(params.f2, integrated.transpose(), mode, dropout);
  HeadOutput out{embedding.row(0).transpose(), params.classifier.apply(embedding).row(0).transpose()};
  require(out.embedding.allFinite() && out.logits.allFinite(), ErrorKind::numeric, "head output is non-finite");
  return out;
}

inline HeadOutput forward(const BlockTokenStack& stack, const HeadParams& params, Mode mode, Dropout dropout = {}) {
  return forward(stack.tokens, params, mode, dropout);
}

inline Vector embed(const Matrix& tokens, const HeadParams& params) {
  return forward(tokens, params, Mode::eval).embedding;
}

// ---------------------------------------------------------------------------
// Batched loss and gradient

struct LabeledTokens {
  Matrix tokens;  // n_blocks x d0
  int label = 0;
};

struct BatchResult {
  double loss = 0.0;  // mean cross-entropy
  int correct = 0;
};

// Mean cross-entropy over `batch`; fills `grads` when non-null.
inline BatchResult batch_loss(const HeadParams& params, std::span<const LabeledTokens* const> batch, Mode mode,
                              Dropout dropout = {}, HeadParams* grads = nullptr) {
  require(!batch.empty(), ErrorKind::usage, "empty batch");
  const Eigen::Index n = batch.front()->tokens.rows();
  const Eigen::Index d0 = params.f1.in_dim();
  const auto bsz = static_cast<Eigen::Index>(batch.size());
  Matrix x(bsz * n, d0);
  for (Eigen::Index b = 0; b < bsz; ++b) {
    const Matrix& t = batch[static_cast<std::size_t>(b)]->tokens;
    require(t.rows() == n && t.cols() == d0, ErrorKind::contract, "sample ", b, " has shape ", t.rows(), "x",
            t.cols(), ", expected ", n, "x", d0);
    x.middleRows(b * n, n) = t;
  }

  ProjectorTrace f1_trace, aim_trace, f2_trace;
  ProjectorTrace* want = grads ? &f1_trace : nullptr;
  const Matrix projected = projector_forward(params.f1, x, mode, dropout, want);
  const Matrix raw = projector_forward(params.aim, projected, mode, dropout, grads ? &aim_trace : nullptr);
  require(raw.allFinite(), ErrorKind::numeric, "AIM produced non-finite weights");
  const Eigen::Index d1 = projected.cols();
  Matrix scaled(raw.rows(), d1);
  Matrix integrated(bsz, d1);
  for (Eigen::Index b = 0; b < bsz; ++b) {
    scaled.middleRows(b * n, n) = scale_weights(raw.middleRows(b * n, n));
    integrated.row(b) = projected.middleRows(b * n, n).cwiseProduct(scaled.middleRows(b * n, n)).colwise().sum();
  }
  const Matrix embedding = projector_forward(params.f2, integrated, mode, dropout, grads ? &f2_trace : nullptr);
  const Matrix logits = params.classifier.apply(embedding);

  BatchResult result;
  Matrix d_logits(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < bsz; ++b) {
    const int label = batch[static_cast<std::size_t>(b)]->label;
    require(label >= 0 && label < logits.cols(), ErrorKind::usage, "label ", label, " out of range");
    const double m = logits.row(b).maxCoeff();
    const auto shifted = (logits.row(b).array() - m).eval();
    const double log_z = std::log(shifted.exp().sum());
    result.loss += log_z - shifted(label);
    d_logits.row(b) = (shifted - log_z).exp().matrix();
    d_logits(b, label) -= 1.0;
    Eigen::Index arg = 0;
    logits.row(b).maxCoeff(&arg);
    if (arg == label) ++result.correct;
  }
  result.loss /= static_cast<double>(bsz);
  if (!grads) return result;

  d_logits /= static_cast<double>(bsz);
  grads->classifier.weight = d_logits.transpose() * embedding;
  grads->classifier.bias = d_logits.colwise().sum();
  const Matrix d_embedding = d_logits * params.classifier.weight;
  const Matrix d_integrated = projector_backward(params.f2, f2_trace, d_embedding, grads->f2);

  Matrix d_projected(projected.rows(), d1);
  Matrix d_raw(raw.rows(), d1);
  for (Eigen::Index b = 0; b < bsz; ++b) {
    const auto s = scaled.middleRows(b * n, n);
    const auto p = projected.middleRows(b * n, n);
    // d(scaled) = projected * d(integrated); softmax Jacobian per column.
    const Matrix d_scaled = p.array().rowwise() * d_integrated.row(b).array();
    d_projected.middleRows(b * n, n) = s.array().rowwise() * d_integrated.row(b).array();
    const Eigen::RowVectorXd inner = s.cwiseProduct(d_scaled).colwise().sum();
    d_raw.middleRows(b * n, n) = s.array() * (d_scaled.array().rowwise() - inner.array());
  }
  d_projected += projector_backward(params.aim, aim_trace, d_raw, grads->aim);
  projector_backward(params.f1, f1_trace, d_projected, grads->f1);
  return result;
}

// ---------------------------------------------------------------------------
// Training

namespace detail {
inline std::atomic<std::uint64_t>& optimizer_step_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}
}  // namespace detail

// Process-wide number of optimizer updates applied so far.
inline std::uint64_t optimizer_steps_taken() { return detail::optimizer_step_counter().load(); }

class Adam {
 public:
  Adam(const HeadParams& shape, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(zeros_like(shape)), v_(zeros_like(shape)) {}

  void step(HeadParams& params, const HeadParams& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::vector<Matrix*> p, m, v;
    std::vector<const Matrix*> g;
    visit_params(params, [&](const std::string&, Matrix& x) { p.push_back(&x); });
    visit_params(m_, [&](const std::string&, Matrix& x) { m.push_back(&x); });
    visit_params(v_, [&](const std::string&, Matrix& x) { v.push_back(&x); });
    visit_params(grads, [&](const std::string&, const Matrix& x) { g.push_back(&x); });
    for (std::size_t i = 0; i < p.size(); ++i) {
      *m[i] = beta1_ * *m[i] + (1.0 - beta1_) * *g[i];
      *v[i] = beta2_ * *v[i] + (1.0 - beta2_) * g[i]->cwiseProduct(*g[i]);
      *p[i] -= (lr_ * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + eps_)).matrix();
    }
    ++detail::optimizer_step_counter();
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  HeadParams m_, v_;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;      // mean train-mode cross-entropy over the epoch
  double accuracy = 0.0;  // eval-mode accuracy on the training set after the epoch, in [0, 1]
  double wall_ms = 0.0;  // not serialized
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  std::uint64_t optimizer_steps = 0;
};

inline json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"loss", r.loss}, {"accuracy", r.accuracy}};
}

struct TrainResult {
  HeadParams params;
  TrainingLog log;
};

inline double eval_accuracy(const HeadParams& params, std::span<const LabeledTokens> data, int chunk = 256) {
  int correct = 0;
  std::vector<const LabeledTokens*> ptrs;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(chunk)) {
    ptrs.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(chunk)); ++i)
      ptrs.push_back(&data[i]);
    correct += batch_loss(params, ptrs, Mode::eval).correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Mini-batch Adam on cross-entropy. Sample order per epoch comes from a
// generator seeded with config.seed, so a run is reproducible.
inline TrainResult train_base(std::span<const LabeledTokens> data, const HeadConfig& config,
                              std::optional<HeadParams> initial = std::nullopt,
                              const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  validate(config);
  require(!data.empty(), ErrorKind::usage, "training set is empty");
  for (std::size_t i = 0; i < data.size(); ++i) {
    require(data[i].tokens.rows() == config.n_blocks && data[i].tokens.cols() == config.d0, ErrorKind::contract,
            "training sample ", i, " has shape ", data[i].tokens.rows(), "x", data[i].tokens.cols(), ", expected ",
            config.n_blocks, "x", config.d0);
    require(data[i].label >= 0 && data[i].label < config.n_base_classes, ErrorKind::usage, "training sample ", i,
            " has label ", data[i].label, " outside the ", config.n_base_classes, " base classes");
  }

  TrainResult result{initial ? std::move(*initial) : init_head(config), {}};
  std::mt19937_64 order_rng(splitmix64(config.seed));
  std::mt19937_64 dropout_rng(splitmix64(config.seed ^ 0x5eedULL));
  Adam optimizer(result.params, config.learning_rate);
  HeadParams grads = zeros_like(result.params);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<const LabeledTokens*> batch;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    int batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch_size)) {
      batch.clear();
      for (std::size_t i = begin; i < std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size)); ++i)
        batch.push_back(&data[order[i]]);
      BatchResult r;
      try {
        r = batch_loss(result.params, batch, Mode::train, {config.dropout_rate, &dropout_rng}, &grads);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        fail(ErrorKind::numeric, "training diverged at epoch ", epoch, ", batch ", batch_index, ": ", e.what());
      }
      require(std::isfinite(r.loss), ErrorKind::numeric, "loss became non-finite at epoch ", epoch, ", batch ",
              batch_index);
      loss_sum += r.loss * static_cast<double>(batch.size());
      optimizer.step(result.params, grads);
      ++result.log.optimizer_steps;
      ++batch_index;
    }
    EpochRecord record;
    record.epoch = epoch;
    record.loss = loss_sum / static_cast<double>(data.size());
    record.accuracy = eval_accuracy(result.params, data);
    record.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.log.epochs.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check against central differences (eval mode)

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  double gradient_norm = 0.0;
};

// Relative error |a - n| / max(|a|, |n|, floor) per entry.
inline GradientCheckResult gradient_check(const HeadParams& params, const Matrix& tokens, int label,
                                          double epsilon = 1e-5, double floor = 1e-8) {
  require(epsilon >= 1e-6 && epsilon <= 1e-3, ErrorKind::usage, "epsilon must be in [1e-6, 1e-3]");
  const LabeledTokens sample{tokens, label};
  const LabeledTokens* batch[] = {&sample};
  HeadParams analytic = zeros_like(params);
  batch_loss(params, batch, Mode::eval, {}, &analytic);

  HeadParams probe = params;
  std::vector<Matrix*> probe_tensors;
  std::vector<const Matrix*> grad_tensors;
  std::vector<std::string> names;
  visit_params(probe, [&](const std::string& name, Matrix& m) {
    probe_tensors.push_back(&m);
    names.push_back(name);
  });
  visit_params(analytic, [&](const std::string&, const Matrix& m) { grad_tensors.push_back(&m); });

  GradientCheckResult out;
  double sq = 0.0;
  for (std::size_t t = 0; t < probe_tensors.size(); ++t) {
    Matrix& m = *probe_tensors[t];
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double saved = m.data()[i];
      m.data()[i] = saved + epsilon;
      const double plus = batch_loss(probe, batch, Mode::eval).loss;
      m.data()[i] = saved - epsilon;
      const double minus = batch_loss(probe, batch, Mode::eval).loss;
      m.data()[i] = saved;
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double a = grad_tensors[t]->data()[i];
      sq += a * a;
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > out.max_relative_error) {
        out.max_relative_error = rel;
        out.worst_parameter = names[t] + "[" + std::to_string(i) + "]";
      }
    }
  }
  out.gradient_norm = std::sqrt(sq);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: binary arrays + sidecar with config, hash and caller metadata.

inline void save_checkpoint(const fs::path& stem, const HeadParams& params, const HeadConfig& config,
                            const json& extra = json::object()) {
  ArrayBundle bundle;
  visit_params(params, [&](const std::string& name, const Matrix& m) { bundle.arrays.push_back({name, m}); });
  bundle.attributes = extra;
  bundle.attributes["kind"] = "aim-head";
  bundle.attributes["config"] = to_json(config);
  bundle.attributes["config_hash"] = to_hex(config_hash(config));
  bundle.attributes["seed"] = config.seed;
  bundle.attributes["params_checksum"] = to_hex(params_checksum(params));
  write_bundle(stem, bundle);
}

struct Checkpoint {
  HeadParams params;
  HeadConfig config;
  json attributes;
};

inline Checkpoint load_checkpoint(const fs::path& stem) {
  require(bundle_exists(stem), ErrorKind::storage, "checkpoint ", stem, ".{bin,meta} not found");
  ArrayBundle bundle = read_bundle(stem);
  require(bundle.attributes.value("kind", "") == "aim-head", ErrorKind::validation, stem,
          " is not a head checkpoint");
  Checkpoint ck;
  ck.attributes = bundle.attributes;
  try {
    ck.config = head_config_from_json(bundle.attributes.at("config"));
  } catch (const json::exception& e) {
    fail(ErrorKind::corruption, "checkpoint config unreadable: ", e.what());
  }
  ck.params = init_head(ck.config);
  visit_params(ck.params, [&](const std::string& name, Matrix& m) {
    const Matrix& stored = bundle.at(name);
    require(stored.rows() == m.rows() && stored.cols() == m.cols(), ErrorKind::corruption, "checkpoint tensor '",
            name, "' has the wrong shape");
    m = stored;
  });
  return ck;
}

}  // namespace aimfscil
