#pragma once

// Prototype bookkeeping, training-free calibration of novel-class prototypes
// toward the base prototypes, and cosine nearest-prototype classification.

#include "aimfscil/array_bundle.hpp"

#include <map>
#include <span>

namespace aimfscil {

struct Prototype {
  std::string class_label;
  Vector vector;
  int session_id = 1;
  bool calibrated = false;
};

struct CalibrationConfig {
  double alpha = 0.5;
  double tau = 16.0;
};

inline void validate(const CalibrationConfig& c) {
  require(c.alpha >= 0.0 && c.alpha <= 1.0, ErrorKind::usage, "alpha must be in [0, 1], got ", c.alpha);
  require(c.tau > 0.0 && std::isfinite(c.tau), ErrorKind::usage, "tau must be positive, got ", c.tau);
}

namespace detail {

inline double checked_norm(const Vector& v, std::string_view what) {
  require(v.allFinite(), ErrorKind::numeric, what, " is non-finite");
  const double n = v.norm();
  require(n > 0.0, ErrorKind::degeneracy, what, " is the zero vector; cosine similarity is undefined");
  return n;
}

}  // namespace detail

inline Prototype compute_prototype(std::span<const Vector> embeddings, std::string label, int session_id) {
  require(!embeddings.empty(), ErrorKind::usage, "cannot build a prototype for '", label, "' from no embeddings");
  const Eigen::Index dim = embeddings.front().size();
  Vector sum = Vector::Zero(dim);
  for (const auto& e : embeddings) {
    require(e.size() == dim, ErrorKind::contract, "embeddings for '", label, "' differ in dimension");
    sum += e;
  }
  Prototype p{std::move(label), sum / static_cast<double>(embeddings.size()), session_id, false};
  detail::checked_norm(p.vector, "prototype of '" + p.class_label + "'");
  return p;
}

// tau * cos(a, b)
inline double similarity(const Vector& a, const Vector& b, const CalibrationConfig& config) {
  require(a.size() == b.size(), ErrorKind::contract, "prototype dimensions differ");
  const double na = detail::checked_norm(a, "prototype");
  const double nb = detail::checked_norm(b, "prototype");
  const double cosine = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  return config.tau * cosine;
}

inline double similarity(const Prototype& base, const Prototype& novel, const CalibrationConfig& config) {
  return similarity(base.vector, novel.vector, config);
}

class PrototypeStore {
 public:
  PrototypeStore() = default;

  // The first insertions define the base classes.
  explicit PrototypeStore(std::vector<Prototype> base) {
    require(!base.empty(), ErrorKind::usage, "a prototype store needs at least one base class");
    for (auto& p : base) {
      require(!p.calibrated, ErrorKind::usage, "base prototype '", p.class_label, "' must not be calibrated");
      base_labels_.push_back(p.class_label);
      insert(std::move(p));
    }
  }

  void insert(Prototype p) {
    require(!index_.contains(p.class_label), ErrorKind::validation, "class '", p.class_label,
            "' is already in the prototype store");
    detail::checked_norm(p.vector, "prototype of '" + p.class_label + "'");
    if (!prototypes_.empty() && p.vector.size() != prototypes_.front().vector.size())
      fail(ErrorKind::contract, "prototype '", p.class_label, "' has dimension ", p.vector.size(), ", store uses ",
           prototypes_.front().vector.size());
    index_.emplace(p.class_label, prototypes_.size());
    prototypes_.push_back(std::move(p));
  }

  const std::vector<Prototype>& prototypes() const { return prototypes_; }
  const std::vector<std::string>& base_labels() const { return base_labels_; }
  std::size_t size() const { return prototypes_.size(); }
  bool empty() const { return prototypes_.empty(); }
  bool contains(const std::string& label) const { return index_.contains(label); }

  const Prototype& at(const std::string& label) const {
    const auto it = index_.find(label);
    require(it != index_.end(), ErrorKind::validation, "no prototype for class '", label, "'");
    return prototypes_[it->second];
  }

  std::vector<const Prototype*> base() const {
    std::vector<const Prototype*> out;
    for (const auto& l : base_labels_) out.push_back(&at(l));
    return out;
  }

 private:
  std::vector<Prototype> prototypes_;
  std::vector<std::string> base_labels_;
  std::map<std::string, std::size_t> index_;
};

// Softmax over base classes of tau-scaled cosine similarity to `novel`.
inline Vector calibration_weights(const PrototypeStore& store, const Prototype& novel,
                                  const CalibrationConfig& config) {
  validate(config);
  const auto base = store.base();
  require(!base.empty(), ErrorKind::usage, "calibration needs at least one base prototype");
  Vector s(static_cast<Eigen::Index>(base.size()));
  for (std::size_t b = 0; b < base.size(); ++b) s(static_cast<Eigen::Index>(b)) = similarity(*base[b], novel, config);
  Vector w = (s.array() - s.maxCoeff()).exp();
  return w / w.sum();
}

// alpha * t_n + (1 - alpha) * sum_b w_b t_b. Base prototypes are read only.
inline Prototype calibrate_prototype(const PrototypeStore& store, const Prototype& novel,
                                     const CalibrationConfig& config) {
  require(!novel.calibrated, ErrorKind::usage, "prototype '", novel.class_label, "' is already calibrated");
  const Vector w = calibration_weights(store, novel, config);
  const auto base = store.base();
  Vector shift = Vector::Zero(novel.vector.size());
  for (std::size_t b = 0; b < base.size(); ++b) shift += w(static_cast<Eigen::Index>(b)) * base[b]->vector;
  Prototype out = novel;
  out.vector = config.alpha * novel.vector + (1.0 - config.alpha) * shift;
  out.calibrated = true;
  detail::checked_norm(out.vector, "calibrated prototype of '" + out.class_label + "'");
  return out;
}

struct Classification {
  std::string class_label;
  std::size_t index = 0;
  Vector scores;  // cosine similarity to every prototype, store order
};

// Highest cosine wins; ties go to the earliest prototype in store order.
inline Classification classify(const Vector& embedding, const PrototypeStore& store) {
  require(!store.empty(), ErrorKind::usage, "cannot classify against an empty prototype store");
  const double ne = detail::checked_norm(embedding, "embedding");
  Classification out;
  out.scores.resize(static_cast<Eigen::Index>(store.size()));
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < store.size(); ++k) {
    const Vector& p = store.prototypes()[k].vector;
    require(p.size() == embedding.size(), ErrorKind::contract, "embedding dimension ", embedding.size(),
            " does not match prototypes (", p.size(), ")");
    const double c = embedding.dot(p) / (ne * p.norm());
    out.scores(static_cast<Eigen::Index>(k)) = c;
    if (c > best) {
      best = c;
      out.index = k;
    }
  }
  out.class_label = store.prototypes()[out.index].class_label;
  return out;
}

inline void save_prototype_store(const fs::path& stem, const PrototypeStore& store, const CalibrationConfig& config) {
  ArrayBundle bundle;
  json entries = json::array();
  for (const auto& p : store.prototypes()) {
    bundle.arrays.push_back({"proto." + std::to_string(entries.size()), Matrix(p.vector.transpose())});
    entries.push_back({{"class_label", p.class_label}, {"session_id", p.session_id}, {"calibrated", p.calibrated}});
  }
  bundle.attributes = {{"kind", "prototype-store"},
                       {"prototypes", entries},
                       {"base_labels", store.base_labels()},
                       {"calibration", {{"alpha", config.alpha}, {"tau", config.tau}}}};
  write_bundle(stem, bundle);
}

inline std::pair<PrototypeStore, CalibrationConfig> load_prototype_store(const fs::path& stem) {
  ArrayBundle bundle = read_bundle(stem);
  const json& a = bundle.attributes;
  require(a.value("kind", "") == "prototype-store", ErrorKind::validation, stem, " is not a prototype store");
  try {
    const auto base_labels = a.at("base_labels").get<std::vector<std::string>>();
    std::vector<Prototype> all;
    std::size_t k = 0;
    for (const auto& e : a.at("prototypes")) {
      all.push_back({e.at("class_label").get<std::string>(),
                     bundle.at("proto." + std::to_string(k++)).row(0).transpose(), e.at("session_id").get<int>(),
                     e.at("calibrated").get<bool>()});
    }
    require(all.size() >= base_labels.size(), ErrorKind::corruption, "prototype store is truncated");
    std::vector<Prototype> base(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(base_labels.size()));
    for (std::size_t i = 0; i < base.size(); ++i)
      require(base[i].class_label == base_labels[i], ErrorKind::corruption, "base prototypes out of order");
    PrototypeStore store(std::move(base));
    for (std::size_t i = base_labels.size(); i < all.size(); ++i) store.insert(std::move(all[i]));
    CalibrationConfig config{a.at("calibration").at("alpha").get<double>(), a.at("calibration").at("tau").get<double>()};
    return {std::move(store), config};
  } catch (const json::exception& e) {
    fail(ErrorKind::corruption, "malformed prototype store ", stem, ": ", e.what());
  }
}

}  // namespace aimfscil
