#pragma once

// Few-shot class-incremental schedule: a trained base session followed by
// training-free incremental sessions that add calibrated prototypes.

#include "aimfscil/dataset.hpp"
#include "aimfscil/features.hpp"
#include "aimfscil/head.hpp"
#include "aimfscil/teen.hpp"

#include <memory>
#include <optional>
#include <random>
#include <set>

namespace aimfscil {

struct ClassSpec {
  std::string label;
  std::vector<std::string> support_ids;  // training images for base classes, K shots for novel ones
  std::vector<std::string> test_ids;
};

struct SessionSpec {
  int id = 1;
  int way = 0;
  std::optional<int> shot;  // unset for the base session
  std::vector<ClassSpec> classes;

  bool is_base() const { return id == 1; }
};

struct SessionManifest {
  std::string name;
  std::vector<SessionSpec> sessions;
  std::optional<Dataset> dataset;

  const SessionSpec& session(int id) const {
    for (const auto& s : sessions)
      if (s.id == id) return s;
    fail(ErrorKind::validation, "manifest has no session ", id);
  }
  const SessionSpec& base() const { return session(1); }

  std::vector<std::string> labels_through(int session_id) const {
    std::vector<std::string> out;
    for (const auto& s : sessions)
      if (s.id <= session_id)
        for (const auto& c : s.classes) out.push_back(c.label);
    return out;
  }

  std::size_t class_count() const { return labels_through(static_cast<int>(sessions.size())).size(); }
};

struct ManifestOptions {
  // Schedule templates (class lists only) are loaded with require_ids = false.
  bool require_ids = true;
};

namespace detail {

inline std::string join(const std::vector<std::string>& items, std::string_view sep = ", ") {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? std::string(sep) : "") + items[i];
  return out;
}

}  // namespace detail

inline void validate(const SessionManifest& m, const ManifestOptions& options = {}) {
  require(!m.sessions.empty(), ErrorKind::validation, "manifest has no sessions");
  for (std::size_t i = 0; i < m.sessions.size(); ++i)
    require(m.sessions[i].id == static_cast<int>(i) + 1, ErrorKind::validation,
            "session ids must run 1..", m.sessions.size(), " without gaps; found ", m.sessions[i].id, " at position ",
            i + 1);

  std::map<std::string, std::vector<int>> sessions_of;
  std::map<std::string, std::string> role_of_image;
  std::vector<std::string> problems;
  for (const auto& s : m.sessions) {
    if (s.classes.empty()) problems.push_back("session " + std::to_string(s.id) + " has no classes");
    if (s.way != static_cast<int>(s.classes.size()))
      problems.push_back("session " + std::to_string(s.id) + " declares way=" + std::to_string(s.way) + " but lists " +
                         std::to_string(s.classes.size()) + " classes");
    if (!s.is_base() && !s.shot) problems.push_back("incremental session " + std::to_string(s.id) + " has no shot");
    if (s.shot && *s.shot < 1) problems.push_back("session " + std::to_string(s.id) + " has shot < 1");
    for (const auto& c : s.classes) {
      sessions_of[c.label].push_back(s.id);
      if (!options.require_ids) continue;
      if (c.support_ids.empty())
        problems.push_back("class '" + c.label + "' in session " + std::to_string(s.id) + " has no support/train ids");
      if (c.test_ids.empty())
        problems.push_back("class '" + c.label + "' in session " + std::to_string(s.id) + " has no test ids");
      if (s.shot && !s.is_base() && static_cast<int>(c.support_ids.size()) != *s.shot)
        problems.push_back("class '" + c.label + "' has " + std::to_string(c.support_ids.size()) +
                           " support ids, session " + std::to_string(s.id) + " requires shot=" +
                           std::to_string(*s.shot));
      auto check_image = [&](const std::string& id, Split expected) {
        const std::string role = c.label + "/" + to_string(expected);
        const auto [it, inserted] = role_of_image.emplace(id, role);
        if (!inserted) problems.push_back("image '" + id + "' is used as both " + it->second + " and " + role);
        if (!m.dataset) return;
        if (!m.dataset->contains(id)) {
          problems.push_back("image '" + id + "' (class '" + c.label + "') is not in the dataset manifest");
          return;
        }
        const auto& r = m.dataset->at(id);
        if (r.class_label != c.label)
          problems.push_back("image '" + id + "' is labelled '" + r.class_label + "' but listed under '" + c.label +
                             "'");
        if (r.session_id != s.id)
          problems.push_back("image '" + id + "' has session_id " + std::to_string(r.session_id) + ", class '" +
                             c.label + "' belongs to session " + std::to_string(s.id));
        if (r.split != expected)
          problems.push_back("image '" + id + "' has split '" + to_string(r.split) + "', expected '" +
                             to_string(expected) + "'");
      };
      for (const auto& id : c.support_ids) check_image(id, s.is_base() ? Split::train : Split::support);
      for (const auto& id : c.test_ids) check_image(id, Split::test);
    }
  }
  std::vector<std::string> duplicated;
  for (const auto& [label, ids] : sessions_of)
    if (ids.size() > 1) {
      std::vector<std::string> where;
      for (int id : ids) where.push_back(std::to_string(id));
      duplicated.push_back("'" + label + "' (sessions " + detail::join(where) + ")");
    }
  if (!duplicated.empty()) problems.insert(problems.begin(), "classes listed more than once: " + detail::join(duplicated));
  require(problems.empty(), ErrorKind::validation, "invalid session manifest", m.name.empty() ? "" : " '" + m.name + "'",
          ":\n  ", detail::join(problems, "\n  "));
}

inline json to_json(const SessionManifest& m) {
  json sessions = json::array();
  for (const auto& s : m.sessions) {
    json classes = json::array();
    for (const auto& c : s.classes)
      classes.push_back({{"label", c.label}, {"support_ids", c.support_ids}, {"test_ids", c.test_ids}});
    json js = {{"id", s.id}, {"way", s.way}, {"classes", classes}};
    js["shot"] = s.shot ? json(*s.shot) : json(nullptr);
    sessions.push_back(js);
  }
  json out = {{"sessions", sessions}};
  if (!m.name.empty()) out["name"] = m.name;
  return out;
}

// `dataset` may be a path (relative to base_dir) or an inline array of records.
inline SessionManifest manifest_from_json(const json& j, const fs::path& base_dir, const ManifestOptions& options = {}) {
  SessionManifest m;
  try {
    m.name = j.value("name", "");
    for (const auto& js : j.at("sessions")) {
      SessionSpec s;
      s.id = js.at("id").get<int>();
      if (js.contains("shot") && !js.at("shot").is_null()) s.shot = js.at("shot").get<int>();
      for (const auto& jc : js.at("classes")) {
        ClassSpec c;
        if (jc.is_string()) {
          c.label = jc.get<std::string>();
        } else {
          c.label = jc.at("label").get<std::string>();
          c.support_ids = jc.value("support_ids", std::vector<std::string>{});
          c.test_ids = jc.value("test_ids", std::vector<std::string>{});
        }
        s.classes.push_back(std::move(c));
      }
      s.way = js.value("way", static_cast<int>(s.classes.size()));
      m.sessions.push_back(std::move(s));
    }
    std::sort(m.sessions.begin(), m.sessions.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      if (d.is_string()) {
        m.dataset = load_dataset(base_dir / d.get<std::string>());
      } else {
        std::vector<ImageRecord> records;
        for (const auto& r : d) records.push_back(record_from_json(r, base_dir));
        m.dataset = Dataset(std::move(records));
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::validation, "malformed session manifest: ", e.what());
  }
  validate(m, options);
  return m;
}

inline SessionManifest load_manifest(const fs::path& path, const ManifestOptions& options = {}) {
  require(fs::exists(path), ErrorKind::storage, "manifest ", path, " does not exist");
  json j;
  try {
    j = json::parse(detail::read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::validation, "manifest ", path, " is not valid JSON: ", e.what());
  }
  return manifest_from_json(j, path.parent_path(), options);
}

// ---------------------------------------------------------------------------
// Bundled class schedules. Incremental sessions are identical in all of them.

inline const std::vector<std::string>& base_gan_models() {
  static const std::vector<std::string> v{"BEGAN",  "CramerGAN", "ProGAN",     "CycleGAN", "MMDGAN",  "SNGAN",
                                          "RelGAN", "StarGAN",   "BigGAN",     "GANimation", "S3GAN", "StyleGAN",
                                          "GauGAN", "STGAN",     "AttGAN",     "StyleGAN2"};
  return v;
}

inline const std::vector<std::vector<std::string>>& incremental_models() {
  static const std::vector<std::vector<std::string>> v{{"DDPM", "InfoMaxGAN"},
                                                        {"DALL-E", "Improved Diffusion"},
                                                        {"Guided Diffusion", "Glide"},
                                                        {"DALL-E 2", "VQ Diffusion"},
                                                        {"Stable Diffusion 1.4", "Stable Diffusion 1.5"},
                                                        {"Midjourney", "Wukong"}};
  return v;
}

inline std::vector<std::string> schedule_names() { return {"default", "prior-8", "recent-8", "prior-12", "recent-12"}; }

// Session 1 class list for a bundled schedule.
inline std::vector<std::string> bundled_base_classes(std::string_view name) {
  const auto& all = base_gan_models();
  auto slice = [&](std::size_t from, std::size_t count) {
    return std::vector<std::string>(all.begin() + static_cast<std::ptrdiff_t>(from),
                                    all.begin() + static_cast<std::ptrdiff_t>(from + count));
  };
  if (name == "default") return all;
  if (name == "prior-8") return slice(0, 8);
  if (name == "recent-8") return slice(8, 8);
  if (name == "prior-12") return slice(0, 12);
  if (name == "recent-12") return slice(4, 12);
  fail(ErrorKind::usage, "unknown schedule '", name, "' (known: ", detail::join(schedule_names()), ")");
}

// Class-list template (no image ids) for a bundled schedule.
inline SessionManifest bundled_schedule(std::string_view name, int shot = 5) {
  SessionManifest m;
  m.name = std::string(name);
  SessionSpec base{1, 0, std::nullopt, {}};
  for (const auto& l : bundled_base_classes(name)) base.classes.push_back({l, {}, {}});
  base.way = static_cast<int>(base.classes.size());
  m.sessions.push_back(std::move(base));
  int id = 2;
  for (const auto& group : incremental_models()) {
    SessionSpec s{id++, static_cast<int>(group.size()), shot, {}};
    for (const auto& l : group) s.classes.push_back({l, {}, {}});
    m.sessions.push_back(std::move(s));
  }
  validate(m, {.require_ids = false});
  return m;
}

// Fills a class-list template from a dataset: base classes take every train
// image, novel classes draw `shot` support images with a seeded sampler, and
// every class takes all of its test images. Ids are kept in dataset order.
inline SessionManifest fill_manifest(const SessionManifest& schedule, const Dataset& dataset, std::uint64_t seed) {
  SessionManifest m = schedule;
  std::mt19937_64 rng(seed);
  for (auto& s : m.sessions)
    for (auto& c : s.classes) {
      std::vector<std::string> pool, tests;
      for (const auto& r : dataset.records()) {
        if (r.class_label != c.label) continue;
        if (r.split == Split::test) tests.push_back(r.image_id);
        else if (r.split == (s.is_base() ? Split::train : Split::support)) pool.push_back(r.image_id);
      }
      if (!s.is_base() && s.shot) {
        require(static_cast<int>(pool.size()) >= *s.shot, ErrorKind::validation, "class '", c.label, "' has only ",
                pool.size(), " support images, need ", *s.shot);
        std::vector<std::string> picked;
        std::sample(pool.begin(), pool.end(), std::back_inserter(picked), *s.shot, rng);
        pool = std::move(picked);
      }
      c.support_ids = std::move(pool);
      c.test_ids = std::move(tests);
    }
  m.dataset = dataset;
  validate(m);
  return m;
}

// ---------------------------------------------------------------------------
// Session state

class EmbeddingCache {
 public:
  const Vector& get(const std::string& image_id, const FeatureSource& features, const HeadParams& params) {
    auto it = cache_.find(image_id);
    if (it == cache_.end()) it = cache_.emplace(image_id, embed(features.stack(image_id).tokens, params)).first;
    return it->second;
  }

 private:
  std::map<std::string, Vector> cache_;
};

struct SessionState {
  int current_session = 0;
  HeadParams head;
  PrototypeStore store;
  std::vector<std::string> seen_classes;
  CalibrationConfig calibration;
  // Shared between states derived from each other; valid because the head is frozen.
  std::shared_ptr<EmbeddingCache> embeddings = std::make_shared<EmbeddingCache>();
};

struct BaseSessionResult {
  SessionState state;
  TrainingLog log;
};

inline std::vector<LabeledTokens> base_training_set(const SessionManifest& manifest, const FeatureSource& features) {
  const auto& base = manifest.base();
  std::vector<LabeledTokens> data;
  for (std::size_t k = 0; k < base.classes.size(); ++k) {
    require(!base.classes[k].support_ids.empty(), ErrorKind::usage, "base class '", base.classes[k].label,
            "' has no training images");
    for (const auto& id : base.classes[k].support_ids)
      data.push_back({features.stack(id).tokens, static_cast<int>(k)});
  }
  return data;
}

// Base prototypes from eval-mode embeddings of every base training image.
inline SessionState start_session_state(const SessionManifest& manifest, HeadParams head,
                                        const FeatureSource& features, const CalibrationConfig& calibration) {
  validate(calibration);
  const auto& base = manifest.base();
  require(!base.classes.empty(), ErrorKind::usage, "base session has no classes");
  require(head.classifier.out_dim() == static_cast<Eigen::Index>(base.classes.size()), ErrorKind::validation,
          "head was trained for ", head.classifier.out_dim(), " base classes, manifest has ", base.classes.size());
  SessionState state;
  state.current_session = 1;
  state.head = std::move(head);
  state.calibration = calibration;
  std::vector<Prototype> prototypes;
  for (const auto& c : base.classes) {
    require(!c.support_ids.empty(), ErrorKind::usage, "base class '", c.label, "' has no training images");
    std::vector<Vector> e;
    for (const auto& id : c.support_ids) e.push_back(state.embeddings->get(id, features, state.head));
    prototypes.push_back(compute_prototype(e, c.label, 1));
    state.seen_classes.push_back(c.label);
  }
  state.store = PrototypeStore(std::move(prototypes));
  return state;
}

inline BaseSessionResult run_base_session(const SessionManifest& manifest, HeadConfig config,
                                          const FeatureSource& features, const CalibrationConfig& calibration = {}) {
  const auto data = base_training_set(manifest, features);
  require(!data.empty(), ErrorKind::usage, "base session has no training images");
  config.n_base_classes = static_cast<int>(manifest.base().classes.size());
  config.n_blocks = static_cast<int>(data.front().tokens.rows());
  config.d0 = static_cast<int>(data.front().tokens.cols());
  TrainResult trained = train_base(data, config);
  return {start_session_state(manifest, std::move(trained.params), features, calibration), std::move(trained.log)};
}

// Training-free: prototypes from the K support shots, calibrated toward the
// base prototypes. The head is never touched.
inline SessionState run_incremental_session(const SessionState& state, const SessionSpec& session,
                                            const FeatureSource& features) {
  require(state.current_session >= 1, ErrorKind::usage, "run the base session first");
  require(session.id == state.current_session + 1, ErrorKind::validation, "session ", session.id,
          " cannot follow session ", state.current_session);
  require(!session.is_base(), ErrorKind::validation, "session 1 is the base session");
  require(static_cast<int>(session.classes.size()) == session.way, ErrorKind::validation, "session ", session.id,
          " declares way=", session.way, " but lists ", session.classes.size(), " classes");
  SessionState next = state;
  for (const auto& c : session.classes) {
    require(!next.store.contains(c.label), ErrorKind::validation, "class '", c.label, "' was already learned");
    require(session.shot && static_cast<int>(c.support_ids.size()) == *session.shot, ErrorKind::validation,
            "class '", c.label, "' has ", c.support_ids.size(), " support images; session ", session.id,
            " requires ", session.shot.value_or(0));
    std::vector<Vector> e;
    for (const auto& id : c.support_ids) e.push_back(next.embeddings->get(id, features, next.head));
    const Prototype raw = compute_prototype(e, c.label, session.id);
    next.store.insert(calibrate_prototype(next.store, raw, next.calibration));
    next.seen_classes.push_back(c.label);
  }
  next.current_session = session.id;
  return next;
}

// ---------------------------------------------------------------------------
// Evaluation

struct ClassResult {
  std::string label;
  int correct = 0;
  int total = 0;
  double accuracy() const { return total ? 100.0 * correct / total : 0.0; }
};

struct SessionEval {
  int session_id = 0;
  int correct = 0;
  int total = 0;
  std::vector<ClassResult> per_class;  // seen-class order
  double accuracy() const { return total ? 100.0 * correct / total : 0.0; }
};

// Micro-averaged accuracy over the test images of every class seen so far.
inline SessionEval evaluate_session(const SessionState& state, const SessionManifest& manifest,
                                    const FeatureSource& features) {
  SessionEval out;
  out.session_id = state.current_session;
  for (const auto& label : state.seen_classes) {
    const ClassSpec* spec = nullptr;
    for (const auto& s : manifest.sessions)
      for (const auto& c : s.classes)
        if (c.label == label) spec = &c;
    require(spec != nullptr, ErrorKind::validation, "seen class '", label, "' is not in the manifest");
    require(!spec->test_ids.empty(), ErrorKind::validation, "class '", label, "' has an empty test set");
    ClassResult r{label, 0, 0};
    for (const auto& id : spec->test_ids) {
      const Vector& e = state.embeddings->get(id, features, state.head);
      if (classify(e, state.store).class_label == label) ++r.correct;
      ++r.total;
    }
    out.correct += r.correct;
    out.total += r.total;
    out.per_class.push_back(std::move(r));
  }
  return out;
}

struct EvalReport {
  std::vector<SessionEval> sessions;  // sorted by id, contiguous from 1
  json config = json::object();
  std::uint64_t seed = 0;

  std::vector<double> row() const {
    std::vector<double> r;
    for (const auto& s : sessions) r.push_back(s.accuracy());
    return r;
  }
};

inline EvalReport aggregate_report(std::vector<SessionEval> entries, json config = json::object(),
                                   std::uint64_t seed = 0) {
  require(!entries.empty(), ErrorKind::validation, "no session results to aggregate");
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.session_id < b.session_id; });
  for (std::size_t i = 0; i < entries.size(); ++i)
    require(entries[i].session_id == static_cast<int>(i) + 1, ErrorKind::validation,
            "session results must cover 1..", entries.size(), " without gaps; found session ", entries[i].session_id);
  return {std::move(entries), std::move(config), seed};
}

inline json to_json(const EvalReport& r) {
  json sessions = json::array();
  json row = json::array();
  std::vector<std::string> labels;
  for (const auto& s : r.sessions) {
    sessions.push_back(s.session_id);
    row.push_back(s.accuracy());
    for (const auto& c : s.per_class)
      if (std::find(labels.begin(), labels.end(), c.label) == labels.end()) labels.push_back(c.label);
  }
  json matrix = json::array();
  for (const auto& label : labels) {
    json cells = json::array();
    for (const auto& s : r.sessions) {
      const auto it =
          std::find_if(s.per_class.begin(), s.per_class.end(), [&](const auto& c) { return c.label == label; });
      cells.push_back(it == s.per_class.end() ? json(nullptr) : json(it->accuracy()));
    }
    matrix.push_back({{"label", label}, {"accuracy", cells}});
  }
  json totals = json::array();
  for (const auto& s : r.sessions) totals.push_back({{"session", s.session_id}, {"correct", s.correct}, {"total", s.total}});
  return {{"sessions", sessions}, {"accuracy", row},   {"counts", totals},
          {"per_class", matrix},  {"config", r.config}, {"seed", r.seed}};
}

namespace detail {
inline std::string fixed(double v, int digits = 4) {
  std::ostringstream oss;
  oss << std::fixed << std::setprecision(digits) << v;
  return oss.str();
}
}  // namespace detail

// Header row of session ids, then one accuracy line.
inline std::string report_row_csv(const EvalReport& r) {
  std::string head = "session", row = "accuracy";
  for (const auto& s : r.sessions) {
    head += "," + std::to_string(s.session_id);
    row += "," + detail::fixed(s.accuracy());
  }
  return head + "\n" + row + "\n";
}

// One line per class, one column per session; empty before the class is seen.
inline std::string report_per_class_csv(const EvalReport& r) {
  const json j = to_json(r);
  std::string out = "label";
  for (const auto& s : r.sessions) out += ",session_" + std::to_string(s.session_id);
  out += "\n";
  for (const auto& entry : j.at("per_class")) {
    out += entry.at("label").get<std::string>();
    for (const auto& cell : entry.at("accuracy")) out += "," + (cell.is_null() ? std::string() : detail::fixed(cell.get<double>()));
    out += "\n";
  }
  return out;
}

inline void write_report(const fs::path& dir, const EvalReport& report) {
  detail::atomic_write(dir / "report.json", to_json(report).dump(2) + "\n");
  detail::atomic_write(dir / "report.csv", report_row_csv(report));
  detail::atomic_write(dir / "per_class.csv", report_per_class_csv(report));
}

struct SessionRun {
  std::vector<SessionState> states;  // one per session, states[s-1] after session s
  EvalReport report;
};

// Base state -> every incremental session in order, evaluating after each.
inline SessionRun run_all_sessions(SessionState base_state, const SessionManifest& manifest,
                                   const FeatureSource& features, json config = json::object(),
                                   std::uint64_t seed = 0) {
  SessionRun run;
  std::vector<SessionEval> evals;
  run.states.push_back(std::move(base_state));
  evals.push_back(evaluate_session(run.states.back(), manifest, features));
  for (const auto& s : manifest.sessions) {
    if (s.is_base()) continue;
    run.states.push_back(run_incremental_session(run.states.back(), s, features));
    evals.push_back(evaluate_session(run.states.back(), manifest, features));
  }
  run.report = aggregate_report(std::move(evals), std::move(config), seed);
  return run;
}

}  // namespace aimfscil
