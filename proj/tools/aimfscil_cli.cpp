// aimfscil: batch entry points for feature extraction, base-session training,
// incremental sessions and block-importance analysis.
//
// Exit status: 0 success, 2 usage/validation, 3 runtime (numeric, contract,
// degeneracy), 4 I/O (decode, format, storage, corruption).

#include "aimfscil/aimfscil.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace {

using namespace aimfscil;

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitIo = 4;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
    case ErrorKind::validation: return kExitValidation;
    case ErrorKind::contract:
    case ErrorKind::numeric:
    case ErrorKind::degeneracy: return kExitRuntime;
    case ErrorKind::decode:
    case ErrorKind::format:
    case ErrorKind::storage:
    case ErrorKind::corruption: return kExitIo;
  }
  return kExitRuntime;
}

// Built-in defaults reproduce the reference hyperparameters.
struct RunConfig {
  std::string backbone = "vit-l-14";
  std::string weights;
  std::string manifest;
  std::string cache_root = "cache";
  std::string out = "runs";
  std::string run_id;
  std::uint64_t seed = 0;
  double alpha = 0.5;
  double tau = 16.0;
  double lr = 0.001;
  int batch_size = 128;
  int epochs = 20;
  double dropout = 0.5;
  int d1 = 0;  // 0 = token width
  int d2 = 0;
  bool strict = false;
  unsigned threads = 1;
};

json to_json(const RunConfig& c) {
  return {{"backbone", c.backbone}, {"weights", c.weights},       {"manifest", c.manifest}, {"cache_root", c.cache_root},
          {"out", c.out},           {"run_id", c.run_id},         {"seed", c.seed},         {"alpha", c.alpha},
          {"tau", c.tau},           {"lr", c.lr},                 {"batch_size", c.batch_size},
          {"epochs", c.epochs},     {"dropout", c.dropout},       {"d1", c.d1},             {"d2", c.d2},
          {"strict", c.strict},     {"threads", c.threads}};
}

void apply_config_file(RunConfig& c, const fs::path& path) {
  require(fs::exists(path), ErrorKind::storage, "config file ", path, " does not exist");
  json j;
  try {
    j = json::parse(aimfscil::detail::read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::validation, "config file ", path, " is not valid JSON: ", e.what());
  }
  static const std::set<std::string> known{"backbone", "weights", "manifest", "cache_root", "out", "run_id",
                                           "seed",     "alpha",   "tau",      "lr",         "batch_size",
                                           "epochs",   "dropout", "d1",       "d2",         "strict", "threads"};
  for (const auto& [key, value] : j.items())
    require(known.contains(key), ErrorKind::validation, "unknown key '", key, "' in config file ", path);
  try {
    c.backbone = j.value("backbone", c.backbone);
    c.weights = j.value("weights", c.weights);
    c.manifest = j.value("manifest", c.manifest);
    c.cache_root = j.value("cache_root", c.cache_root);
    c.out = j.value("out", c.out);
    c.run_id = j.value("run_id", c.run_id);
    c.seed = j.value("seed", c.seed);
    c.alpha = j.value("alpha", c.alpha);
    c.tau = j.value("tau", c.tau);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.dropout = j.value("dropout", c.dropout);
    c.d1 = j.value("d1", c.d1);
    c.d2 = j.value("d2", c.d2);
    c.strict = j.value("strict", c.strict);
    c.threads = j.value("threads", c.threads);
  } catch (const json::exception& e) {
    fail(ErrorKind::validation, "bad value in config file ", path, ": ", e.what());
  }
}

// Values given on the command line, applied last.
struct Overrides {
  std::string config_file;
  std::optional<std::string> backbone, weights, manifest, cache_root, out, run_id;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha, tau, lr, dropout;
  std::optional<int> batch_size, epochs, d1, d2;
  std::optional<unsigned> threads;
  bool strict = false;
};

void add_common_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_file, "JSON config file (flags override it)");
  cmd->add_option("--manifest", o.manifest, "session manifest (JSON)");
  cmd->add_option("--backbone", o.backbone, "vit-l-14, vit-b-32, vit-b-16 or stub-const|stub-hash|stub-gauss[:k=v,...]");
  cmd->add_option("--weights", o.weights, "safetensors weights for a CLIP backbone");
  cmd->add_option("--cache-root", o.cache_root, "feature cache root (env AIMFSCIL_CACHE_ROOT)");
  cmd->add_option("--out", o.out, "output root; results go to <out>/<run-id>/");
  cmd->add_option("--run-id", o.run_id, "run directory name (default: derived from the effective config)");
  cmd->add_option("--seed", o.seed, "training seed");
  cmd->add_option("--alpha", o.alpha, "prototype calibration strength in [0,1]");
  cmd->add_option("--tau", o.tau, "calibration sharpness (> 0)");
  cmd->add_option("--lr", o.lr, "learning rate");
  cmd->add_option("--batch-size", o.batch_size, "mini-batch size");
  cmd->add_option("--epochs", o.epochs, "training epochs");
  cmd->add_option("--dropout", o.dropout, "dropout rate in [0,1)");
  cmd->add_option("--d1", o.d1, "projected width (default: token width)");
  cmd->add_option("--d2", o.d2, "embedding width (default: token width)");
  cmd->add_option("--threads", o.threads, "extraction threads");
  cmd->add_flag("--strict", o.strict, "abort on the first undecodable image");
}

// flags > environment (cache root only) > config file > built-in defaults
RunConfig resolve(const Overrides& o) {
  RunConfig c;
  if (!o.config_file.empty()) apply_config_file(c, o.config_file);
  if (const char* env = std::getenv("AIMFSCIL_CACHE_ROOT"); env && *env) c.cache_root = env;
  auto set = [](auto& field, const auto& value) {
    if (value) field = *value;
  };
  set(c.backbone, o.backbone);
  set(c.weights, o.weights);
  set(c.manifest, o.manifest);
  set(c.cache_root, o.cache_root);
  set(c.out, o.out);
  set(c.run_id, o.run_id);
  set(c.seed, o.seed);
  set(c.alpha, o.alpha);
  set(c.tau, o.tau);
  set(c.lr, o.lr);
  set(c.dropout, o.dropout);
  set(c.batch_size, o.batch_size);
  set(c.epochs, o.epochs);
  set(c.d1, o.d1);
  set(c.d2, o.d2);
  set(c.threads, o.threads);
  if (o.strict) c.strict = true;
  return c;
}

SessionManifest require_manifest(const RunConfig& c) {
  require(!c.manifest.empty(), ErrorKind::usage, "--manifest is required");
  SessionManifest m = load_manifest(c.manifest);
  require(m.dataset.has_value(), ErrorKind::validation, "manifest ", c.manifest,
          " has no \"dataset\"; image paths are needed");
  return m;
}

// Run ids hash what determines the trained head: backbone, manifest bytes and
// training hyperparameters. Calibration settings get their own subdirectory.
std::string run_id_for(const RunConfig& c) {
  if (!c.run_id.empty()) return c.run_id;
  Fnv1a64 h;
  h.update(c.backbone).update("|");
  if (!c.manifest.empty() && fs::exists(c.manifest)) h.update(aimfscil::detail::read_file(c.manifest));
  const json training = {{"seed", c.seed}, {"lr", c.lr}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
                         {"dropout", c.dropout}, {"d1", c.d1}, {"d2", c.d2}};
  h.update(training.dump());
  return "run-" + to_hex(h.digest()).substr(0, 12);
}

fs::path run_dir(const RunConfig& c) { return fs::path(c.out) / run_id_for(c); }

std::string sessions_dir_name(const RunConfig& c) {
  std::ostringstream oss;
  oss << "sessions_alpha" << c.alpha << "_tau" << c.tau;
  return oss.str();
}

void echo_config(const fs::path& dir, const std::string& command, const RunConfig& c) {
  json j = to_json(c);
  j["command"] = command;
  j["resolved_run_id"] = run_id_for(c);
  aimfscil::detail::atomic_write(dir / ("effective_config." + command + ".json"), j.dump(2) + "\n");
}

std::vector<ImageRecord> manifest_records(const SessionManifest& m) {
  std::vector<ImageRecord> out;
  std::set<std::string> seen;
  for (const auto& s : m.sessions)
    for (const auto& c : s.classes)
      for (const auto* ids : {&c.support_ids, &c.test_ids})
        for (const auto& id : *ids)
          if (seen.insert(id).second) out.push_back(m.dataset->at(id));
  return out;
}

HeadConfig head_config_for(const RunConfig& c) {
  HeadConfig h;
  h.learning_rate = c.lr;
  h.batch_size = c.batch_size;
  h.epochs = c.epochs;
  h.dropout_rate = c.dropout;
  h.seed = c.seed;
  return h;
}

// ---------------------------------------------------------------------------

int cmd_extract(const RunConfig& c) {
  const SessionManifest m = require_manifest(c);
  const auto backbone = make_backbone(c.backbone, c.weights);
  FeatureExtractor extractor(*backbone, FeatureCache(c.cache_root));
  const ExtractionSummary summary = extractor.extract_all(manifest_records(m), c.strict, c.threads);
  json j = to_json(summary);
  j["weights_id"] = backbone->spec().weights_id;
  j["preprocess_id"] = backbone->spec().preprocess.id;
  j["cache_root"] = c.cache_root;
  const fs::path dir = run_dir(c);
  echo_config(dir, "extract", c);
  aimfscil::detail::atomic_write(dir / "extract_summary.json", j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_train_base(const RunConfig& c) {
  const SessionManifest m = require_manifest(c);
  const auto backbone = make_backbone(c.backbone, c.weights);
  const auto& spec = backbone->spec();
  CachedFeatureSource features(FeatureCache(c.cache_root), spec.weights_id, spec.preprocess.id);
  const auto data = base_training_set(m, features);

  HeadConfig hc = head_config_for(c);
  hc.n_blocks = spec.n_blocks;
  hc.d0 = spec.token_dim;
  hc.d1 = c.d1 > 0 ? c.d1 : spec.token_dim;
  hc.d2 = c.d2 > 0 ? c.d2 : spec.token_dim;
  hc.n_base_classes = static_cast<int>(m.base().classes.size());

  const fs::path dir = run_dir(c);
  echo_config(dir, "train-base", c);
  std::string log_text;
  const TrainResult trained = train_base(data, hc, std::nullopt, [&](const EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << "  loss " << r.loss << "  accuracy " << r.accuracy << "  " << r.wall_ms
              << " ms\n";
  });
  for (const auto& r : trained.log.epochs) log_text += to_json(r).dump() + "\n";
  aimfscil::detail::atomic_write(dir / "train_log.jsonl", log_text);

  std::vector<std::string> labels;
  for (const auto& cl : m.base().classes) labels.push_back(cl.label);
  save_checkpoint(dir / "head", trained.params, hc,
                  {{"backbone", spec.name},
                   {"weights_id", spec.weights_id},
                   {"preprocess_id", spec.preprocess.id},
                   {"base_labels", labels},
                   {"optimizer_steps", trained.log.optimizer_steps}});
  std::cout << (dir / "head").string() << "\n";
  return 0;
}

Checkpoint load_matching_checkpoint(const RunConfig& c, const std::string& checkpoint, const SessionManifest& m,
                                    const BackboneSpec& spec) {
  const fs::path stem = checkpoint.empty() ? run_dir(c) / "head" : fs::path(checkpoint);
  if (!bundle_exists(stem))
    fail(ErrorKind::storage, "checkpoint ", stem, " not found; run `train-base` with the same settings first");
  Checkpoint ck = load_checkpoint(stem);
  std::vector<std::string> labels;
  for (const auto& cl : m.base().classes) labels.push_back(cl.label);
  const auto stored = ck.attributes.value("base_labels", std::vector<std::string>{});
  require(stored == labels, ErrorKind::validation, "checkpoint base classes [", aimfscil::detail::join(stored),
          "] do not match manifest session 1 [", aimfscil::detail::join(labels), "]");
  require(ck.attributes.value("weights_id", "") == spec.weights_id, ErrorKind::validation,
          "checkpoint was trained on features from '", ck.attributes.value("weights_id", ""), "', not '",
          spec.weights_id, "'");
  return ck;
}

int cmd_run_sessions(const RunConfig& c, const std::string& checkpoint) {
  const SessionManifest m = require_manifest(c);
  const auto backbone = make_backbone(c.backbone, c.weights);
  const auto& spec = backbone->spec();
  Checkpoint ck = load_matching_checkpoint(c, checkpoint, m, spec);
  CachedFeatureSource features(FeatureCache(c.cache_root), spec.weights_id, spec.preprocess.id);
  const CalibrationConfig calibration{c.alpha, c.tau};
  validate(calibration);

  json snapshot = to_json(c);
  snapshot.erase("out");
  snapshot.erase("cache_root");
  snapshot.erase("threads");
  snapshot["head"] = to_json(ck.config);
  SessionState base = start_session_state(m, std::move(ck.params), features, calibration);
  const SessionRun run = run_all_sessions(std::move(base), m, features, snapshot, c.seed);

  const fs::path dir = run_dir(c) / sessions_dir_name(c);
  echo_config(dir, "run-sessions", c);
  write_report(dir, run.report);
  save_prototype_store(dir / "prototypes", run.states.back().store, calibration);
  std::cout << report_row_csv(run.report);
  return 0;
}

std::string file_safe(const std::string& label) {
  std::string out;
  for (unsigned char ch : label) out += std::isalnum(ch) || ch == '-' || ch == '_' || ch == '.' ? char(ch) : '_';
  return out;
}

int cmd_analyze_blocks(const RunConfig& c, const std::string& checkpoint, const std::string& split, bool csv) {
  require(split == "all" || split == "test" || split == "support", ErrorKind::usage,
          "--split must be all, test or support");
  const SessionManifest m = require_manifest(c);
  const auto backbone = make_backbone(c.backbone, c.weights);
  const auto& spec = backbone->spec();
  const Checkpoint ck = load_matching_checkpoint(c, checkpoint, m, spec);
  CachedFeatureSource features(FeatureCache(c.cache_root), spec.weights_id, spec.preprocess.id);
  const fs::path dir = run_dir(c) / "blocks";
  echo_config(run_dir(c), "analyze-blocks", c);
  for (const auto& s : m.sessions)
    for (const auto& cl : s.classes) {
      std::vector<std::string> ids;
      if (split != "test") ids.insert(ids.end(), cl.support_ids.begin(), cl.support_ids.end());
      if (split != "support") ids.insert(ids.end(), cl.test_ids.begin(), cl.test_ids.end());
      std::vector<Matrix> weights;
      for (const auto& id : ids) weights.push_back(scaled_weights_for(features.stack(id).tokens, ck.params));
      const FrequencyHistogram h = block_importance(weights, cl.label);
      aimfscil::detail::atomic_write(dir / ("hist_" + file_safe(cl.label) + ".json"), to_json(h).dump(2) + "\n");
      if (csv) aimfscil::detail::atomic_write(dir / ("hist_" + file_safe(cl.label) + ".csv"), histogram_csv(h));
    }
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_export_embeddings(const RunConfig& c, const std::string& checkpoint, const std::string& selector_text) {
  const SessionManifest m = require_manifest(c);
  const auto backbone = make_backbone(c.backbone, c.weights);
  const auto& spec = backbone->spec();
  const Checkpoint ck = load_matching_checkpoint(c, checkpoint, m, spec);
  CachedFeatureSource features(FeatureCache(c.cache_root), spec.weights_id, spec.preprocess.id);
  const BlockSelector selector = parse_block_selector(selector_text);
  selector.resolve(spec.n_blocks);
  const auto rows = export_embeddings(manifest_records(m), features, ck.params, selector);
  const fs::path stem = run_dir(c) / ("embeddings_" + file_safe(selector.describe()));
  write_embedding_table(stem, rows, selector);
  std::cout << stem.string() << "\n";
  return 0;
}

int cmd_make_manifest(const std::string& dataset_path, const std::string& schedule, const std::string& templ,
                      int shot, std::uint64_t seed, const std::string& out) {
  require(!out.empty(), ErrorKind::usage, "--output is required");
  const Dataset dataset = load_dataset(dataset_path);
  const SessionManifest schedule_manifest =
      templ.empty() ? bundled_schedule(schedule, shot) : load_manifest(templ, {.require_ids = false});
  const SessionManifest m = fill_manifest(schedule_manifest, dataset, seed);
  json j = to_json(m);
  const fs::path out_path(out);
  j["dataset"] = fs::proximate(fs::absolute(dataset_path), fs::absolute(out_path).parent_path()).generic_string();
  aimfscil::detail::atomic_write(out_path, j.dump(2) + "\n");
  std::cout << out_path.string() << "\n";
  return 0;
}

int cmd_gen_synthetic(const std::string& out, const std::string& schedule, SyntheticOptions opt, int shot) {
  require(!out.empty(), ErrorKind::usage, "--output is required");
  const SyntheticCorpus corpus = generate_synthetic_corpus(out, bundled_schedule(schedule, shot), opt);
  std::cout << corpus.manifest_path.string() << "\n";
  return 0;
}

int cmd_schedule(const std::string& name, int shot) {
  std::cout << to_json(bundled_schedule(name, shot)).dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot class-incremental generative-model attribution"};
  app.require_subcommand(1);

  Overrides o;
  std::string checkpoint, split = "all", selector = "low";
  bool csv = false;

  auto* extract = app.add_subcommand("extract", "populate the feature cache for every image in a manifest");
  add_common_flags(extract, o);
  auto* train = app.add_subcommand("train-base", "train the head on the base session");
  add_common_flags(train, o);
  auto* sessions = app.add_subcommand("run-sessions", "build prototypes, run incremental sessions, write reports");
  add_common_flags(sessions, o);
  sessions->add_option("--checkpoint", checkpoint, "head checkpoint stem (default <out>/<run-id>/head)");
  auto* blocks = app.add_subcommand("analyze-blocks", "per-class block-importance histograms");
  add_common_flags(blocks, o);
  blocks->add_option("--checkpoint", checkpoint, "head checkpoint stem");
  blocks->add_option("--split", split, "images to analyse: all, test or support");
  blocks->add_flag("--csv", csv, "also write CSV histograms");
  auto* exporter = app.add_subcommand("export-embeddings", "write block-level embeddings for visualisation");
  add_common_flags(exporter, o);
  exporter->add_option("--checkpoint", checkpoint, "head checkpoint stem");
  exporter->add_option("--selector", selector, "low, low:<k>, full or custom:<i,j,...>");

  std::string dataset_path, schedule = "default", templ, output;
  int shot = 5;
  std::uint64_t manifest_seed = 0;
  auto* make = app.add_subcommand("make-manifest", "sample a session manifest from a dataset manifest");
  make->add_option("--dataset", dataset_path, "dataset manifest (JSON lines or array)")->required();
  make->add_option("--schedule", schedule, "bundled schedule: default, prior-8, recent-8, prior-12, recent-12");
  make->add_option("--template", templ, "class-list manifest to use instead of a bundled schedule");
  make->add_option("--shot", shot, "support images per novel class");
  make->add_option("--seed", manifest_seed, "support sampling seed");
  make->add_option("--output", output, "manifest file to write")->required();

  SyntheticOptions syn;
  auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic flat-colour corpus with manifests");
  gen->add_option("--output", output, "directory to create")->required();
  gen->add_option("--schedule", schedule, "bundled schedule");
  gen->add_option("--shot", shot, "support images per novel class");
  gen->add_option("--seed", syn.seed, "generator seed");
  gen->add_option("--image-size", syn.image_size, "square image side in pixels");
  gen->add_option("--train-per-class", syn.train_per_base_class, "train images per base class");
  gen->add_option("--support-pool", syn.support_per_novel_class, "support images per novel class");
  gen->add_option("--test-per-class", syn.test_per_class, "test images per class");

  auto* sched = app.add_subcommand("schedule", "print a bundled class schedule as a manifest template");
  sched->add_option("--name", schedule, "default, prior-8, recent-8, prior-12 or recent-12");
  sched->add_option("--shot", shot, "support images per novel class");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (make->parsed()) return cmd_make_manifest(dataset_path, schedule, templ, shot, manifest_seed, output);
    if (gen->parsed()) return cmd_gen_synthetic(output, schedule, syn, shot);
    if (sched->parsed()) return cmd_schedule(schedule, shot);
    const RunConfig config = resolve(o);
    if (extract->parsed()) return cmd_extract(config);
    if (train->parsed()) return cmd_train_base(config);
    if (sessions->parsed()) return cmd_run_sessions(config, checkpoint);
    if (blocks->parsed()) return cmd_analyze_blocks(config, checkpoint, split, csv);
    if (exporter->parsed()) return cmd_export_embeddings(config, checkpoint, selector);
  } catch (const Error& e) {
    std::cerr << "aimfscil: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "aimfscil: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}
