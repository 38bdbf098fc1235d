#include "test_support.hpp"

#include <cstdlib>
#include <fstream>

using namespace aimfscil;
using aimfscil::testing::run_cli;
using aimfscil::testing::slurp;
using aimfscil::testing::TempDir;

namespace {

constexpr const char* kTraining = " --epochs 30 --batch-size 16 --dropout 0.1";

struct Corpus {
  TempDir dir;
  fs::path manifest;

  explicit Corpus(const std::string& extra = "--train-per-class 12 --support-pool 5 --test-per-class 3") {
    std::string out;
    const int code = run_cli("gen-synthetic --output \"" + (dir / "corpus").string() + "\" " + extra, &out);
    EXPECT_EQ(code, 0) << out;
    manifest = dir / "corpus" / "manifest.json";
  }

  std::string flags(const std::string& backbone = "stub-gauss") const { return flags_for(manifest, backbone); }

  std::string flags_for(const fs::path& m, const std::string& backbone = "stub-gauss") const {
    return " --manifest \"" + m.string() + "\" --backbone " + backbone + " --cache-root \"" +
           (dir / "cache").string() + "\" --out \"" + (dir / "runs").string() + "\" --run-id r";
  }

  fs::path run() const { return dir / "runs" / "r"; }

  json extract(const std::string& backbone = "stub-gauss", int expected_code = 0) const {
    std::string out;
    EXPECT_EQ(run_cli("extract" + flags(backbone), &out), expected_code) << out;
    return expected_code == 0 ? json::parse(slurp(run() / "extract_summary.json")) : json();
  }

  // Manifest with the same dataset but only the first `sessions` sessions
  // and, optionally, the first `classes` classes of each.
  fs::path truncated(const std::string& name, std::size_t sessions, std::size_t classes = 100) const {
    json j = json::parse(slurp(manifest));
    j["sessions"].erase(j["sessions"].begin() + static_cast<std::ptrdiff_t>(sessions), j["sessions"].end());
    for (auto& s : j["sessions"])
      if (s["classes"].size() > classes)
        s["classes"].erase(s["classes"].begin() + static_cast<std::ptrdiff_t>(classes), s["classes"].end());
    for (auto& s : j["sessions"]) s["way"] = s["classes"].size();
    const fs::path p = dir / "corpus" / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }
};

std::vector<std::string> csv_line(const std::string& text, int index) {
  std::istringstream in(text);
  std::string line;
  for (int i = 0; i <= index; ++i) std::getline(in, line);
  std::vector<std::string> cells;
  std::istringstream row(line);
  for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
  return cells;
}

}  // namespace

TEST(Cli, ExtractPopulatesCacheOnceThenHits) {
  Corpus c;
  const json first = c.extract();
  EXPECT_EQ(first.at("requested"), 28 * 3 + 16 * 12 + 12 * 5);
  EXPECT_EQ(first.at("extracted"), first.at("requested"));
  EXPECT_TRUE(first.at("skipped").empty());
  const json second = c.extract();
  EXPECT_EQ(second.at("extracted"), 0);
  EXPECT_EQ(second.at("cache_hits"), first.at("requested"));
  EXPECT_TRUE(fs::exists(c.run() / "effective_config.extract.json"));
}

TEST(Cli, CorruptImageIsSkippedUnlessStrict) {
  Corpus c("--train-per-class 1 --support-pool 5 --test-per-class 1");
  const json ds = json::parse("[" + [&] {
    std::string lines = slurp(c.dir / "corpus" / "dataset.jsonl"), joined;
    std::istringstream in(lines);
    for (std::string l; std::getline(in, l);)
      if (!l.empty()) joined += (joined.empty() ? "" : ",") + l;
    return joined;
  }() + "]");
  std::ofstream(c.dir / "corpus" / ds.at(0).at("path").get<std::string>(), std::ios::binary) << "not a png";
  std::string out;
  EXPECT_EQ(run_cli("extract --strict" + c.flags(), &out), 4) << out;
  const json summary = c.extract();
  ASSERT_EQ(summary.at("skipped").size(), 1u);
  EXPECT_EQ(summary.at("skipped")[0].at("image_id"), ds.at(0).at("image_id"));
}

TEST(Cli, TrainBaseReachesFullTrainAccuracyDeterministically) {
  Corpus c;
  c.extract();
  std::string out;
  ASSERT_EQ(run_cli("train-base" + c.flags() + kTraining, &out), 0) << out;
  std::istringstream log(slurp(c.run() / "train_log.jsonl"));
  std::string line, last;
  int epochs = 0;
  while (std::getline(log, line))
    if (!line.empty()) last = line, ++epochs;
  EXPECT_EQ(epochs, 30);
  EXPECT_GE(json::parse(last).at("accuracy").get<double>(), 0.99);

  const std::string first = slurp(c.run() / "head.bin");
  const std::string first_log = slurp(c.run() / "train_log.jsonl");
  ASSERT_EQ(run_cli("train-base" + c.flags() + kTraining, &out), 0) << out;
  EXPECT_EQ(slurp(c.run() / "head.bin"), first);
  EXPECT_EQ(slurp(c.run() / "train_log.jsonl"), first_log);
}

TEST(Cli, ZeroLearningRateLeavesInitialisationUntouched) {
  Corpus c("--train-per-class 2 --support-pool 5 --test-per-class 1");
  c.extract();
  std::string out;
  ASSERT_EQ(run_cli("train-base --lr 0 --epochs 2 --seed 9" + c.flags(), &out), 0) << out;
  const Checkpoint ck = load_checkpoint(c.run() / "head");
  EXPECT_EQ(ck.config.seed, 9u);
  EXPECT_TRUE(ck.params == init_head(ck.config));
}

TEST(Cli, TrainingWithoutCacheAsksForExtract) {
  Corpus c("--train-per-class 1 --support-pool 5 --test-per-class 1");
  std::string out;
  EXPECT_EQ(run_cli("train-base" + c.flags(), &out), 2);
  EXPECT_NE(out.find("extract"), std::string::npos) << out;
}

TEST(Cli, RunSessionsWithoutCheckpointIsStorageError) {
  Corpus c("--train-per-class 1 --support-pool 5 --test-per-class 1");
  c.extract();
  std::string out;
  EXPECT_EQ(run_cli("run-sessions" + c.flags(), &out), 4);
  EXPECT_NE(out.find("train-base"), std::string::npos) << out;
}

TEST(Cli, RunSessionsReportsOneColumnPerSession) {
  Corpus c;
  c.extract();
  std::string out;
  ASSERT_EQ(run_cli("train-base" + c.flags() + kTraining, &out), 0) << out;
  ASSERT_EQ(run_cli("run-sessions --alpha 0.5" + c.flags() + kTraining, &out), 0) << out;
  const fs::path half = c.run() / "sessions_alpha0.5_tau16";
  const std::string report = slurp(half / "report.csv");
  EXPECT_EQ(csv_line(report, 0), (std::vector<std::string>{"session", "1", "2", "3", "4", "5", "6", "7"}));
  const auto acc = csv_line(report, 1);
  ASSERT_EQ(acc.size(), 8u);
  for (std::size_t i = 1; i < acc.size(); ++i) EXPECT_GE(std::stod(acc[i]), 95.0) << "session " << i;
  EXPECT_EQ(out, report);
  EXPECT_TRUE(fs::exists(half / "per_class.csv"));
  EXPECT_TRUE(fs::exists(half / "report.json"));

  ASSERT_EQ(run_cli("run-sessions --alpha 1" + c.flags() + kTraining, &out), 0) << out;
  const fs::path full = c.run() / "sessions_alpha1_tau16";
  const json a = json::parse(slurp(half / "report.json")), b = json::parse(slurp(full / "report.json"));
  EXPECT_EQ(a.at("accuracy")[0], b.at("accuracy")[0]);
  EXPECT_NE(a.at("config").at("alpha"), b.at("config").at("alpha"));
  EXPECT_NE(slurp(half / "prototypes.bin"), slurp(full / "prototypes.bin"));

  const fs::path base_only = c.truncated("base_only.json", 1);
  ASSERT_EQ(run_cli("run-sessions --checkpoint \"" + (c.run() / "head").string() + "\"" + c.flags_for(base_only) +
                        kTraining,
                    &out),
            0)
      << out;
  EXPECT_EQ(csv_line(out, 0), (std::vector<std::string>{"session", "1"}));
}

TEST(Cli, RunSessionsRejectsForeignCheckpoint) {
  Corpus c("--train-per-class 2 --support-pool 5 --test-per-class 1");
  c.extract();
  c.extract("stub-hash");
  std::string out;
  ASSERT_EQ(run_cli("train-base --epochs 1" + c.flags(), &out), 0) << out;
  EXPECT_EQ(run_cli("run-sessions --checkpoint \"" + (c.run() / "head").string() + "\"" + c.flags("stub-hash"), &out), 2);
  EXPECT_NE(out.find("stub-gauss"), std::string::npos) << out;
  EXPECT_EQ(run_cli("run-sessions --alpha 1.5 --epochs 1" + c.flags(), &out), 2);
}

TEST(Cli, AnalyzeBlocksWritesOneHistogramPerClassMatchingLibrary) {
  Corpus c("--train-per-class 3 --support-pool 5 --test-per-class 2");
  const fs::path two = c.truncated("two.json", 1, 2);
  const std::string flags = c.flags_for(two) + " --epochs 2";
  std::string out;
  ASSERT_EQ(run_cli("extract" + flags, &out), 0) << out;
  ASSERT_EQ(run_cli("train-base" + flags, &out), 0) << out;
  ASSERT_EQ(run_cli("analyze-blocks --csv" + flags, &out), 0) << out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(c.run() / "blocks"))
    if (e.path().extension() == ".json") files.push_back(e.path());
  ASSERT_EQ(files.size(), 2u);

  const SessionManifest m = load_manifest(two);
  const Checkpoint ck = load_checkpoint(c.run() / "head");
  const auto bb = make_backbone("stub-gauss");
  CachedFeatureSource features(FeatureCache(c.dir / "cache"), bb->spec().weights_id, bb->spec().preprocess.id);
  for (const auto& cl : m.base().classes) {
    std::vector<Matrix> ws;
    for (const auto* ids : {&cl.support_ids, &cl.test_ids})
      for (const auto& id : *ids) ws.push_back(scaled_weights_for(features.stack(id).tokens, ck.params));
    const json got = json::parse(slurp(c.run() / "blocks" / ("hist_" + cl.label + ".json")));
    EXPECT_EQ(got, to_json(block_importance(ws, cl.label)));
    EXPECT_EQ(got.at("n_images"), 5);
    EXPECT_TRUE(fs::exists(c.run() / "blocks" / ("hist_" + cl.label + ".csv")));
  }
}

TEST(Cli, AnalyzeBlocksOnDominantBlockHeadIsPure) {
  Corpus c("--train-per-class 2 --support-pool 5 --test-per-class 1");
  const fs::path two = c.truncated("two.json", 1, 2);
  const std::string flags = c.flags_for(two, "stub-const:d=3");
  std::string out;
  ASSERT_EQ(run_cli("extract" + flags, &out), 0) << out;

  // identity projections and a steep AIM: block 4 (tokens all 4) dominates every channel
  HeadConfig hc;
  hc.n_blocks = 4;
  hc.d0 = hc.d1 = hc.d2 = 3;
  hc.n_base_classes = 2;
  hc.projector_depth = 1;
  HeadParams p = aimfscil::testing::identity_head(3, 2);
  p.aim.blocks[0].weight *= 50.0;
  const SessionManifest m = load_manifest(two);
  save_checkpoint(c.dir / "steep", p, hc,
                  {{"weights_id", make_backbone("stub-const:d=3")->spec().weights_id},
                   {"base_labels", {m.base().classes[0].label, m.base().classes[1].label}}});
  ASSERT_EQ(run_cli("analyze-blocks --checkpoint \"" + (c.dir / "steep").string() + "\"" + flags, &out), 0) << out;
  for (const auto& cl : m.base().classes) {
    const json h = json::parse(slurp(c.run() / "blocks" / ("hist_" + cl.label + ".json")));
    EXPECT_EQ(h.at("counts"), json({{"1", 0}, {"2", 0}, {"3", 0}, {"4", 3 * h.at("n_images").get<int>()}}));
  }
}

TEST(Cli, ExportEmbeddingsWritesTable) {
  Corpus c("--train-per-class 2 --support-pool 5 --test-per-class 1");
  c.extract();
  std::string out;
  ASSERT_EQ(run_cli("train-base --epochs 1" + c.flags(), &out), 0) << out;
  ASSERT_EQ(run_cli("export-embeddings --selector custom:1,3" + c.flags(), &out), 0) << out;
  const ArrayBundle b = read_bundle(c.run() / "embeddings_custom_1_3");
  EXPECT_EQ(b.at("embeddings").cols(), 32);
  EXPECT_EQ(b.attributes.at("selector"), "custom:1,3");
  EXPECT_EQ(run_cli("export-embeddings --selector custom:9" + c.flags(), &out), 2);
}

TEST(Cli, ConfigFileIsOverriddenByFlags) {
  Corpus c("--train-per-class 1 --support-pool 5 --test-per-class 1");
  const fs::path cfg = c.dir / "cfg.json";
  std::ofstream(cfg) << R"({"seed": 5, "epochs": 3, "alpha": 0.25, "cache_root": "/nonexistent"})";
  std::string out;
  ASSERT_EQ(run_cli("extract --config \"" + cfg.string() + "\" --seed 6" + c.flags(), &out), 0) << out;
  const json eff = json::parse(slurp(c.run() / "effective_config.extract.json"));
  EXPECT_EQ(eff.at("seed"), 6);
  EXPECT_EQ(eff.at("epochs"), 3);
  EXPECT_EQ(eff.at("alpha"), 0.25);
  EXPECT_EQ(eff.at("cache_root"), (c.dir / "cache").string());
  EXPECT_EQ(eff.at("command"), "extract");

  std::ofstream(cfg) << R"({"sed": 5})";
  EXPECT_EQ(run_cli("extract --config \"" + cfg.string() + "\"" + c.flags(), &out), 2);
  EXPECT_NE(out.find("sed"), std::string::npos);
}

TEST(Cli, EnvironmentSuppliesCacheRoot) {
  Corpus c("--train-per-class 1 --support-pool 5 --test-per-class 1");
  const fs::path env_cache = c.dir / "env-cache";
  ::setenv("AIMFSCIL_CACHE_ROOT", env_cache.c_str(), 1);
  std::string out;
  const int code = run_cli("extract --manifest \"" + c.manifest.string() + "\" --backbone stub-gauss --out \"" +
                               (c.dir / "runs").string() + "\" --run-id r",
                           &out);
  ::unsetenv("AIMFSCIL_CACHE_ROOT");
  ASSERT_EQ(code, 0) << out;
  EXPECT_TRUE(fs::exists(env_cache / make_backbone("stub-gauss")->spec().weights_id));
  EXPECT_FALSE(fs::exists(c.dir / "cache"));
}

TEST(Cli, DefaultRunIdIsStableAndKeyedOnTraining) {
  Corpus c("--train-per-class 1 --support-pool 5 --test-per-class 1");
  const std::string base = " --manifest \"" + c.manifest.string() + "\" --backbone stub-gauss --cache-root \"" +
                           (c.dir / "cache").string() + "\" --out \"" + (c.dir / "runs").string() + "\"";
  std::string out;
  ASSERT_EQ(run_cli("extract" + base, &out), 0) << out;
  ASSERT_EQ(run_cli("extract" + base, &out), 0) << out;
  ASSERT_EQ(run_cli("extract --seed 3" + base, &out), 0) << out;
  ASSERT_EQ(run_cli("extract --alpha 0.1" + base, &out), 0) << out;
  std::size_t runs = 0;
  for (const auto& e : fs::directory_iterator(c.dir / "runs")) {
    EXPECT_TRUE(e.path().filename().string().starts_with("run-"));
    ++runs;
  }
  EXPECT_EQ(runs, 2u);
}

TEST(Cli, ExitCodes) {
  std::string out;
  EXPECT_EQ(run_cli("", &out), 2);
  EXPECT_EQ(run_cli("no-such-command", &out), 2);
  EXPECT_EQ(run_cli("extract --epochs notanumber", &out), 2);
  EXPECT_EQ(run_cli("extract", &out), 2);
  EXPECT_NE(out.find("--manifest"), std::string::npos);
  EXPECT_EQ(run_cli("extract --manifest /nonexistent/m.json", &out), 4);
  EXPECT_EQ(run_cli("--help", &out), 0);
  EXPECT_EQ(run_cli("schedule --name nope", &out), 2);
}

TEST(Cli, MakeManifestFromDataset) {
  Corpus c("--train-per-class 1 --support-pool 6 --test-per-class 2");
  const fs::path out_path = c.dir / "m.json";
  std::string out;
  ASSERT_EQ(run_cli("make-manifest --dataset \"" + (c.dir / "corpus" / "dataset.jsonl").string() + "\" --seed 4 --output \"" +
                        out_path.string() + "\"",
                    &out),
            0)
      << out;
  const SessionManifest m = load_manifest(out_path);
  EXPECT_EQ(m.sessions.size(), 7u);
  EXPECT_EQ(m.sessions[3].classes[0].support_ids.size(), 5u);
  EXPECT_EQ(json::parse(slurp(out_path)).at("dataset"), "corpus/dataset.jsonl");
}

TEST(Cli, ScheduleMatchesBundledTemplate) {
  std::string out;
  ASSERT_EQ(run_cli("schedule --name prior-8", &out), 0) << out;
  EXPECT_EQ(json::parse(out), to_json(bundled_schedule("prior-8")));
}
