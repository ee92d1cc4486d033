#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include <json.hpp>

#include "deemd/common.hpp"
#include "deemd/pipeline.hpp"
#include "test_support.hpp"

using namespace deemd;
using deemd::testing::read_text;
using deemd::testing::TempDir;
using deemd::testing::write_text;

namespace {

RunConfig tiny_run(const std::filesystem::path& out) {
  RunConfig cfg;
  cfg.output_dir = out;
  cfg.grid = {32, 16};
  cfg.conv_channels = {4, 4, 4};
  cfg.train.epochs = 2;
  cfg.train.batch_size = 16;
  cfg.train.peak_lr = 0.003;
  cfg.sigma = 4;
  cfg.map_samples = 2;
  cfg.seed = 3;
  SynthConfig s;
  s.image_size = 64;
  s.min_cells = 5;
  s.max_cells = 8;
  s.mock_samples = 6;
  s.uv_samples = 6;
  s.infected_samples = 12;
  s.replicates = 3;
  s.grid = {32, 16};
  s.treatments = {{"Drug", {0.1, 1.0}, {0.0, 1.0}}};
  cfg.synth = s;
  return cfg;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(DEEMD_CLI) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Sha256, KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  TempDir dir;
  write_text(dir / "f", "abc");
  EXPECT_EQ(sha256_file(dir / "f"), sha256_hex("abc"));
}

TEST(RunConfig, DefaultsFollowReferenceSetup) {
  const RunConfig cfg;
  EXPECT_EQ(cfg.grid.patch_size, 256);
  EXPECT_EQ(cfg.grid.stride, 128);
  EXPECT_EQ(cfg.train.k, 2u);
  EXPECT_EQ(cfg.train.eta, 0.5);
  EXPECT_EQ(cfg.zeta, 0.5);
  EXPECT_EQ(cfg.confidence, 0.95);
  EXPECT_EQ(cfg.alpha, 0.2);
  EXPECT_EQ(cfg.sigma, 60.0);
  EXPECT_EQ(cfg.train.peak_lr, 1e-4);
  EXPECT_EQ(cfg.train.beta1, 0.9);
  EXPECT_EQ(cfg.train.beta2, 0.999);
  EXPECT_EQ(cfg.train.batch_size, 128u);
  EXPECT_EQ(cfg.train.epochs, 150);
}

TEST(RunConfig, JsonRoundTrip) {
  TempDir dir;
  RunConfig cfg = tiny_run(dir.path() / "out");
  cfg.candidate_k = {1, 2, 3};
  cfg.zeta = 0.4;
  const auto j = to_json(cfg);
  const RunConfig back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.synth->treatments[0].effectiveness, (std::vector<double>{0.0, 1.0}));
}

TEST(RunConfig, RelativePathsResolveAgainstConfigFile) {
  TempDir dir;
  write_text(dir / "cfg" / "run.json", R"({"output_dir": "out", "manifest": "../m.csv"})");
  const auto cfg = load_run_config(dir / "cfg" / "run.json");
  EXPECT_EQ(cfg.output_dir, dir / "cfg" / "out");
  EXPECT_EQ(cfg.manifest, dir / "cfg" / "../m.csv");
}

TEST(RunConfig, ValidationRejectsOutOfRange) {
  TempDir dir;
  for (auto mutate : std::vector<void (*)(RunConfig&)>{
           [](RunConfig& c) { c.train.eta = 1.0; }, [](RunConfig& c) { c.zeta = 0.0; },
           [](RunConfig& c) { c.alpha = 1.2; }, [](RunConfig& c) { c.sigma = -1; },
           [](RunConfig& c) { c.confidence = 1.0; }, [](RunConfig& c) { c.train.k = 0; },
           [](RunConfig& c) { c.synth.reset(); }}) {
    RunConfig cfg = tiny_run(dir.path());
    mutate(cfg);
    try {
      cfg.validate();
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
    }
  }
}

TEST(Pipeline, ScreenReportAndCacheHits) {
  TempDir dir;
  const RunConfig cfg = tiny_run(dir.path() / "out");
  {
    Pipeline p(cfg);
    p.screen();
    for (const auto& h : p.history()) EXPECT_FALSE(h.cache_hit) << to_string(h.stage);
  }
  const auto doses = read_text(dir.path() / "out" / "doses.csv");
  const auto treatments = read_text(dir.path() / "out" / "treatments.csv");
  for (const char* f : {"train/checkpoint.json", "train/training_log.csv", "eval/metrics.json",
                        "preprocess/counts.csv", "report.json"})
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "out" / f)) << f;
  EXPECT_FALSE(std::filesystem::is_empty(dir.path() / "out" / "maps"));

  std::ifstream in(dir.path() / "out" / "report.json");
  const auto report = nlohmann::json::parse(in);
  EXPECT_EQ(report["thresholds"]["k"], cfg.train.k);
  EXPECT_EQ(report["thresholds"]["eta"], cfg.train.eta);
  EXPECT_EQ(report["thresholds"]["zeta"], cfg.zeta);
  EXPECT_EQ(report["thresholds"]["alpha"], cfg.alpha);
  EXPECT_EQ(report["thresholds"]["sigma"], cfg.sigma);
  EXPECT_EQ(report["thresholds"]["confidence"], cfg.confidence);
  EXPECT_EQ(report["config"], to_json(cfg));
  EXPECT_EQ(report["dataset_hash"].get<std::string>().size(), 64u);
  EXPECT_TRUE(report["metrics"].contains("validation"));

  Pipeline again(cfg);
  again.screen();
  ASSERT_EQ(again.history().size(), 6u);
  for (const auto& h : again.history()) EXPECT_TRUE(h.cache_hit) << to_string(h.stage);
  EXPECT_EQ(read_text(dir.path() / "out" / "doses.csv"), doses);
  EXPECT_EQ(read_text(dir.path() / "out" / "treatments.csv"), treatments);
}

TEST(Pipeline, ChangedThresholdRerunsOnlyDownstream) {
  TempDir dir;
  RunConfig cfg = tiny_run(dir.path() / "out");
  Pipeline(cfg).screen();
  cfg.zeta = 0.3;
  Pipeline p(cfg);
  p.screen();
  for (const auto& h : p.history()) EXPECT_EQ(h.cache_hit, h.stage != Stage::Score) << to_string(h.stage);
}

TEST(Pipeline, TamperedOutputInvalidatesCache) {
  TempDir dir;
  const RunConfig cfg = tiny_run(dir.path() / "out");
  Pipeline(cfg).train();
  write_text(dir.path() / "out" / "train" / "training_log.csv", "tampered\n");
  Pipeline p(cfg);
  p.train();
  EXPECT_FALSE(p.history().back().cache_hit);
}

TEST(Pipeline, CacheDirFromEnvironment) {
  TempDir dir;
  ::setenv("DEEMD_CACHE_DIR", (dir.path() / "cache").c_str(), 1);
  Pipeline p(tiny_run(dir.path() / "out"));
  ::unsetenv("DEEMD_CACHE_DIR");
  EXPECT_EQ(p.cache_dir(), dir.path() / "cache");
  p.synth();
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "cache" / "synth.json"));
}

TEST(Pipeline, FourSiteWellsAreStitched) {
  TempDir dir;
  RunConfig cfg = tiny_run(dir.path() / "out");
  cfg.synth->sites_per_well = 4;
  cfg.synth->mock_samples = 3;
  cfg.synth->uv_samples = 3;
  cfg.synth->infected_samples = 6;
  Pipeline p(cfg);
  p.preprocess();
  const auto counts = read_text(dir.path() / "out" / "preprocess" / "counts.csv");
  // Every site of a well carries the stitched-well count.
  std::map<std::string, std::set<std::string>> per_well;
  std::istringstream in(counts);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto id = line.substr(0, line.find(','));
    const auto rest = line.substr(line.find(',') + 1);
    per_well[id.substr(0, id.rfind("_s"))].insert(rest.substr(0, rest.find(',')));
  }
  ASSERT_FALSE(per_well.empty());
  for (const auto& [well, values] : per_well) EXPECT_EQ(values.size(), 1u) << well;
}

TEST(Pipeline, MissingImageFailsPreprocess) {
  TempDir dir;
  RunConfig cfg = tiny_run(dir.path() / "out");
  Pipeline(cfg).synth();
  std::filesystem::remove(dir.path() / "out" / "synth" / "images" / "M0000_s1_ch2.png");
  cfg.synth.reset();
  cfg.manifest = dir.path() / "out" / "synth" / "manifest.csv";
  try {
    Pipeline(cfg).preprocess();
    FAIL();
  } catch (const StageFailure& e) {
    EXPECT_EQ(e.stage(), Stage::Preprocess);
  }

  std::ofstream(dir / "cfg.json") << to_json(cfg).dump();
  EXPECT_EQ(run_cli("preprocess -c " + (dir / "cfg.json").string()), exit_code(Stage::Preprocess));
}

TEST(Pipeline, ExitCodesAreDistinct) {
  std::set<int> codes{kConfigExitCode};
  for (auto s : {Stage::Synth, Stage::Preprocess, Stage::Train, Stage::Eval, Stage::Map, Stage::Score})
    EXPECT_TRUE(codes.insert(exit_code(s)).second);
  EXPECT_EQ(codes.count(0), 0u);
}

TEST(Cli, ConfigErrorsExitTwo) {
  TempDir dir;
  write_text(dir / "bad.json", R"({"eta": 1.5, "synth": {}})");
  EXPECT_EQ(run_cli("screen -c " + (dir / "bad.json").string()), kConfigExitCode);
  write_text(dir / "broken.json", "{ not json");
  EXPECT_EQ(run_cli("screen -c " + (dir / "broken.json").string()), kConfigExitCode);
  EXPECT_EQ(run_cli("frobnicate"), kConfigExitCode);
}

TEST(Cli, FlagsOverrideConfig) {
  TempDir dir;
  RunConfig cfg = tiny_run(dir.path() / "out");
  cfg.train.epochs = 1;
  std::ofstream(dir / "cfg.json") << to_json(cfg).dump();
  ASSERT_EQ(run_cli("screen -c " + (dir / "cfg.json").string() + " --zeta 0.3 --k 1 --alpha 0.4 --sigma 2 --eta 0.6 --seed 9 --jobs 2"), 0);
  std::ifstream in(dir.path() / "out" / "report.json");
  const auto report = nlohmann::json::parse(in);
  EXPECT_EQ(report["thresholds"]["zeta"], 0.3);
  EXPECT_EQ(report["thresholds"]["k"], 1);
  EXPECT_EQ(report["thresholds"]["alpha"], 0.4);
  EXPECT_EQ(report["thresholds"]["sigma"], 2.0);
  EXPECT_EQ(report["thresholds"]["eta"], 0.6);
  EXPECT_EQ(report["config"]["seed"], 9);
}

TEST(MapOverlays, CheckpointChannelMismatch) {
  TempDir dir;
  const RunConfig cfg = tiny_run(dir.path() / "out");
  Pipeline p(cfg);
  p.preprocess();
  const auto m = load_manifest(dir.path() / "out" / "preprocess" / "manifest.csv", true);
  const auto stats = load_channel_stats(dir.path() / "out" / "preprocess" / "channel_stats.json");
  Architecture arch;
  arch.in_channels = 5;
  arch.patch_size = 32;
  arch.conv_channels = {4, 4, 4};
  const Checkpoint ck{ScorerModel(arch, 1), ""};
  auto samples = m.in_split(Split::UntreatedTest);
  samples.resize(1);
  try {
    emit_map_overlays(ck, m, samples, stats, cfg, dir.path() / "maps");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::CheckpointMismatch);
  }
}
