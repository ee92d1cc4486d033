#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "deemd/imaging.hpp"
#include "deemd/manifest.hpp"
#include "deemd/mil.hpp"
#include "deemd/nuclei.hpp"
#include "deemd/scorer.hpp"
#include "deemd/synthscreen.hpp"

namespace deemd {

/// Every knob of a screening run. Defaults follow the reference setup:
/// 256/128 grid, k = 2, eta = zeta = 0.5, 95% sign-test level, alpha = 0.2,
/// sigma = 60 px, Adam(1e-4, 0.9, 0.999), batch 128, up to 150 epochs.
struct RunConfig {
  std::filesystem::path output_dir = "deemd_out";
  std::filesystem::path manifest;  // ignored when `synth` is set
  std::optional<SynthConfig> synth;
  bool merge_controls = true;
  SplitFractions fractions;
  GridConfig grid{256, 128};
  std::vector<int> conv_channels = {8, 16, 32};
  TrainConfig train;  // carries k, eta and the optimizer settings
  bool class_weights = true;
  double zeta = 0.5;
  double confidence = 0.95;
  double alpha = 0.2;
  double sigma = 60.0;
  NucleusCountOptions nuclei;
  bool exclude_empty = true;
  int map_samples = 4;
  std::vector<std::size_t> candidate_k;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::filesystem::path cache_dir;  // empty: $DEEMD_CACHE_DIR or <output_dir>/.cache

  /// Throws InvalidConfig on out-of-range thresholds or sizes.
  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
nlohmann::json to_json(const SynthConfig& cfg);
/// Missing keys keep their defaults; relative paths resolve against `base`.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
SynthConfig synth_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

enum class Stage { Synth, Preprocess, Train, Eval, Map, Score };

std::string_view to_string(Stage stage);
/// Distinct nonzero process exit code per stage; 2 is reserved for config errors.
int exit_code(Stage stage);
inline constexpr int kConfigExitCode = 2;

class StageFailure : public std::runtime_error {
 public:
  StageFailure(Stage stage, const std::string& what)
      : std::runtime_error(std::string(to_string(stage)) + " stage failed: " + what), stage_(stage) {}
  Stage stage() const noexcept { return stage_; }

 private:
  Stage stage_;
};

struct StageResult {
  Stage stage = Stage::Synth;
  bool cache_hit = false;
  std::string key;
};

/// Loads records of `manifest` and builds normalized bags.
std::vector<Bag> build_bags(const Manifest& manifest, std::span<const SampleRecord* const> records,
                            const ChannelStats& stats, int jobs = 1);

/// Writes an infection map and one red overlay per channel for each sample.
/// Throws CheckpointMismatch if the checkpoint does not fit the images.
void emit_map_overlays(const Checkpoint& checkpoint, const Manifest& manifest,
                       std::span<const SampleRecord* const> samples, const ChannelStats& stats,
                       const RunConfig& cfg, const std::filesystem::path& out_dir);

ChannelStats load_channel_stats(const std::filesystem::path& path);
void save_channel_stats(const ChannelStats& stats, const std::filesystem::path& path);

/// Stage runner with content-hashed caching. Stage outputs live under
/// `output_dir`; cache records under the cache directory.
class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg);

  StageResult synth();
  StageResult preprocess();
  StageResult train();
  StageResult eval();
  StageResult map();
  StageResult score();
  /// All stages in order, then report.json.
  void screen();

  const RunConfig& config() const { return cfg_; }
  const std::vector<StageResult>& history() const { return history_; }
  std::filesystem::path stage_dir(Stage stage) const;
  std::filesystem::path cache_dir() const { return cache_dir_; }
  void write_report() const;

 private:
  std::filesystem::path source_manifest() const;
  std::string upstream_key(Stage stage);
  template <typename Fn>
  StageResult run_stage(Stage stage, const nlohmann::json& config_subset,
                        const std::vector<std::string>& upstream, Fn&& body);

  RunConfig cfg_;
  std::filesystem::path cache_dir_;
  std::vector<StageResult> history_;
};

}  // namespace deemd
