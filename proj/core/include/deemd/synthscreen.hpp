#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "deemd/imaging.hpp"
#include "deemd/manifest.hpp"

namespace deemd {

/// 1 - exp(-moi): probability that a cell receives at least one virion under
/// Poisson(moi) entry. Throws NegativeMoi.
double poisson_infection_probability(double moi);

struct TreatmentPlan {
  std::string name;
  std::vector<double> concentrations;  // micromolar, ascending
  std::vector<double> effectiveness;   // per concentration, in [0,1]
};

struct SynthConfig {
  int image_size = 128;
  int channels = 3;
  double moi = 0.4;
  int min_cells = 14;
  int max_cells = 22;
  double min_cell_spacing = 15.0;

  double background = 0.04;
  double noise = 0.02;
  double nucleus_radius = 4.0;
  double nucleus_intensity = 0.7;
  double cell_radius = 8.0;
  double cytoplasm_intensity = 0.15;
  double cpe_radius = 6.0;
  double cpe_intensity = 0.8;
  double speckle_probability = 0.25;
  double speckle_intensity = 0.3;
  /// Probability that an infected cell has lost its nucleus (cell loss).
  double cell_loss = 0.3;
  /// Treated infected cells render CPE at severity (1 - effectiveness).
  bool attenuate_treated_cpe = true;

  int mock_samples = 100;
  int uv_samples = 100;
  int infected_samples = 200;
  int sites_per_well = 1;  // 1 or 4
  std::vector<TreatmentPlan> treatments;
  int replicates = 6;
  double planted_threshold = 0.9;  // top-dose effectiveness marking a planted hit

  GridConfig grid{32, 16};
  std::uint64_t seed = 1;
};

void validate(const SynthConfig& cfg);

/// What to render for one sample.
struct SampleSpec {
  std::uint64_t index = 0;  // selects the sample's random stream
  SampleRecord record;
  double effectiveness = 0.0;  // 0 for untreated
};

struct Cell {
  double y = 0.0;
  double x = 0.0;
  bool infected = false;
  bool nucleus_lost = false;
};

struct SampleTruth {
  int bag_label = 0;
  std::vector<int> patch_labels;
  int infected_cells = 0;
  int total_cells = 0;
  double infected_fraction = 0.0;
};

struct RenderedSample {
  Image image;
  std::vector<Cell> cells;
  SampleTruth truth;
};

struct SynthGroundTruth {
  std::map<std::string, SampleTruth> samples;
  std::map<std::string, double> treatment_top_effectiveness;
  std::set<std::string> planted_effective;
};

std::vector<SampleSpec> plan_samples(const SynthConfig& cfg);

/// Deterministic in (cfg, spec.index, spec.effectiveness). Each cell draws
/// its infection coin from its own stream, so raising effectiveness can only
/// remove infected cells.
RenderedSample render_sample(const SynthConfig& cfg, const SampleSpec& spec);

std::vector<int> patch_labels(const std::vector<Cell>& cells, const GridConfig& grid, int height,
                              int width);

struct SynthScreen {
  Manifest manifest;
  SynthGroundTruth truth;
};

/// Writes images/, manifest.csv, ground_truth.csv, samples_truth.csv and
/// planted.csv under `out_dir`.
SynthScreen generate_screen(const SynthConfig& cfg, const std::filesystem::path& out_dir,
                            int jobs = 1);

SynthGroundTruth load_ground_truth(const std::filesystem::path& dir);

}  // namespace deemd
