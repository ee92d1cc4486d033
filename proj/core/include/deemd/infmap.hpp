#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deemd/imaging.hpp"
#include "deemd/mil.hpp"

namespace deemd {

struct InfectionMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major
  double alpha = 0.2;
  double sigma = 0.0;
  std::string sample_id;

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// sum mu^(1+alpha) / sum mu^alpha with 0^alpha = 0; an all-zero set gives 0.
/// Clamped to [min, max] of the set.
double power_weighted_mean(std::span<const double> mus, double alpha);

/// Per-pixel power-weighted mean over the overlapping patches, before
/// smoothing. `scores` is indexed by patch index. The result is clamped to
/// the [min, max] of each pixel's overlap set to remove rounding excursions.
std::vector<double> aggregate_patch_scores(std::span<const double> scores, const GridConfig& grid,
                                           int height, int width, double alpha);

/// Separable Gaussian blur, kernel truncated at 3 sigma, reflect-padded
/// borders (d c b a | a b c d). sigma = 0 returns the input.
std::vector<double> gaussian_blur(std::span<const double> values, int height, int width,
                                  double sigma);

/// Throws GridMismatch if the scores do not cover the grid of (height, width)
/// and DomainError unless alpha in (0,1) and sigma >= 0.
InfectionMap build_infection_map(const PatchScoreSet& scores, const GridConfig& grid, int height,
                                 int width, double alpha, double sigma);

/// Same map from (patch_index, mu) pairs given in any order.
InfectionMap build_infection_map(std::span<const std::pair<int, double>> indexed_scores,
                                 const GridConfig& grid, int height, int width, double alpha,
                                 double sigma);

/// Fraction of pixels with value >= eta.
double infected_fraction(const InfectionMap& map, double eta);

/// 8-bit grayscale PNG, value * 255 rounded half to even.
void write_map_png(const InfectionMap& map, const std::filesystem::path& path);
void write_map_csv(const InfectionMap& map, const std::filesystem::path& path);

/// Interleaved RGB: inverted channel intensity, alpha-composited toward pure
/// red with alpha = map value.
std::vector<std::uint8_t> overlay_rgb(const Image& image, int channel, const InfectionMap& map);
void write_overlay_png(const Image& image, int channel, const InfectionMap& map,
                       const std::filesystem::path& path);

}  // namespace deemd
