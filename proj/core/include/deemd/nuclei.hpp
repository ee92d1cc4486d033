#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "deemd/imaging.hpp"
#include "deemd/manifest.hpp"

namespace deemd {

struct NucleusCountOptions {
  int min_area = 20;       // pixels; smaller watershed regions are discarded
  int peak_radius = 3;     // seed suppression radius on the distance transform
  int histogram_bins = 256;
};

struct Centroid {
  double row = 0.0;
  double col = 0.0;
};

struct NucleusCountResult {
  int count = 0;
  std::vector<Centroid> centroids;
  double threshold = 0.0;
};

struct OtsuResult {
  int bin = 0;             // pixels in bins > `bin` are foreground
  double threshold = 0.0;  // upper edge of `bin` in intensity units
  double between_class_variance = 0.0;
  bool degenerate = false;  // constant image; no split exists
};

/// Otsu threshold over a histogram spanning [min, max] of `values`.
OtsuResult otsu_threshold(std::span<const double> values, int bins = 256);

/// Bin index of v on the same histogram used by otsu_threshold.
int histogram_bin(double v, double lo, double hi, int bins);

/// Exact squared Euclidean distance from each foreground pixel to the nearest
/// background pixel; pixels outside the image count as background.
std::vector<double> squared_distance_transform(std::span<const unsigned char> mask, int height,
                                               int width);

/// Otsu foreground, distance transform, seeded watershed, area filter.
/// `dna` must have exactly one channel.
NucleusCountResult count_nuclei(const Image& dna, const NucleusCountOptions& options = {});

/// Removes records whose count is zero. Throws MissingCount for records
/// without an entry.
Manifest filter_empty_samples(const Manifest& manifest,
                              const std::map<std::string, NucleusCountResult>& counts);

void write_counts_csv(const std::map<std::string, NucleusCountResult>& counts,
                      const std::filesystem::path& path);

}  // namespace deemd
