#include "deemd/infmap.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "deemd/common.hpp"

namespace deemd {
namespace {

void check_params(double alpha, double sigma) {
  if (!(alpha > 0.0 && alpha < 1.0)) fail(ErrorKind::DomainError, "alpha must lie in (0,1)");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) fail(ErrorKind::DomainError, "sigma must be >= 0");
}

double pow_alpha(double mu, double alpha) { return mu > 0.0 ? std::pow(mu, alpha) : 0.0; }

std::size_t reflect(long i, long n) {
  const long period = 2 * n;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - 1 - m);
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

double power_weighted_mean(std::span<const double> mus, double alpha) {
  double num = 0.0, den = 0.0;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double mu : mus) {
    const double w = pow_alpha(mu, alpha);
    num += mu * w;
    den += w;
    lo = std::min(lo, mu);
    hi = std::max(hi, mu);
  }
  return den > 0.0 ? std::clamp(num / den, lo, hi) : 0.0;
}

std::vector<double> aggregate_patch_scores(std::span<const double> scores, const GridConfig& grid,
                                           int height, int width, double alpha) {
  grid.validate(height, width);
  if (static_cast<int>(scores.size()) != grid.patch_count(height, width))
    fail(ErrorKind::GridMismatch, std::to_string(scores.size()) + " scores for a grid of " +
                                      std::to_string(grid.patch_count(height, width)) + " patches");
  const std::size_t n = static_cast<std::size_t>(height) * width;
  std::vector<double> num(n, 0.0), den(n, 0.0);
  std::vector<double> lo(n, std::numeric_limits<double>::infinity());
  std::vector<double> hi(n, -std::numeric_limits<double>::infinity());
  const int p = grid.patch_size;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    const double mu = scores[j];
    const double w = pow_alpha(mu, alpha);
    const double wm = mu * w;
    const auto o = patch_origin(grid, width, static_cast<int>(j));
    for (int y = o.y; y < o.y + p; ++y) {
      const std::size_t row = static_cast<std::size_t>(y) * width;
      for (int x = o.x; x < o.x + p; ++x) {
        num[row + x] += wm;
        den[row + x] += w;
        lo[row + x] = std::min(lo[row + x], mu);
        hi[row + x] = std::max(hi[row + x], mu);
      }
    }
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = den[i] > 0.0 ? std::clamp(num[i] / den[i], lo[i], hi[i]) : 0.0;
  return out;
}

std::vector<double> gaussian_blur(std::span<const double> values, int height, int width,
                                  double sigma) {
  std::vector<double> out(values.begin(), values.end());
  if (sigma == 0.0) return out;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    total += kernel[i + radius];
  }
  for (double& k : kernel) k /= total;

  // Convolve one reflect-padded line at a time.
  std::vector<double> line;
  auto convolve = [&](auto get, auto put, int n) {
    line.resize(static_cast<std::size_t>(n) + 2 * radius);
    for (int i = -radius; i < n + radius; ++i) line[i + radius] = get(reflect(i, n));
    for (int x = 0; x < n; ++x) {
      const double* src = line.data() + x;
      double s = 0.0;
      for (std::size_t t = 0; t < kernel.size(); ++t) s += kernel[t] * src[t];
      put(x, s);
    }
  };
  for (int y = 0; y < height; ++y) {
    double* row = out.data() + static_cast<std::size_t>(y) * width;
    convolve([&](std::size_t i) { return row[i]; }, [&](int x, double v) { row[x] = v; }, width);
  }
  for (int x = 0; x < width; ++x) {
    double* col = out.data() + x;
    convolve([&](std::size_t i) { return col[i * width]; },
             [&](int y, double v) { col[static_cast<std::size_t>(y) * width] = v; }, height);
  }
  return out;
}

InfectionMap build_infection_map(const PatchScoreSet& scores, const GridConfig& grid, int height,
                                 int width, double alpha, double sigma) {
  check_params(alpha, sigma);
  InfectionMap map;
  map.height = height;
  map.width = width;
  map.alpha = alpha;
  map.sigma = sigma;
  map.sample_id = scores.sample_id;
  map.values = gaussian_blur(aggregate_patch_scores(scores.scores, grid, height, width, alpha),
                             height, width, sigma);
  return map;
}

InfectionMap build_infection_map(std::span<const std::pair<int, double>> indexed_scores,
                                 const GridConfig& grid, int height, int width, double alpha,
                                 double sigma) {
  const int n = static_cast<int>(indexed_scores.size());
  std::vector<double> by_index(indexed_scores.size(), std::numeric_limits<double>::quiet_NaN());
  for (const auto& [index, mu] : indexed_scores) {
    if (index < 0 || index >= n || !std::isnan(by_index[index]))
      fail(ErrorKind::GridMismatch, "patch indices must be a permutation of 0..N-1");
    by_index[index] = mu;
  }
  PatchScoreSet set;
  set.scores = std::move(by_index);
  return build_infection_map(set, grid, height, width, alpha, sigma);
}

double infected_fraction(const InfectionMap& map, double eta) {
  if (map.values.empty()) return 0.0;
  const auto hits = std::count_if(map.values.begin(), map.values.end(),
                                  [eta](double v) { return v >= eta; });
  return static_cast<double>(hits) / static_cast<double>(map.values.size());
}

void write_map_png(const InfectionMap& map, const std::filesystem::path& path) {
  std::fesetround(FE_TONEAREST);
  cv::Mat mat(map.height, map.width, CV_8UC1);
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) mat.at<std::uint8_t>(y, x) = to_byte(map.at(y, x));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat)) fail(ErrorKind::IoError, "cannot write " + path.string());
}

void write_map_csv(const InfectionMap& map, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out << std::setprecision(17);
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) out << map.at(y, x) << (x + 1 == map.width ? '\n' : ',');
}

std::vector<std::uint8_t> overlay_rgb(const Image& image, int channel, const InfectionMap& map) {
  if (image.height() != map.height || image.width() != map.width)
    fail(ErrorKind::DimensionMismatch, "overlay image and map differ in size");
  if (channel < 0 || channel >= image.channels())
    fail(ErrorKind::ChannelMismatch, "overlay channel out of range");
  std::fesetround(FE_TONEAREST);
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(map.height) * map.width * 3);
  const auto px = image.channel(channel);
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double gray = 1.0 - std::clamp(px[i], 0.0, 1.0);
    const double a = std::clamp(map.values[i], 0.0, 1.0);
    rgb[3 * i + 0] = to_byte((1.0 - a) * gray + a);
    rgb[3 * i + 1] = to_byte((1.0 - a) * gray);
    rgb[3 * i + 2] = to_byte((1.0 - a) * gray);
  }
  return rgb;
}

void write_overlay_png(const Image& image, int channel, const InfectionMap& map,
                       const std::filesystem::path& path) {
  const auto rgb = overlay_rgb(image, channel, map);
  cv::Mat mat(map.height, map.width, CV_8UC3);
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      const std::size_t i = 3 * (static_cast<std::size_t>(y) * map.width + x);
      mat.at<cv::Vec3b>(y, x) = cv::Vec3b(rgb[i + 2], rgb[i + 1], rgb[i]);  // BGR
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat)) fail(ErrorKind::IoError, "cannot write " + path.string());
}

}  // namespace deemd
