#include "deemd/nuclei.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <queue>
#include <tuple>

#include <spdlog/spdlog.h>

#include "deemd/common.hpp"

namespace deemd {

int histogram_bin(double v, double lo, double hi, int bins) {
  const int b = static_cast<int>((v - lo) / (hi - lo) * bins);
  return std::clamp(b, 0, bins - 1);
}

OtsuResult otsu_threshold(std::span<const double> values, int bins) {
  OtsuResult r;
  if (values.empty()) {
    r.degenerate = true;
    return r;
  }
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    r.degenerate = true;
    r.threshold = hi;
    return r;
  }
  std::vector<double> hist(bins, 0.0);
  for (double v : values) hist[histogram_bin(v, lo, hi, bins)] += 1.0;

  const double width = (hi - lo) / bins;
  const double total = static_cast<double>(values.size());
  double total_sum = 0.0;
  for (int b = 0; b < bins; ++b) total_sum += hist[b] * (lo + (b + 0.5) * width);

  double w0 = 0.0, sum0 = 0.0;
  double best = -1.0;
  int best_bin = 0;
  for (int t = 0; t < bins - 1; ++t) {
    w0 += hist[t];
    sum0 += hist[t] * (lo + (t + 0.5) * width);
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double mu0 = sum0 / w0, mu1 = (total_sum - sum0) / w1;
    const double var = (w0 / total) * (w1 / total) * (mu0 - mu1) * (mu0 - mu1);
    if (var > best) {
      best = var;
      best_bin = t;
    }
  }
  r.bin = best_bin;
  r.threshold = lo + (best_bin + 1) * width;
  r.between_class_variance = best;
  return r;
}

namespace {

// Felzenszwalb-Huttenlocher lower envelope of parabolas, in place on `f`.
void distance_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
                 std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == inf) continue;
    if (f[v[k]] == inf) {
      v[k] = q;
      continue;
    }
    double s = 0.0;
    while (true) {
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (f[v[0]] == inf) {
    std::fill(d.begin(), d.end(), inf);
    f = d;
    return;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = (double(q) - v[k]) * (double(q) - v[k]) + f[v[k]];
  }
  f = d;
}

}  // namespace

std::vector<double> squared_distance_transform(std::span<const unsigned char> mask, int height,
                                               int width) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const int ph = height + 2, pw = width + 2;
  std::vector<double> grid(static_cast<std::size_t>(ph) * pw, 0.0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (mask[static_cast<std::size_t>(y) * width + x]) grid[(y + 1) * pw + (x + 1)] = inf;

  const int longest = std::max(ph, pw);
  std::vector<double> f, d(longest);
  std::vector<int> v(longest);
  std::vector<double> z(longest + 1);
  for (int x = 0; x < pw; ++x) {
    f.resize(ph);
    d.resize(ph);
    for (int y = 0; y < ph; ++y) f[y] = grid[y * pw + x];
    distance_1d(f, d, v, z);
    for (int y = 0; y < ph; ++y) grid[y * pw + x] = f[y];
  }
  for (int y = 0; y < ph; ++y) {
    f.assign(grid.begin() + y * pw, grid.begin() + (y + 1) * pw);
    d.resize(pw);
    distance_1d(f, d, v, z);
    std::copy(f.begin(), f.end(), grid.begin() + y * pw);
  }
  std::vector<double> out(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out[static_cast<std::size_t>(y) * width + x] = grid[(y + 1) * pw + (x + 1)];
  return out;
}

NucleusCountResult count_nuclei(const Image& dna, const NucleusCountOptions& options) {
  if (dna.channels() != 1) fail(ErrorKind::ChannelMismatch, "nucleus counting needs one channel");
  if (options.min_area < 1) fail(ErrorKind::InvalidConfig, "min_area must be >= 1");
  const int h = dna.height(), w = dna.width();
  const auto px = dna.channel(0);

  NucleusCountResult result;
  const OtsuResult otsu = otsu_threshold(px, options.histogram_bins);
  result.threshold = otsu.threshold;
  if (otsu.degenerate) return result;

  const auto [lo_it, hi_it] = std::minmax_element(px.begin(), px.end());
  const double lo = *lo_it, hi = *hi_it;
  const std::size_t n = px.size();
  std::vector<unsigned char> mask(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    mask[i] = histogram_bin(px[i], lo, hi, options.histogram_bins) > otsu.bin ? 1 : 0;

  std::vector<double> dist = squared_distance_transform(mask, h, w);
  for (double& d : dist) d = std::sqrt(d);

  // Seeds: window maxima of the distance transform, greedily thinned so no
  // two seeds lie within peak_radius of each other.
  const int r = options.peak_radius;
  std::vector<std::size_t> candidates;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (dist[i] <= 0.0) continue;
      bool is_max = true;
      for (int dy = -r; dy <= r && is_max; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          if (dist[static_cast<std::size_t>(yy) * w + xx] > dist[i]) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) candidates.push_back(i);
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
  std::vector<std::size_t> seeds;
  for (std::size_t c : candidates) {
    const int cy = static_cast<int>(c / w), cx = static_cast<int>(c % w);
    bool close = false;
    for (std::size_t s : seeds) {
      const int sy = static_cast<int>(s / w), sx = static_cast<int>(s % w);
      if ((sy - cy) * (sy - cy) + (sx - cx) * (sx - cx) <= r * r) {
        close = true;
        break;
      }
    }
    if (!close) seeds.push_back(c);
  }

  // Seeded watershed on the inverted distance transform (8-connected).
  std::vector<int> label(n, 0);
  using Item = std::tuple<double, std::uint64_t, std::size_t>;  // elevation, order, pixel
  std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
  std::uint64_t order = 0;
  int next_label = 0;
  for (std::size_t s : seeds) {
    label[s] = ++next_label;
    queue.emplace(-dist[s], order++, s);
  }
  constexpr std::array<int, 8> ny = {-1, -1, -1, 0, 0, 1, 1, 1};
  constexpr std::array<int, 8> nx = {-1, 0, 1, -1, 1, -1, 0, 1};
  while (!queue.empty()) {
    const auto [elev, ord, p] = queue.top();
    queue.pop();
    const int py = static_cast<int>(p / w), pxl = static_cast<int>(p % w);
    for (int k = 0; k < 8; ++k) {
      const int yy = py + ny[k], xx = pxl + nx[k];
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      const std::size_t q = static_cast<std::size_t>(yy) * w + xx;
      if (!mask[q] || label[q] != 0) continue;
      label[q] = label[p];
      queue.emplace(-dist[q], order++, q);
    }
  }
  // Foreground components that received no seed keep their own label.
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i] || label[i] != 0) continue;
    const int id = ++next_label;
    std::vector<std::size_t> stack = {i};
    label[i] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const int py = static_cast<int>(p / w), pxl = static_cast<int>(p % w);
      for (int k = 0; k < 8; ++k) {
        const int yy = py + ny[k], xx = pxl + nx[k];
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        const std::size_t q = static_cast<std::size_t>(yy) * w + xx;
        if (mask[q] && label[q] == 0) {
          label[q] = id;
          stack.push_back(q);
        }
      }
    }
  }

  struct Region {
    int area = 0;
    double weight = 0.0, wy = 0.0, wx = 0.0, gy = 0.0, gx = 0.0;
  };
  std::vector<Region> regions(next_label + 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] == 0) continue;
    auto& reg = regions[label[i]];
    const double y = static_cast<double>(i / w), x = static_cast<double>(i % w);
    ++reg.area;
    reg.weight += px[i];
    reg.wy += px[i] * y;
    reg.wx += px[i] * x;
    reg.gy += y;
    reg.gx += x;
  }
  for (int id = 1; id <= next_label; ++id) {
    const auto& reg = regions[id];
    if (reg.area < options.min_area) continue;
    if (reg.weight > 0.0)
      result.centroids.push_back({reg.wy / reg.weight, reg.wx / reg.weight});
    else
      result.centroids.push_back({reg.gy / reg.area, reg.gx / reg.area});
  }
  result.count = static_cast<int>(result.centroids.size());
  return result;
}

Manifest filter_empty_samples(const Manifest& manifest,
                              const std::map<std::string, NucleusCountResult>& counts) {
  Manifest out = manifest;
  out.records.clear();
  for (const auto& r : manifest.records) {
    auto it = counts.find(r.sample_id);
    if (it == counts.end()) fail(ErrorKind::MissingCount, r.sample_id);
    if (it->second.count == 0) {
      spdlog::info("nuclei: excluding sample {} (no detectable cells)", r.sample_id);
      continue;
    }
    out.records.push_back(r);
  }
  return out;
}

void write_counts_csv(const std::map<std::string, NucleusCountResult>& counts,
                      const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out << "sample_id,count,threshold\n" << std::setprecision(17);
  for (const auto& [id, c] : counts) out << id << ',' << c.count << ',' << c.threshold << '\n';
}

}  // namespace deemd
