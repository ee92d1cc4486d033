#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "deemd/imaging.hpp"

namespace deemd::testing {

struct BlobImage {
  Image image;
  std::vector<std::pair<double, double>> centers;
};

/// `count` non-touching Gaussian-edged discs on a noisy dark background.
/// Centers keep at least 2*radius + gap apart, rejection sampled.
inline BlobImage blob_image(int size, int count, std::uint64_t seed, double radius = 5.0,
                            double gap = 4.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(radius + 2, size - radius - 3);
  std::uniform_real_distribution<double> bright(0.6, 0.9);
  std::normal_distribution<double> noise(0.0, 0.01);
  BlobImage out{Image(1, size, size), {}};
  const double min_d = 2 * radius + gap;
  int attempts = 0;
  while (static_cast<int>(out.centers.size()) < count && attempts++ < 200000) {
    const double cy = pos(rng), cx = pos(rng);
    bool ok = true;
    for (auto [y, x] : out.centers)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) < min_d * min_d) ok = false;
    if (ok) out.centers.emplace_back(cy, cx);
  }
  std::vector<double> peak;
  for (std::size_t i = 0; i < out.centers.size(); ++i) peak.push_back(bright(rng));
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = 0.05 + noise(rng);
      for (std::size_t i = 0; i < out.centers.size(); ++i) {
        const double d = std::hypot(y - out.centers[i].first, x - out.centers[i].second);
        if (d < radius + 1.5) v = std::max(v, peak[i] / (1.0 + std::exp((d - radius) * 3.0)));
      }
      out.image.at(0, y, x) = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace deemd::testing
