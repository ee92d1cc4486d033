#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "deemd/common.hpp"
#include "deemd/infmap.hpp"
#include "test_support.hpp"

using namespace deemd;
using deemd::testing::TempDir;

namespace {

long double eq7(const std::vector<long double>& mus, long double alpha) {
  long double num = 0, den = 0;
  for (auto m : mus) {
    const long double w = m > 0 ? std::pow(m, alpha) : 0.0L;
    num += m * w;
    den += w;
  }
  return den > 0 ? num / den : 0.0L;
}

std::size_t reflect_index(long i, long n) {
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return static_cast<std::size_t>(i);
}

}  // namespace

TEST(PowerMean, ReferenceValues) {
  const std::vector<double> a{0.8, 0.2};
  EXPECT_NEAR(power_weighted_mean(a, 0.2), static_cast<double>(eq7({0.8L, 0.2L}, 0.2L)), 1e-15);
  EXPECT_NEAR(power_weighted_mean(a, 0.2), 0.5413, 1e-4);
  EXPECT_EQ(power_weighted_mean(std::vector<double>{1.0, 0.0}, 0.2), 1.0);
  EXPECT_EQ(power_weighted_mean(std::vector<double>{0.0, 0.0}, 0.2), 0.0);
}

TEST(PowerMean, ConvexAndAboveArithmeticMean) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> m(1 + trial % 4);
    for (auto& x : m) x = u(rng);
    const double alpha = 0.05 + 0.9 * u(rng);
    const double v = power_weighted_mean(m, alpha);
    const double lo = *std::min_element(m.begin(), m.end()), hi = *std::max_element(m.begin(), m.end());
    const double mean = std::accumulate(m.begin(), m.end(), 0.0) / m.size();
    EXPECT_GE(v, lo);
    EXPECT_LE(v, hi);
    EXPECT_GE(v, mean - 1e-15);
  }
}

TEST(InfectionMap, ConstantFieldPreserved) {
  const GridConfig grid{32, 16};
  const auto scores = PatchScoreSet::from_scores("s", std::vector<double>(49, 0.37), 2);
  const auto raw = build_infection_map(scores, grid, 128, 128, 0.2, 0.0);
  const auto smooth = build_infection_map(scores, grid, 128, 128, 0.2, 6.0);
  for (double v : raw.values) EXPECT_DOUBLE_EQ(v, 0.37);
  for (double v : smooth.values) EXPECT_NEAR(v, 0.37, 1e-12);
}

TEST(InfectionMap, ZeroTermConvention) {
  const GridConfig grid{4, 2};
  const auto scores = PatchScoreSet::from_scores("s", {1.0, 0.0}, 1);
  const auto map = build_infection_map(scores, grid, 4, 6, 0.2, 0.0);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) EXPECT_EQ(map.at(y, x), 1.0);
    for (int x = 4; x < 6; ++x) EXPECT_EQ(map.at(y, x), 0.0);
  }
}

TEST(InfectionMap, OverlapMatchesHighPrecisionOracle) {
  const GridConfig grid{32, 16};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> mus(49);
  for (auto& m : mus) m = u(rng);
  const auto values = aggregate_patch_scores(mus, grid, 128, 128, 0.2);
  for (int y = 0; y < 128; y += 7) {
    for (int x = 0; x < 128; x += 5) {
      std::vector<long double> overlap;
      for (int j = 0; j < 49; ++j) {
        const auto o = patch_origin(grid, 128, j);
        if (y >= o.y && y < o.y + 32 && x >= o.x && x < o.x + 32) overlap.push_back(mus[j]);
      }
      EXPECT_NEAR(values[y * 128 + x], static_cast<double>(eq7(overlap, 0.2L)), 1e-14);
      const auto [lo, hi] = std::minmax_element(overlap.begin(), overlap.end());
      EXPECT_GE(values[y * 128 + x], static_cast<double>(*lo));
      EXPECT_LE(values[y * 128 + x], static_cast<double>(*hi));
    }
  }
}

TEST(InfectionMap, OrderIndependent) {
  const GridConfig grid{32, 16};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::pair<int, double>> pairs;
  for (int j = 0; j < 49; ++j) pairs.emplace_back(j, u(rng));
  const auto a = build_infection_map(pairs, grid, 128, 128, 0.2, 4.0);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  const auto b = build_infection_map(pairs, grid, 128, 128, 0.2, 4.0);
  EXPECT_EQ(a.values, b.values);
}

TEST(InfectionMap, Errors) {
  const GridConfig grid{32, 16};
  const auto short_set = PatchScoreSet::from_scores("s", std::vector<double>(48, 0.5), 1);
  EXPECT_THROW(build_infection_map(short_set, grid, 128, 128, 0.2, 0.0), Error);
  try {
    build_infection_map(short_set, grid, 128, 128, 0.2, 0.0);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::GridMismatch);
  }
  const auto ok = PatchScoreSet::from_scores("s", std::vector<double>(49, 0.5), 1);
  for (double alpha : {0.0, 1.0, -0.5}) {
    try {
      build_infection_map(ok, grid, 128, 128, alpha, 0.0);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::DomainError);
    }
  }
}

TEST(GaussianBlur, MatchesDirectReflectConvolution) {
  const int h = 9, w = 13;
  const double sigma = 1.7;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> v(h * w);
  for (auto& x : v) x = u(rng);
  const auto out = gaussian_blur(v, h, w, sigma);
  const int r = static_cast<int>(std::ceil(3 * sigma));
  double total = 0;
  for (int i = -r; i <= r; ++i) total += std::exp(-0.5 * i * i / (sigma * sigma));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
          s += std::exp(-0.5 * (dy * dy + dx * dx) / (sigma * sigma)) / (total * total) *
               v[reflect_index(y + dy, h) * w + reflect_index(x + dx, w)];
      EXPECT_NEAR(out[y * w + x], s, 1e-12);
    }
  }
  EXPECT_EQ(gaussian_blur(v, h, w, 0.0), v);
}

TEST(GaussianBlur, NoOvershoot) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.2, 0.7);
  std::vector<double> v(40 * 30);
  for (auto& x : v) x = u(rng);
  const auto out = gaussian_blur(v, 40, 30, 8.0);  // kernel wider than the image
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  for (double x : out) {
    EXPECT_GE(x, *lo - 1e-9);
    EXPECT_LE(x, *hi + 1e-9);
  }
}

TEST(InfectedFraction, Examples) {
  InfectionMap m;
  m.height = 2;
  m.width = 2;
  m.values = {0, 0, 0, 0};
  EXPECT_EQ(infected_fraction(m, 0.5), 0.0);
  m.values = {0.6, 0.6, 0.6, 0.6};
  EXPECT_EQ(infected_fraction(m, 0.5), 1.0);
  m.values = {0.9, 0.1, 0.1, 0.9};
  EXPECT_EQ(infected_fraction(m, 0.5), 0.5);
  m.values = {0.5, 0.1, 0.1, 0.1};
  EXPECT_EQ(infected_fraction(m, 0.5), 0.25);
}

TEST(MapExport, PngRoundsHalfToEven) {
  TempDir dir;
  InfectionMap m;
  m.height = 1;
  m.width = 4;
  m.values = {0.5 / 255, 1.5 / 255, 2.5 / 255, 1.0};
  write_map_png(m, dir / "m.png");
  std::vector<std::filesystem::path> p{dir / "m.png"};
  const Image back = load_image(p);
  const int expected[] = {0, 2, 2, 255};
  for (int x = 0; x < 4; ++x) EXPECT_EQ(std::lround(back.at(0, 0, x) * 255), expected[x]) << x;
}

TEST(Overlay, ZeroAndOneMaps) {
  Image img(2, 2, 2);
  img.at(1, 0, 0) = 0.0;
  img.at(1, 0, 1) = 1.0;
  img.at(1, 1, 0) = 0.2;
  img.at(1, 1, 1) = 0.6;
  InfectionMap m;
  m.height = m.width = 2;
  m.values.assign(4, 0.0);
  auto rgb = overlay_rgb(img, 1, m);
  for (int i = 0; i < 4; ++i) {
    const auto inv = static_cast<std::uint8_t>(std::nearbyint((1.0 - img.channel(1)[i]) * 255));
    EXPECT_EQ(rgb[3 * i], inv);
    EXPECT_EQ(rgb[3 * i + 1], inv);
    EXPECT_EQ(rgb[3 * i + 2], inv);
  }
  m.values.assign(4, 1.0);
  rgb = overlay_rgb(img, 1, m);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(rgb[3 * i], 255);
    EXPECT_EQ(rgb[3 * i + 1], 0);
    EXPECT_EQ(rgb[3 * i + 2], 0);
  }
}
