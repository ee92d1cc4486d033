#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "deemd/common.hpp"
#include "deemd/imaging.hpp"
#include "test_support.hpp"

using namespace deemd;
using deemd::testing::TempDir;

namespace {

Image random_image(int c, int h, int w, std::uint64_t seed) {
  Image img(c, h, w);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& v : img.data()) v = u(rng);
  return img;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no deemd::Error thrown";
  return ErrorKind::InvalidConfig;
}

}  // namespace

TEST(Stitch, QuadrantsOfConstants) {
  std::vector<Image> sites;
  for (int s = 0; s < 4; ++s) sites.emplace_back(1, 2, 2, s + 1.0);
  const Image out = stitch_sites(sites);
  ASSERT_EQ(out.height(), 4);
  ASSERT_EQ(out.width(), 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_EQ(out.at(0, y, x), 1.0 + (y / 2) * 2 + (x / 2));
}

TEST(Stitch, DoublesEachAxis) {
  std::vector<Image> sites(4, Image(2, 64, 48));
  const Image out = stitch_sites(sites);
  EXPECT_EQ(out.channels(), 2);
  EXPECT_EQ(out.height(), 128);
  EXPECT_EQ(out.width(), 96);
}

TEST(Stitch, ArityAndShapeErrors) {
  std::vector<Image> three(3, Image(1, 2, 2));
  EXPECT_EQ(kind_of([&] { stitch_sites(three); }), ErrorKind::DimensionMismatch);
  std::vector<Image> mixed(4, Image(1, 2, 2));
  mixed[3] = Image(1, 2, 3);
  EXPECT_EQ(kind_of([&] { stitch_sites(mixed); }), ErrorKind::DimensionMismatch);
}

TEST(ChannelStats, ConstantChannelFloorsStd) {
  std::vector<Image> imgs{Image(1, 4, 4, 0.5)};
  const auto s = compute_channel_stats(imgs);
  EXPECT_DOUBLE_EQ(s.mean[0], 0.5);
  EXPECT_DOUBLE_EQ(s.stddev[0], ChannelStats::kStdFloor);
}

TEST(ChannelStats, TwoPointPopulationStd) {
  std::vector<Image> imgs{Image(1, 1, 1, 0.0), Image(1, 1, 1, 1.0)};
  const auto s = compute_channel_stats(imgs);
  EXPECT_DOUBLE_EQ(s.mean[0], 0.5);
  EXPECT_DOUBLE_EQ(s.stddev[0], 0.5);
}

TEST(ChannelStats, EmptyInput) {
  std::vector<Image> none;
  EXPECT_EQ(kind_of([&] { compute_channel_stats(none); }), ErrorKind::EmptyInput);
}

TEST(ChannelStats, StreamingMatchesTwoPass) {
  std::vector<Image> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(random_image(3, 7 + i, 5, 100 + i));
  const auto s = compute_channel_stats(imgs);
  for (int c = 0; c < 3; ++c) {
    double sum = 0, n = 0;
    for (const auto& im : imgs)
      for (double v : im.channel(c)) sum += v, n += 1;
    const double mean = sum / n;
    double ss = 0;
    for (const auto& im : imgs)
      for (double v : im.channel(c)) ss += (v - mean) * (v - mean);
    EXPECT_NEAR(s.mean[c], mean, 1e-12);
    EXPECT_NEAR(s.stddev[c], std::sqrt(ss / n), 1e-12);
  }
}

TEST(Normalize, Examples) {
  ChannelStats st{{0.5}, {0.5}};
  Image img(1, 1, 2);
  img.at(0, 0, 0) = 0.0;
  img.at(0, 0, 1) = 1.0;
  const Image n = normalize(img, st);
  EXPECT_DOUBLE_EQ(n.at(0, 0, 0), -1.0);
  EXPECT_DOUBLE_EQ(n.at(0, 0, 1), 1.0);

  const Image c = normalize(Image(1, 3, 3, 0.5), st);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);

  ChannelStats three{{0, 0, 0}, {1, 1, 1}};
  EXPECT_EQ(kind_of([&] { normalize(Image(5, 2, 2), three); }), ErrorKind::ChannelMismatch);
}

TEST(Normalize, TrainingCorpusIsStandardized) {
  std::vector<Image> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(random_image(2, 16, 16, i));
  const auto st = compute_channel_stats(imgs);
  std::vector<Image> normed;
  for (const auto& im : imgs) normed.push_back(normalize(im, st));
  const auto after = compute_channel_stats(normed);
  for (int c = 0; c < 2; ++c) {
    EXPECT_NEAR(after.mean[c], 0.0, 1e-12);
    EXPECT_NEAR(after.stddev[c], 1.0, 1e-12);
  }
}

TEST(Normalize, RoundTrip) {
  const Image img = random_image(3, 8, 8, 9);
  ChannelStats st{{0.2, 0.5, 0.9}, {1e-6, 0.3, 2.0}};
  const Image back = denormalize(normalize(img, st), st);
  for (std::size_t i = 0; i < img.data().size(); ++i) EXPECT_NEAR(back.data()[i], img.data()[i], 1e-6);
}

TEST(Grid, PatchCounts) {
  EXPECT_EQ((GridConfig{256, 128}.patch_count(1024, 1024)), 49);
  EXPECT_EQ((GridConfig{256, 128}.patch_count(512, 512)), 9);
  EXPECT_EQ(GridConfig::whole_image(256).patch_count(256, 256), 1);
  EXPECT_EQ(kind_of([] { GridConfig{256, 128}.validate(1000, 1024); }), ErrorKind::GridMismatch);
}

TEST(Grid, SinglePatchAtOrigin) {
  const Image img = random_image(1, 256, 256, 1);
  const auto patches = extract_patches(img, GridConfig::whole_image(256));
  ASSERT_EQ(patches.size(), 1u);
  EXPECT_EQ(patches[0].origin.y, 0);
  EXPECT_EQ(patches[0].origin.x, 0);
  EXPECT_EQ(patches[0].pixels, img);
}

TEST(Grid, RowMajorBijectionAndCoverage) {
  const GridConfig grid{32, 16};
  const Image img = random_image(2, 128, 96, 4);
  const auto patches = extract_patches(img, grid);
  const int cols = grid.patches_per_axis(96);
  ASSERT_EQ(static_cast<int>(patches.size()), grid.patch_count(128, 96));
  Image rebuilt(2, 128, 96, -1.0);
  for (const auto& p : patches) {
    EXPECT_EQ(p.origin.y, (p.index / cols) * grid.stride);
    EXPECT_EQ(p.origin.x, (p.index % cols) * grid.stride);
    EXPECT_EQ(p.pixels, extract_patch(img, grid, p.index));
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) rebuilt.at(c, p.origin.y + y, p.origin.x + x) = p.pixels.at(c, y, x);
  }
  EXPECT_EQ(rebuilt, img);
}

TEST(Grid, MismatchedImageRejected) {
  EXPECT_EQ(kind_of([] { extract_patches(Image(1, 100, 100), GridConfig{32, 16}); }),
            ErrorKind::GridMismatch);
}

TEST(CenterCrop, TakesMiddle) {
  Image img(1, 5, 5);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) img.at(0, y, x) = y * 5 + x;
  const Image c = center_crop(img, 3, 3);
  EXPECT_EQ(c.at(0, 0, 0), 6.0);
  EXPECT_EQ(c.at(0, 2, 2), 18.0);
}

TEST(ImageIo, SixteenBitRoundTrip) {
  TempDir dir;
  const Image img = random_image(2, 12, 10, 5);
  std::vector<std::filesystem::path> paths{dir / "c1.png", dir / "c2.tif"};
  save_channel(img, 0, paths[0], 16);
  save_channel(img, 1, paths[1], 16);
  const Image back = load_image(paths);
  ASSERT_EQ(back.channels(), 2);
  for (std::size_t i = 0; i < img.data().size(); ++i)
    EXPECT_NEAR(back.data()[i], img.data()[i], 0.5 / 65535.0 + 1e-12);
}

TEST(ImageIo, EightBitScaling) {
  TempDir dir;
  Image img(1, 1, 2);
  img.at(0, 0, 1) = 1.0;
  save_channel(img, 0, dir / "a.png", 8);
  std::vector<std::filesystem::path> p{dir / "a.png"};
  const Image back = load_image(p);
  EXPECT_EQ(back.at(0, 0, 0), 0.0);
  EXPECT_EQ(back.at(0, 0, 1), 1.0);
}

TEST(ImageIo, MissingFileIsIoError) {
  std::vector<std::filesystem::path> p{"/nonexistent/deemd.png"};
  EXPECT_EQ(kind_of([&] { load_image(p); }), ErrorKind::IoError);
}
