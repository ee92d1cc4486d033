#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace deemd {

/// Channel-major [channels x height x width] tensor of doubles. Used both for
/// whole sample images and for patches.
class Image {
 public:
  Image() = default;
  Image(int channels, int height, int width, double fill = 0.0);

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t plane_size() const { return static_cast<std::size_t>(height_) * width_; }
  bool empty() const { return data_.empty(); }

  double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  double at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::span<double> channel(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
  std::span<const double> channel(int c) const {
    return {data_.data() + c * plane_size(), plane_size()};
  }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  /// Copy of a single channel as a one-channel image.
  Image channel_image(int c) const;

  std::vector<std::string> channel_names;

  friend bool operator==(const Image& a, const Image& b) {
    return a.channels_ == b.channels_ && a.height_ == b.height_ && a.width_ == b.width_ &&
           a.data_ == b.data_;
  }

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

/// Loads one grayscale file per channel (8- or 16-bit PNG/TIFF) and scales
/// intensities to [0,1].
Image load_image(std::span<const std::filesystem::path> channel_files);

/// Writes channel `c` (values clamped to [0,1]) as a grayscale PNG/TIFF.
void save_channel(const Image& image, int c, const std::filesystem::path& path, int bit_depth = 16);

/// Stitches four equally sized site images in 2x2 order (1,2 / 3,4).
Image stitch_sites(std::span<const Image> sites);

/// Center crop to (height, width) for sources that do not tile the grid.
Image center_crop(const Image& image, int height, int width);

struct GridConfig {
  int patch_size = 256;
  int stride = 128;

  /// Single full-image patch; the whole-image baseline configuration.
  static GridConfig whole_image(int size) { return {size, size}; }

  bool tiles(int dim) const;
  int patches_per_axis(int dim) const;
  int patch_count(int height, int width) const;
  /// Throws GridMismatch unless the grid tiles (height, width) exactly.
  void validate(int height, int width) const;
};

struct PatchOrigin {
  int y = 0;
  int x = 0;
};

/// Row-major origin of patch `index`: index = row * cols + col.
PatchOrigin patch_origin(const GridConfig& grid, int width, int index);

struct Patch {
  int index = 0;
  PatchOrigin origin;
  Image pixels;
};

std::vector<Patch> extract_patches(const Image& image, const GridConfig& grid);
Image extract_patch(const Image& image, const GridConfig& grid, int index);

struct ChannelStats {
  static constexpr double kStdFloor = 1e-6;
  std::vector<double> mean;
  std::vector<double> stddev;  // population convention, floored at kStdFloor

  int channels() const { return static_cast<int>(mean.size()); }
};

/// Streaming per-channel mean/variance (Chan et al. pairwise merge).
class ChannelStatsAccumulator {
 public:
  void add(const Image& image);
  bool empty() const { return count_ == 0; }
  /// Throws EmptyInput if nothing was added.
  ChannelStats finish() const;

 private:
  double count_ = 0.0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

ChannelStats compute_channel_stats(std::span<const Image> train_images);

Image normalize(const Image& image, const ChannelStats& stats);
Image denormalize(const Image& image, const ChannelStats& stats);

}  // namespace deemd
