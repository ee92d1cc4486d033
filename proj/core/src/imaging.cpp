#include "deemd/imaging.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "deemd/common.hpp"

namespace deemd {

Image::Image(int channels, int height, int width, double fill)
    : channels_(channels), height_(height), width_(width) {
  if (channels <= 0 || height <= 0 || width <= 0)
    fail(ErrorKind::DimensionMismatch, "image dimensions must be positive");
  data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
}

Image Image::channel_image(int c) const {
  Image out(1, height_, width_);
  std::copy_n(channel(c).begin(), plane_size(), out.data().begin());
  if (static_cast<std::size_t>(c) < channel_names.size()) out.channel_names = {channel_names[c]};
  return out;
}

Image load_image(std::span<const std::filesystem::path> channel_files) {
  if (channel_files.empty()) fail(ErrorKind::EmptyInput, "no channel files");
  Image out;
  for (std::size_t c = 0; c < channel_files.size(); ++c) {
    const auto& path = channel_files[c];
    if (!std::filesystem::exists(path)) fail(ErrorKind::IoError, "missing image " + path.string());
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_GRAYSCALE);
    if (mat.empty()) fail(ErrorKind::IoError, "cannot decode " + path.string());
    double scale = 1.0;
    switch (mat.depth()) {
      case CV_8U: scale = 1.0 / 255.0; break;
      case CV_16U: scale = 1.0 / 65535.0; break;
      case CV_32F:
      case CV_64F: scale = 1.0; break;
      default: fail(ErrorKind::IoError, "unsupported bit depth in " + path.string());
    }
    if (c == 0) {
      out = Image(static_cast<int>(channel_files.size()), mat.rows, mat.cols);
    } else if (mat.rows != out.height() || mat.cols != out.width()) {
      fail(ErrorKind::DimensionMismatch, "channel size differs in " + path.string());
    }
    cv::Mat converted;
    mat.convertTo(converted, CV_64F, scale);
    auto dst = out.channel(static_cast<int>(c));
    for (int y = 0; y < mat.rows; ++y) {
      const double* row = converted.ptr<double>(y);
      std::copy_n(row, mat.cols, dst.begin() + static_cast<std::ptrdiff_t>(y) * mat.cols);
    }
    out.channel_names.push_back(path.stem().string());
  }
  for (double v : out.data()) {
    if (!std::isfinite(v)) fail(ErrorKind::IoError, "non-finite pixel value");
  }
  return out;
}

void save_channel(const Image& image, int c, const std::filesystem::path& path, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) fail(ErrorKind::IoError, "bit depth must be 8 or 16");
  const double max_value = bit_depth == 8 ? 255.0 : 65535.0;
  cv::Mat mat(image.height(), image.width(), bit_depth == 8 ? CV_8UC1 : CV_16UC1);
  auto src = image.channel(c);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      const double v = std::clamp(src[static_cast<std::size_t>(y) * image.width() + x], 0.0, 1.0);
      const double q = std::nearbyint(v * max_value);
      if (bit_depth == 8)
        mat.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(q);
      else
        mat.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(q);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat)) fail(ErrorKind::IoError, "cannot write " + path.string());
}

Image stitch_sites(std::span<const Image> sites) {
  if (sites.size() != 4)
    fail(ErrorKind::DimensionMismatch, "stitching needs 4 sites, got " + std::to_string(sites.size()));
  const int c = sites[0].channels(), h = sites[0].height(), w = sites[0].width();
  for (const auto& s : sites) {
    if (s.channels() != c || s.height() != h || s.width() != w)
      fail(ErrorKind::DimensionMismatch, "site images differ in shape");
  }
  Image out(c, 2 * h, 2 * w);
  out.channel_names = sites[0].channel_names;
  for (int q = 0; q < 4; ++q) {
    const int oy = (q / 2) * h, ox = (q % 2) * w;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(ch, oy + y, ox + x) = sites[q].at(ch, y, x);
  }
  return out;
}

Image center_crop(const Image& image, int height, int width) {
  if (height > image.height() || width > image.width() || height <= 0 || width <= 0)
    fail(ErrorKind::DimensionMismatch, "crop larger than image");
  const int oy = (image.height() - height) / 2, ox = (image.width() - width) / 2;
  Image out(image.channels(), height, width);
  out.channel_names = image.channel_names;
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) out.at(c, y, x) = image.at(c, oy + y, ox + x);
  return out;
}

bool GridConfig::tiles(int dim) const {
  return patch_size > 0 && stride > 0 && stride <= patch_size && dim >= patch_size &&
         (dim - patch_size) % stride == 0;
}

int GridConfig::patches_per_axis(int dim) const {
  if (!tiles(dim)) return 0;
  return (dim - patch_size) / stride + 1;
}

int GridConfig::patch_count(int height, int width) const {
  return patches_per_axis(height) * patches_per_axis(width);
}

void GridConfig::validate(int height, int width) const {
  if (!tiles(height) || !tiles(width)) {
    fail(ErrorKind::GridMismatch, "grid (patch " + std::to_string(patch_size) + ", stride " +
                                      std::to_string(stride) + ") does not tile " +
                                      std::to_string(height) + "x" + std::to_string(width));
  }
}

PatchOrigin patch_origin(const GridConfig& grid, int width, int index) {
  const int cols = grid.patches_per_axis(width);
  return {(index / cols) * grid.stride, (index % cols) * grid.stride};
}

Image extract_patch(const Image& image, const GridConfig& grid, int index) {
  const auto o = patch_origin(grid, image.width(), index);
  const int p = grid.patch_size;
  Image out(image.channels(), p, p);
  for (int c = 0; c < image.channels(); ++c) {
    auto src = image.channel(c);
    auto dst = out.channel(c);
    for (int y = 0; y < p; ++y) {
      const auto* row = src.data() + static_cast<std::size_t>(o.y + y) * image.width() + o.x;
      std::copy_n(row, p, dst.data() + static_cast<std::size_t>(y) * p);
    }
  }
  return out;
}

std::vector<Patch> extract_patches(const Image& image, const GridConfig& grid) {
  grid.validate(image.height(), image.width());
  const int n = grid.patch_count(image.height(), image.width());
  std::vector<Patch> patches;
  patches.reserve(n);
  for (int j = 0; j < n; ++j)
    patches.push_back({j, patch_origin(grid, image.width(), j), extract_patch(image, grid, j)});
  return patches;
}

void ChannelStatsAccumulator::add(const Image& image) {
  if (count_ == 0.0) {
    mean_.assign(image.channels(), 0.0);
    m2_.assign(image.channels(), 0.0);
  } else if (static_cast<int>(mean_.size()) != image.channels()) {
    fail(ErrorKind::ChannelMismatch, "images with differing channel counts");
  }
  const double nb = static_cast<double>(image.plane_size());
  for (int c = 0; c < image.channels(); ++c) {
    auto px = image.channel(c);
    double mean_b = 0.0;
    for (double v : px) mean_b += v;
    mean_b /= nb;
    double m2_b = 0.0;
    for (double v : px) m2_b += (v - mean_b) * (v - mean_b);
    const double na = count_, n = na + nb;
    const double delta = mean_b - mean_[c];
    mean_[c] += delta * nb / n;
    m2_[c] += m2_b + delta * delta * na * nb / n;
  }
  count_ += nb;
}

ChannelStats ChannelStatsAccumulator::finish() const {
  if (count_ == 0.0) fail(ErrorKind::EmptyInput, "no training images for channel statistics");
  ChannelStats s;
  s.mean = mean_;
  for (double m2 : m2_) s.stddev.push_back(std::max(std::sqrt(m2 / count_), ChannelStats::kStdFloor));
  return s;
}

ChannelStats compute_channel_stats(std::span<const Image> train_images) {
  ChannelStatsAccumulator acc;
  for (const auto& img : train_images) acc.add(img);
  return acc.finish();
}

Image normalize(const Image& image, const ChannelStats& stats) {
  if (stats.channels() != image.channels())
    fail(ErrorKind::ChannelMismatch, std::to_string(stats.channels()) + " channel stats vs " +
                                         std::to_string(image.channels()) + " channel image");
  Image out = image;
  for (int c = 0; c < image.channels(); ++c) {
    const double m = stats.mean[c], s = stats.stddev[c];
    for (double& v : out.channel(c)) v = (v - m) / s;
  }
  return out;
}

Image denormalize(const Image& image, const ChannelStats& stats) {
  if (stats.channels() != image.channels()) fail(ErrorKind::ChannelMismatch, "channel count");
  Image out = image;
  for (int c = 0; c < image.channels(); ++c) {
    const double m = stats.mean[c], s = stats.stddev[c];
    for (double& v : out.channel(c)) v = v * s + m;
  }
  return out;
}

}  // namespace deemd
