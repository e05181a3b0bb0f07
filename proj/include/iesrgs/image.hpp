#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "iesrgs/math.hpp"

namespace iesrgs {

/// Dense row-major raster, channel-interleaved.
struct ImageBuffer {
  int width{0};
  int height{0};
  int channels{3};
  std::vector<double> data;

  ImageBuffer() = default;
  ImageBuffer(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {
    IESRGS_EXPECTS(w >= 1 && h >= 1, "image dimensions must be positive");
    IESRGS_EXPECTS(c == 1 || c == 3, "images have 1 or 3 channels");
  }

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  std::size_t size() const { return data.size(); }
  std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
  double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }

  bool same_shape(const ImageBuffer& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

/// Composited depth plus accumulated alpha.
struct DepthBuffer {
  int width{0};
  int height{0};
  std::vector<double> data;
  std::vector<double> coverage;

  DepthBuffer() = default;
  DepthBuffer(int w, int h, double depth_fill = 0.0, double coverage_fill = 0.0)
      : width(w),
        height(h),
        data(static_cast<std::size_t>(w) * h, depth_fill),
        coverage(static_cast<std::size_t>(w) * h, coverage_fill) {
    IESRGS_EXPECTS(w >= 1 && h >= 1, "depth dimensions must be positive");
  }

  std::size_t size() const { return data.size(); }
  bool same_shape(const DepthBuffer& o) const { return width == o.width && height == o.height; }

  friend bool operator==(const DepthBuffer&, const DepthBuffer&) = default;
};

/// Binary per-pixel mask; values are exactly 0 or 1.
struct MaskBuffer {
  int width{0};
  int height{0};
  std::vector<std::uint8_t> data;

  MaskBuffer() = default;
  MaskBuffer(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  std::size_t size() const { return data.size(); }

  MaskBuffer complement() const {
    MaskBuffer out = *this;
    for (auto& v : out.data) v = v ? 0 : 1;
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v;
    return n;
  }

  friend bool operator==(const MaskBuffer&, const MaskBuffer&) = default;
};

}  // namespace iesrgs
