#pragma once

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iesrgs/gaussian.hpp"
#include "iesrgs/image.hpp"

namespace iesrgs {

/// Failure to read or write a file; the message names the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

inline void write_f32_array(std::ostream& os, const std::vector<double>& values) {
  std::vector<float> f(values.begin(), values.end());
  os.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
}

inline std::vector<double> read_f32_array(std::istream& is, std::size_t n) {
  std::vector<float> f(n);
  is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(n * sizeof(float)));
  return {f.begin(), f.end()};
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

}  // namespace detail

// ---------------------------------------------------------------- FIMG

/// Raw float raster: magic "FIMG", u32 width, height, channels, then f32 data.
/// Any channel count is stored; depth rasters use 1 (or 2 with coverage).
struct FloatRaster {
  int width{0};
  int height{0};
  int channels{0};
  std::vector<double> data;
};

inline void write_fimg(const std::filesystem::path& path, const FloatRaster& r) {
  IESRGS_EXPECTS(r.data.size() == static_cast<std::size_t>(r.width) * r.height * r.channels,
                 "FIMG payload size must match its header");
  detail::ensure_parent(path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write("FIMG", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(r.width));
  detail::write_u32(os, static_cast<std::uint32_t>(r.height));
  detail::write_u32(os, static_cast<std::uint32_t>(r.channels));
  detail::write_f32_array(os, r.data);
  if (!os) throw IoError("write failed: " + path.string());
}

inline FloatRaster read_fimg(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "FIMG") throw IoError("not a FIMG file: " + path.string());
  FloatRaster r;
  r.width = static_cast<int>(detail::read_u32(is));
  r.height = static_cast<int>(detail::read_u32(is));
  r.channels = static_cast<int>(detail::read_u32(is));
  if (!is || r.width <= 0 || r.height <= 0 || r.channels <= 0 || r.width > (1 << 16) || r.height > (1 << 16) ||
      r.channels > 16)
    throw IoError("bad FIMG header: " + path.string());
  r.data = detail::read_f32_array(is, static_cast<std::size_t>(r.width) * r.height * r.channels);
  if (!is) throw IoError("truncated FIMG payload: " + path.string());
  return r;
}

inline void write_fimg(const std::filesystem::path& path, const ImageBuffer& img) {
  write_fimg(path, FloatRaster{img.width, img.height, img.channels, img.data});
}

inline ImageBuffer read_fimg_image(const std::filesystem::path& path) {
  FloatRaster r = read_fimg(path);
  if (r.channels != 1 && r.channels != 3) throw IoError("FIMG image must have 1 or 3 channels: " + path.string());
  ImageBuffer img(r.width, r.height, r.channels);
  img.data = std::move(r.data);
  return img;
}

/// Depth as FIMG: 1 channel (depth only, full coverage) or 2 (depth, coverage).
inline void write_fimg_depth(const std::filesystem::path& path, const DepthBuffer& d, bool with_coverage = true) {
  FloatRaster r{d.width, d.height, with_coverage ? 2 : 1, {}};
  r.data.reserve(d.size() * r.channels);
  for (std::size_t i = 0; i < d.size(); ++i) {
    r.data.push_back(d.data[i]);
    if (with_coverage) r.data.push_back(d.coverage[i]);
  }
  write_fimg(path, r);
}

inline DepthBuffer read_fimg_depth(const std::filesystem::path& path) {
  const FloatRaster r = read_fimg(path);
  if (r.channels != 1 && r.channels != 2) throw IoError("FIMG depth must have 1 or 2 channels: " + path.string());
  DepthBuffer d(r.width, r.height, 0.0, 1.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    d.data[i] = r.data[i * r.channels];
    if (r.channels == 2) d.coverage[i] = r.data[i * 2 + 1];
  }
  return d;
}

// ---------------------------------------------------------------- PNG

/// Reads an 8/16-bit PNG as value/255 (no gamma transform). Gray stays
/// 1-channel; alpha is dropped; palettes are expanded to RGB.
inline ImageBuffer read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  ImageBuffer img(static_cast<int>(image.width), static_cast<int>(image.height), gray ? 1 : 3);
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = buf[i] / 255.0;
  return img;
}

/// Writes round(clamp(v,0,1)·255) as an 8-bit gray or RGB PNG.
inline void write_png(const std::filesystem::path& path, const ImageBuffer& img) {
  detail::ensure_parent(path);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> buf(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::isfinite(img.data[i]) ? std::clamp(img.data[i], 0.0, 1.0) : 0.0;
    buf[i] = static_cast<png_byte>(std::lround(v * 255.0));
  }
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
}

/// Reads a PNG or FIMG image by extension.
inline ImageBuffer read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".fimg") return read_fimg_image(path);
  if (ext == ".png") return read_png(path);
  throw IoError("unsupported image extension: " + path.string());
}

/// Gray visualization of depth, near = bright, normalized over covered pixels.
inline ImageBuffer depth_visualization(const DepthBuffer& d, double min_coverage = 0.05) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.coverage[i] >= min_coverage) {
      const double z = d.data[i] / d.coverage[i];
      lo = std::min(lo, z);
      hi = std::max(hi, z);
    }
  ImageBuffer img(d.width, d.height, 1, 0.0);
  if (!(hi >= lo)) return img;
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.coverage[i] >= min_coverage) img.data[i] = 1.0 - 0.8 * (d.data[i] / d.coverage[i] - lo) / span;
  return img;
}

inline ImageBuffer mask_visualization(const MaskBuffer& m) {
  ImageBuffer img(m.width, m.height, 1);
  for (std::size_t i = 0; i < m.size(); ++i) img.data[i] = m.data[i] ? 1.0 : 0.0;
  return img;
}

/// Side-by-side tiles (all heights equal after nearest upscale to the tallest).
inline ImageBuffer hstack(const std::vector<ImageBuffer>& tiles, int gap = 2) {
  IESRGS_EXPECTS(!tiles.empty(), "hstack needs at least one tile");
  int h = 0;
  for (const auto& t : tiles) h = std::max(h, t.height);
  std::vector<int> widths;
  int total = 0;
  for (const auto& t : tiles) {
    const int w = static_cast<int>(std::lround(static_cast<double>(t.width) * h / t.height));
    widths.push_back(w);
    total += w + gap;
  }
  ImageBuffer out(total - gap, h, 3, 1.0);
  int x0 = 0;
  for (std::size_t k = 0; k < tiles.size(); ++k) {
    const auto& t = tiles[k];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < widths[k]; ++x) {
        const int sx = std::min(t.width - 1, x * t.width / widths[k]);
        const int sy = std::min(t.height - 1, y * t.height / h);
        for (int c = 0; c < 3; ++c) out.at(x0 + x, y, c) = t.at(sx, sy, t.channels == 1 ? 0 : c);
      }
    x0 += widths[k] + gap;
  }
  return out;
}

// ---------------------------------------------------------------- Scene

/// One Gaussian per line: `px py pz sx sy sz qw qx qy qz r g b a`; `#` comments.
inline void write_scene(const std::filesystem::path& path, const std::vector<Gaussian3D>& scene) {
  detail::ensure_parent(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "# px py pz sx sy sz qw qx qy qz r g b a\n";
  for (const auto& g : scene) {
    const double v[14] = {g.position.x, g.position.y, g.position.z, g.scale.x,   g.scale.y,
                          g.scale.z,    g.rotation.w, g.rotation.x, g.rotation.y, g.rotation.z,
                          g.color.x,    g.color.y,    g.color.z,    g.opacity};
    for (int k = 0; k < 14; ++k) os << (k ? " " : "") << detail::format_double(v[k]);
    os << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<Gaussian3D> read_scene(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::vector<Gaussian3D> scene;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    double v[14];
    int n = 0;
    while (n < 14 && ss >> v[n]) ++n;
    if (n == 0 && ss.eof()) continue;
    std::string extra;
    if (n != 14 || (ss >> extra))
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 14 numbers per Gaussian");
    Gaussian3D g;
    g.position = {v[0], v[1], v[2]};
    g.scale = {v[3], v[4], v[5]};
    g.rotation = {v[6], v[7], v[8], v[9]};
    g.color = {v[10], v[11], v[12]};
    g.opacity = v[13];
    scene.push_back(g);
  }
  return scene;
}

// ---------------------------------------------------------------- Cameras

/// Records of the form
///   view <id>                 (optional)
///   fx <v> fy <v> cx <v> cy <v> w <n> h <n>
///   r00 r01 r02 t0
///   r10 r11 r12 t1
///   r20 r21 r22 t2
/// where the 3x4 matrix maps world to camera coordinates.
inline void write_cameras(const std::filesystem::path& path, const std::vector<Camera>& cams) {
  detail::ensure_parent(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  const auto f = detail::format_double;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const Camera& c = cams[i];
    os << "view " << i << '\n';
    os << "fx " << f(c.focal.x) << " fy " << f(c.focal.y) << " cx " << f(c.principal_point.x) << " cy "
       << f(c.principal_point.y) << " w " << c.width << " h " << c.height << '\n';
    for (int r = 0; r < 3; ++r)
      os << f(c.rotation(r, 0)) << ' ' << f(c.rotation(r, 1)) << ' ' << f(c.rotation(r, 2)) << ' '
         << f(c.translation[r]) << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<Camera> read_cameras(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(is, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    for (std::string tok; ss >> tok;) tokens.push_back(tok);
  }
  std::vector<Camera> cams;
  std::size_t i = 0;
  auto fail = [&](const std::string& why) { throw IoError(path.string() + ": " + why); };
  auto number = [&]() {
    if (i >= tokens.size()) fail("unexpected end of camera record");
    try {
      std::size_t used = 0;
      const double v = std::stod(tokens[i], &used);
      if (used != tokens[i].size()) fail("bad number '" + tokens[i] + "'");
      ++i;
      return v;
    } catch (const std::logic_error&) {
      fail("bad number '" + tokens[i] + "'");
    }
    return 0.0;
  };
  auto labeled = [&](const char* label) {
    if (i >= tokens.size() || tokens[i] != label) fail(std::string("expected label '") + label + "'");
    ++i;
    return number();
  };
  while (i < tokens.size()) {
    if (tokens[i] == "view") i += 2;
    Camera c;
    c.focal.x = labeled("fx");
    c.focal.y = labeled("fy");
    c.principal_point.x = labeled("cx");
    c.principal_point.y = labeled("cy");
    const double w = labeled("w"), h = labeled("h");
    if (w < 1 || h < 1 || w != std::floor(w) || h != std::floor(h)) fail("image size must be positive integers");
    c.width = static_cast<int>(w);
    c.height = static_cast<int>(h);
    for (int r = 0; r < 3; ++r) {
      for (int k = 0; k < 3; ++k) c.rotation(r, k) = number();
      c.translation[r] = number();
    }
    cams.push_back(c);
  }
  return cams;
}

// ---------------------------------------------------------------- 3D filter

/// Per-Gaussian 3D filter widths of a trained model, one per line.
inline void write_filter(const std::filesystem::path& path, const std::vector<double>& sigma) {
  detail::ensure_parent(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "# 3D smoothing filter sigma per Gaussian\n";
  for (double v : sigma) os << detail::format_double(v) << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<double> read_filter(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::vector<double> out;
  std::string line;
  while (std::getline(is, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    double v;
    if (ss >> v) out.push_back(v);
  }
  return out;
}

}  // namespace iesrgs
