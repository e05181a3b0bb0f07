#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "iesrgs/gaussian.hpp"
#include "iesrgs/image.hpp"

namespace iesrgs {

struct RenderSettings {
  Vec3 background{0, 0, 0};
  double min_transmittance{1e-4};  // compositing stops once T drops below this
  double cutoff_sigma{3.0};        // splat ignored beyond this Mahalanobis radius
  int tile_size{16};
  ProjectionSettings projection;
  // Per-Gaussian 3D low-pass widths; empty disables smoothing.
  std::span<const double> smoothing;
};

struct RenderResult {
  ImageBuffer image;
  DepthBuffer depth;
  // Number of (pixel, splat) pairs that entered compositing. Changes in this
  // count mark the discontinuities introduced by the cutoff and termination.
  std::size_t contributions{0};
};

/// Per-pixel loss gradients fed into render_backward. Either may be empty.
struct RenderUpstream {
  ImageBuffer d_image;
  std::vector<double> d_depth;
};

struct RenderGradients {
  std::vector<GaussianGrad> gaussians;
  std::vector<Vec2> mean2d;  // screen-space mean gradient, for densification
  std::vector<std::uint8_t> visible;  // splat overlapped the image

  explicit RenderGradients(std::size_t n = 0) : gaussians(n), mean2d(n), visible(n, 0) {}

  RenderGradients& operator+=(const RenderGradients& o) {
    IESRGS_EXPECTS(o.gaussians.size() == gaussians.size(), "gradient sets differ in size");
    for (std::size_t i = 0; i < gaussians.size(); ++i) {
      auto& a = gaussians[i];
      const auto& b = o.gaussians[i];
      a.position += b.position;
      a.scale += b.scale;
      a.rotation.w += b.rotation.w;
      a.rotation.x += b.rotation.x;
      a.rotation.y += b.rotation.y;
      a.rotation.z += b.rotation.z;
      a.color += b.color;
      a.opacity += b.opacity;
      mean2d[i].x += o.mean2d[i].x;
      mean2d[i].y += o.mean2d[i].y;
      visible[i] |= o.visible[i];
    }
    return *this;
  }
};

namespace detail {

struct Splat {
  std::size_t index{0};
  Vec2 mean;
  Sym2 conic;
  Sym2 cov;
  double opacity{0};  // after the smoothing mass factor
  Vec3 color;
  double depth{0};
  int x0{0}, x1{-1}, y0{0}, y1{-1};  // inclusive pixel bounds
  ProjectionTrace trace;
};

struct Frame {
  std::vector<Splat> splats;                    // depth-sorted, visible only
  std::vector<std::vector<std::uint32_t>> tiles;  // splat ids per tile, in depth order
  int tiles_x{0}, tiles_y{0};
};

inline Frame prepare_frame(std::span<const Gaussian3D> scene, const Camera& cam,
                           const RenderSettings& settings) {
  IESRGS_EXPECTS(settings.smoothing.empty() || settings.smoothing.size() == scene.size(),
                 "smoothing widths must match the scene");
  IESRGS_EXPECTS(cam.width >= 1 && cam.height >= 1, "camera dimensions must be positive");
  Frame frame;
  frame.splats.reserve(scene.size());
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const Gaussian3D& g = scene[i];
    const double sigma = settings.smoothing.empty() ? 0.0 : settings.smoothing[i];
    Splat s;
    const Projected2D p = project_traced(g, cam, sigma, settings.projection, &s.trace);
    if (!p.visible) continue;
    s.index = i;
    s.mean = p.mean2d;
    s.cov = p.cov2d;
    s.conic = p.cov2d.inverse();
    s.opacity = g.opacity * s.trace.opacity_factor;
    s.color = g.color;
    s.depth = p.depth;
    const double radius = settings.cutoff_sigma * std::sqrt(p.cov2d.max_eigenvalue());
    const double fx0 = std::ceil(p.mean2d.x - radius - 0.5);
    const double fx1 = std::floor(p.mean2d.x + radius - 0.5);
    const double fy0 = std::ceil(p.mean2d.y - radius - 0.5);
    const double fy1 = std::floor(p.mean2d.y + radius - 0.5);
    if (fx1 < 0 || fy1 < 0 || fx0 > cam.width - 1 || fy0 > cam.height - 1) continue;
    s.x0 = static_cast<int>(std::max(0.0, fx0));
    s.x1 = static_cast<int>(std::min<double>(cam.width - 1, fx1));
    s.y0 = static_cast<int>(std::max(0.0, fy0));
    s.y1 = static_cast<int>(std::min<double>(cam.height - 1, fy1));
    frame.splats.push_back(s);
  }
  std::stable_sort(frame.splats.begin(), frame.splats.end(),
                   [](const Splat& a, const Splat& b) { return a.depth < b.depth; });

  const int ts = settings.tile_size;
  frame.tiles_x = (cam.width + ts - 1) / ts;
  frame.tiles_y = (cam.height + ts - 1) / ts;
  frame.tiles.assign(static_cast<std::size_t>(frame.tiles_x) * frame.tiles_y, {});
  for (std::uint32_t id = 0; id < frame.splats.size(); ++id) {
    const Splat& s = frame.splats[id];
    for (int ty = s.y0 / ts; ty <= s.y1 / ts; ++ty)
      for (int tx = s.x0 / ts; tx <= s.x1 / ts; ++tx)
        frame.tiles[static_cast<std::size_t>(ty) * frame.tiles_x + tx].push_back(id);
  }
  return frame;
}

struct Contribution {
  std::uint32_t splat;
  double alpha;          // alpha' = opacity * g2d
  double g2d;
  double transmittance;  // T before this splat
  double dx, dy;         // pixel center minus mean
};

/// Front-to-back compositing of one pixel over a depth-ordered splat list.
/// Returns final transmittance; appends contributors when `out` is given.
inline double composite_pixel(const Frame& frame, std::span<const std::uint32_t> list, int x, int y,
                              const RenderSettings& settings, double color[3], double& depth,
                              std::vector<Contribution>* out) {
  const double px = x + 0.5, py = y + 0.5;
  const double cutoff2 = settings.cutoff_sigma * settings.cutoff_sigma;
  double T = 1.0;
  for (const std::uint32_t id : list) {
    const Splat& s = frame.splats[id];
    if (x < s.x0 || x > s.x1 || y < s.y0 || y > s.y1) continue;
    const double dx = px - s.mean.x, dy = py - s.mean.y;
    const double maha = s.conic.a * dx * dx + 2.0 * s.conic.b * dx * dy + s.conic.c * dy * dy;
    if (maha > cutoff2) continue;
    const double g2d = std::exp(-0.5 * maha);
    const double alpha = s.opacity * g2d;
    const double w = alpha * T;
    color[0] += s.color.x * w;
    color[1] += s.color.y * w;
    color[2] += s.color.z * w;
    depth += s.depth * w;
    if (out) out->push_back({id, alpha, g2d, T, dx, dy});
    T *= 1.0 - alpha;
    if (T < settings.min_transmittance) break;
  }
  return T;
}

}  // namespace detail

/// Tile-based forward rasterization of color, expected depth and coverage.
inline RenderResult render(std::span<const Gaussian3D> scene, const Camera& cam,
                           const RenderSettings& settings = {}) {
  const detail::Frame frame = detail::prepare_frame(scene, cam, settings);
  RenderResult result{ImageBuffer(cam.width, cam.height, 3), DepthBuffer(cam.width, cam.height), 0};
  std::vector<detail::Contribution> scratch;
  const int ts = settings.tile_size;
  for (int ty = 0; ty < frame.tiles_y; ++ty)
    for (int tx = 0; tx < frame.tiles_x; ++tx) {
      const auto& list = frame.tiles[static_cast<std::size_t>(ty) * frame.tiles_x + tx];
      for (int y = ty * ts; y < std::min(cam.height, (ty + 1) * ts); ++y)
        for (int x = tx * ts; x < std::min(cam.width, (tx + 1) * ts); ++x) {
          double color[3] = {0, 0, 0};
          double depth = 0;
          scratch.clear();
          const double T = detail::composite_pixel(frame, list, x, y, settings, color, depth, &scratch);
          result.contributions += scratch.size();
          for (int c = 0; c < 3; ++c) result.image.at(x, y, c) = color[c] + T * settings.background[c];
          const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
          result.depth.data[p] = depth;
          result.depth.coverage[p] = 1.0 - T;
        }
    }
  return result;
}

/// Rendering at `factor` times the camera's resolution by scaling its
/// intrinsics. The principal point scales linearly with the dimensions.
inline RenderResult sr_splat(std::span<const Gaussian3D> scene, const Camera& cam, double factor,
                             const RenderSettings& settings = {}) {
  if (!(factor >= 1.0)) throw std::invalid_argument("sr_splat: factor must be >= 1");
  if (factor == 1.0) return render(scene, cam, settings);
  return render(scene, cam.scaled(factor), settings);
}

/// Exact reverse pass of render() for the given per-pixel upstream gradients.
inline RenderGradients render_backward(std::span<const Gaussian3D> scene, const Camera& cam,
                                       const RenderUpstream& upstream,
                                       const RenderSettings& settings = {}) {
  const bool has_image = !upstream.d_image.data.empty();
  const bool has_depth = !upstream.d_depth.empty();
  if (has_image)
    IESRGS_EXPECTS(upstream.d_image.width == cam.width && upstream.d_image.height == cam.height &&
                       upstream.d_image.channels == 3,
                   "image gradient must match the render");
  if (has_depth)
    IESRGS_EXPECTS(upstream.d_depth.size() == static_cast<std::size_t>(cam.width) * cam.height,
                   "depth gradient must match the render");

  RenderGradients grads(scene.size());
  if (!has_image && !has_depth) return grads;

  const detail::Frame frame = detail::prepare_frame(scene, cam, settings);
  const std::size_t n = frame.splats.size();
  std::vector<double> d_alpha(n, 0.0), d_depth(n, 0.0);
  std::vector<Vec2> d_mean(n);
  std::vector<Sym2> d_conic(n);
  std::vector<Vec3> d_color(n);

  std::vector<detail::Contribution> contribs;
  const int ts = settings.tile_size;
  for (int ty = 0; ty < frame.tiles_y; ++ty)
    for (int tx = 0; tx < frame.tiles_x; ++tx) {
      const auto& list = frame.tiles[static_cast<std::size_t>(ty) * frame.tiles_x + tx];
      if (list.empty()) continue;
      for (int y = ty * ts; y < std::min(cam.height, (ty + 1) * ts); ++y)
        for (int x = tx * ts; x < std::min(cam.width, (tx + 1) * ts); ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
          const double gc[3] = {has_image ? upstream.d_image.at(x, y, 0) : 0.0,
                                has_image ? upstream.d_image.at(x, y, 1) : 0.0,
                                has_image ? upstream.d_image.at(x, y, 2) : 0.0};
          const double gd = has_depth ? upstream.d_depth[p] : 0.0;
          if (gc[0] == 0.0 && gc[1] == 0.0 && gc[2] == 0.0 && gd == 0.0) continue;

          double color[3] = {0, 0, 0};
          double depth = 0;
          contribs.clear();
          detail::composite_pixel(frame, list, x, y, settings, color, depth, &contribs);

          // Suffix accumulators: what lies behind splat k, background included.
          double suffix_c[3] = {settings.background.x, settings.background.y, settings.background.z};
          double suffix_d = 0.0;
          for (std::size_t k = contribs.size(); k-- > 0;) {
            const auto& ct = contribs[k];
            const detail::Splat& s = frame.splats[ct.splat];
            const double w = ct.alpha * ct.transmittance;
            double da = gd * (s.depth - suffix_d);
            for (int c = 0; c < 3; ++c) da += gc[c] * (s.color[c] - suffix_c[c]);
            da *= ct.transmittance;

            d_color[ct.splat] += Vec3{gc[0] * w, gc[1] * w, gc[2] * w};
            d_depth[ct.splat] += gd * w;

            // alpha' = opacity * exp(power), power = -0.5 d^T Q d, d = pixel - mean
            d_alpha[ct.splat] += da * ct.g2d;
            const double dpower = da * ct.alpha;
            const Sym2& Q = s.conic;
            d_mean[ct.splat].x += dpower * (Q.a * ct.dx + Q.b * ct.dy);
            d_mean[ct.splat].y += dpower * (Q.b * ct.dx + Q.c * ct.dy);
            d_conic[ct.splat].a += -0.5 * dpower * ct.dx * ct.dx;
            d_conic[ct.splat].b += -0.5 * dpower * ct.dx * ct.dy;
            d_conic[ct.splat].c += -0.5 * dpower * ct.dy * ct.dy;

            for (int c = 0; c < 3; ++c) suffix_c[c] = ct.alpha * s.color[c] + (1.0 - ct.alpha) * suffix_c[c];
            suffix_d = ct.alpha * s.depth + (1.0 - ct.alpha) * suffix_d;
          }
        }
    }

  for (std::size_t id = 0; id < n; ++id) {
    const detail::Splat& s = frame.splats[id];
    GaussianGrad& out = grads.gaussians[s.index];
    out.color += d_color[id];
    // dL/dCov = -Q G Q for the symmetric full-convention gradient G.
    const Sym2& Q = s.conic;
    const Sym2& G = d_conic[id];
    const double qg00 = Q.a * G.a + Q.b * G.b, qg01 = Q.a * G.b + Q.b * G.c;
    const double qg10 = Q.b * G.a + Q.c * G.b, qg11 = Q.b * G.b + Q.c * G.c;
    const Sym2 d_cov{-(qg00 * Q.a + qg01 * Q.b), -(qg00 * Q.b + qg01 * Q.c), -(qg10 * Q.b + qg11 * Q.c)};
    project_backward(scene[s.index], s.trace, cam, d_mean[id], d_cov, d_depth[id], d_alpha[id], out);
    grads.mean2d[s.index] = d_mean[id];
    grads.visible[s.index] = 1;
  }
  return grads;
}

}  // namespace iesrgs
