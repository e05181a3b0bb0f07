#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "iesrgs/image.hpp"

namespace iesrgs {

struct SsimSettings {
  int window{11};
  double sigma{1.5};
  double c1{0.01 * 0.01};
  double c2{0.03 * 0.03};
};

namespace detail {

inline std::vector<double> gaussian_kernel(int window, double sigma) {
  std::vector<double> k(window);
  const int half = window / 2;
  double sum = 0;
  for (int i = 0; i < window; ++i) {
    const double d = i - half;
    k[i] = std::exp(-d * d / (2 * sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

/// Mirror index without repeating the edge sample (d c b | a b c d | c b a),
/// folded as often as needed, so windows wider than the image stay valid.
inline int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// reflect(i + j - half, n) for every output index i and tap j, row-major.
inline std::vector<int> reflect_table(int n, int taps) {
  const int half = taps / 2;
  std::vector<int> t(static_cast<std::size_t>(n) * taps);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < taps; ++j) t[static_cast<std::size_t>(i) * taps + j] = reflect(i + j - half, n);
  return t;
}

/// Separable reflect-padded correlation of one plane.
inline std::vector<double> blur(std::span<const double> src, int w, int h, std::span<const double> k) {
  const int taps = static_cast<int>(k.size());
  const auto rx = reflect_table(w, taps), ry = reflect_table(h, taps);
  std::vector<double> tmp(src.size()), out(src.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    const double* row = src.data() + static_cast<std::size_t>(y) * w;
    for (int x = 0; x < w; ++x) {
      const int* ix = rx.data() + static_cast<std::size_t>(x) * taps;
      double s = 0;
      for (int j = 0; j < taps; ++j) s += k[j] * row[ix[j]];
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  }
  // Row-at-a-time vertical pass; per output the taps still accumulate in order.
  for (int y = 0; y < h; ++y) {
    const int* iy = ry.data() + static_cast<std::size_t>(y) * taps;
    double* dst = out.data() + static_cast<std::size_t>(y) * w;
    for (int j = 0; j < taps; ++j) {
      const double* srow = tmp.data() + static_cast<std::size_t>(iy[j]) * w;
      const double kj = k[j];
      for (int x = 0; x < w; ++x) dst[x] += kj * srow[x];
    }
  }
  return out;
}

/// Transpose of blur().
inline std::vector<double> blur_adjoint(std::span<const double> g, int w, int h, std::span<const double> k) {
  const int taps = static_cast<int>(k.size());
  const auto rx = reflect_table(w, taps), ry = reflect_table(h, taps);
  std::vector<double> tmp(g.size(), 0.0), out(g.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    const int* iy = ry.data() + static_cast<std::size_t>(y) * taps;
    const double* grow = g.data() + static_cast<std::size_t>(y) * w;
    for (int j = 0; j < taps; ++j) {
      double* trow = tmp.data() + static_cast<std::size_t>(iy[j]) * w;
      const double kj = k[j];
      for (int x = 0; x < w; ++x) trow[x] += kj * grow[x];
    }
  }
  for (int y = 0; y < h; ++y) {
    double* row = out.data() + static_cast<std::size_t>(y) * w;
    for (int x = 0; x < w; ++x) {
      const int* ix = rx.data() + static_cast<std::size_t>(x) * taps;
      const double v = tmp[static_cast<std::size_t>(y) * w + x];
      for (int j = 0; j < taps; ++j) row[ix[j]] += k[j] * v;
    }
  }
  return out;
}

inline std::vector<double> channel_plane(const ImageBuffer& img, int c) {
  std::vector<double> p(img.pixel_count());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = img.data[i * img.channels + c];
  return p;
}

}  // namespace detail

struct SsimResult {
  double value{0};    // sum over pixels/channels of weight * SSIM map
  double dissimilarity{0};  // sum of weight * (1 - SSIM map); exact 0 on identical inputs
  ImageBuffer grad;   // d value / d a
  ImageBuffer map;    // per-pixel SSIM
};

/// Weighted sum of the SSIM map of `a` against `b`, with its gradient w.r.t
/// `a`. `pixel_weights` (one per pixel, shared by all channels) defaults to
/// the uniform mean over pixels and channels.
inline SsimResult ssim_weighted(const ImageBuffer& a, const ImageBuffer& b, const SsimSettings& s,
                                std::span<const double> pixel_weights = {}, bool want_grad = true) {
  IESRGS_EXPECTS(a.same_shape(b), "SSIM operands must have matching shapes");
  IESRGS_EXPECTS(s.window >= 3 && s.window % 2 == 1, "SSIM window must be odd and >= 3");
  const int w = a.width, h = a.height;
  const std::size_t n = a.pixel_count();
  const auto kernel = detail::gaussian_kernel(s.window, s.sigma);
  const double uniform = 1.0 / static_cast<double>(n * a.channels);

  SsimResult out;
  out.map = ImageBuffer(w, h, a.channels);
  if (want_grad) out.grad = ImageBuffer(w, h, a.channels);

  for (int c = 0; c < a.channels; ++c) {
    const auto x = detail::channel_plane(a, c);
    const auto y = detail::channel_plane(b, c);
    std::vector<double> xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::blur(x, w, h, kernel);
    const auto my = detail::blur(y, w, h, kernel);
    const auto exx = detail::blur(xx, w, h, kernel);
    const auto eyy = detail::blur(yy, w, h, kernel);
    const auto exy = detail::blur(xy, w, h, kernel);

    std::vector<double> d_mx(n), d_exx(n), d_exy(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double vx = exx[i] - mx[i] * mx[i];
      const double vy = eyy[i] - my[i] * my[i];
      const double cxy = exy[i] - mx[i] * my[i];
      const double A1 = 2 * mx[i] * my[i] + s.c1, A2 = 2 * cxy + s.c2;
      const double B1 = mx[i] * mx[i] + my[i] * my[i] + s.c1, B2 = vx + vy + s.c2;
      const double S = (A1 / B1) * (A2 / B2);
      const double wgt = pixel_weights.empty() ? uniform : pixel_weights[i];
      out.map.data[i * a.channels + c] = S;
      out.value += wgt * S;
      out.dissimilarity += wgt * (1.0 - S);
      if (!want_grad) continue;
      const double inv = 1.0 / (B1 * B2);
      // Partials w.r.t. the raw moments (mx, exx, exy) of the first operand.
      d_mx[i] = wgt * (2 * my[i] * A2 * inv - 2 * my[i] * A1 * inv - 2 * mx[i] * S / B1 + 2 * mx[i] * S / B2);
      d_exx[i] = wgt * (-S / B2);
      d_exy[i] = wgt * (2 * A1 * inv);
    }
    if (!want_grad) continue;
    const auto g_mx = detail::blur_adjoint(d_mx, w, h, kernel);
    const auto g_exx = detail::blur_adjoint(d_exx, w, h, kernel);
    const auto g_exy = detail::blur_adjoint(d_exy, w, h, kernel);
    for (std::size_t i = 0; i < n; ++i)
      out.grad.data[i * a.channels + c] = g_mx[i] + 2 * x[i] * g_exx[i] + y[i] * g_exy[i];
  }
  return out;
}

/// Mean SSIM over pixels and channels.
inline double ssim(const ImageBuffer& a, const ImageBuffer& b, const SsimSettings& s = {}) {
  return ssim_weighted(a, b, s, {}, false).value;
}

}  // namespace iesrgs
