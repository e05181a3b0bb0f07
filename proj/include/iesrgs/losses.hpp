#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "iesrgs/image.hpp"
#include "iesrgs/render.hpp"
#include "iesrgs/ssim.hpp"

namespace iesrgs {

/// Raised for invalid user-facing configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PearsonMode { Global, Patch };
enum class MaskedSsimMode { Substitute, MultiplyMap };

/// Which references supervise texture. Fused is the mask-guided split; the
/// others exist for ablations.
enum class TextureMode { Fused, ExternalOnly, InternalOnly, Sum };

struct LossConfig {
  double lambda_ds{0.2};
  double lambda_i{0.001};
  double lambda_e{0.0001};
  double threshold{0.6};
  double epsilon{1e-6};
  SsimSettings ssim;
  double min_coverage{0.05};  // depth pixels below this coverage are invalid
  PearsonMode pearson_mode{PearsonMode::Global};
  int patch_size{16};
  MaskedSsimMode masked_ssim{MaskedSsimMode::Substitute};
  TextureMode texture_mode{TextureMode::Fused};

  void validate() const {
    if (!(lambda_ds >= 0.0 && lambda_ds <= 1.0)) throw ConfigError("lambda_ds must lie in [0, 1]");
    if (!(lambda_i >= 0.0)) throw ConfigError("lambda_i must be >= 0");
    if (!(lambda_e >= 0.0)) throw ConfigError("lambda_e must be >= 0");
    if (!(threshold >= 0.0)) throw ConfigError("threshold must be >= 0");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (ssim.window < 3 || ssim.window % 2 == 0) throw ConfigError("ssim_window must be odd and >= 3");
    if (!(ssim.sigma > 0.0)) throw ConfigError("ssim_sigma must be > 0");
    if (patch_size < 2) throw ConfigError("patch_size must be >= 2");
  }
};

/// Scalar loss with its gradient w.r.t the first (rendered) image.
struct ImageLoss {
  double value{0};
  ImageBuffer grad;
};

enum class DepthLossStatus { Ok, Constant, TooFewPixels };

struct DepthLoss {
  double value{0};
  std::vector<double> grad;  // w.r.t. rendered depth
  DepthLossStatus status{DepthLossStatus::Ok};
};

/// Mean |a - b| over unmasked entries; gradient w.r.t. a.
inline ImageLoss l1_loss(const ImageBuffer& a, const ImageBuffer& b, const MaskBuffer* mask = nullptr) {
  IESRGS_EXPECTS(a.same_shape(b), "l1_loss operands must match");
  if (mask) IESRGS_EXPECTS(mask->width == a.width && mask->height == a.height, "mask must match");
  ImageLoss out{0.0, ImageBuffer(a.width, a.height, a.channels)};
  std::size_t count = 0;
  for (std::size_t p = 0; p < a.pixel_count(); ++p) {
    if (mask && !mask->data[p]) continue;
    count += a.channels;
  }
  if (count == 0) return out;
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t p = 0; p < a.pixel_count(); ++p) {
    if (mask && !mask->data[p]) continue;
    for (int c = 0; c < a.channels; ++c) {
      const std::size_t i = p * a.channels + c;
      const double d = a.data[i] - b.data[i];
      out.value += std::abs(d);
      out.grad.data[i] = (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) * inv;
    }
  }
  out.value *= inv;
  return out;
}

/// (1 - SSIM(a, b)) / 2 with a Gaussian window and reflect padding.
inline ImageLoss dssim_loss(const ImageBuffer& a, const ImageBuffer& b, const SsimSettings& s = {}) {
  IESRGS_EXPECTS(a.same_shape(b), "dssim_loss operands must match");
  SsimResult r = ssim_weighted(a, b, s);
  for (auto& g : r.grad.data) g *= -0.5;
  return {0.5 * r.dissimilarity, std::move(r.grad)};
}

/// Masked D-SSIM. Substitute replaces masked-out pixels of `a` by the
/// reference before windowing; MultiplyMap averages the SSIM map over the
/// unmasked pixels only.
inline ImageLoss masked_dssim_loss(const ImageBuffer& a, const ImageBuffer& ref, const MaskBuffer& mask,
                                   const LossConfig& cfg) {
  IESRGS_EXPECTS(a.same_shape(ref), "dssim operands must match");
  const std::size_t n = a.pixel_count();
  const std::size_t kept = mask.count();
  ImageLoss out{0.0, ImageBuffer(a.width, a.height, a.channels)};
  if (kept == 0) return out;
  if (cfg.masked_ssim == MaskedSsimMode::Substitute) {
    ImageBuffer mixed = a;
    for (std::size_t p = 0; p < n; ++p)
      if (!mask.data[p])
        for (int c = 0; c < a.channels; ++c) mixed.data[p * a.channels + c] = ref.data[p * a.channels + c];
    ImageLoss full = dssim_loss(mixed, ref, cfg.ssim);
    for (std::size_t p = 0; p < n; ++p)
      if (!mask.data[p])
        for (int c = 0; c < a.channels; ++c) full.grad.data[p * a.channels + c] = 0.0;
    return full;
  }
  std::vector<double> weights(n, 0.0);
  const double w = 1.0 / static_cast<double>(kept * a.channels);
  for (std::size_t p = 0; p < n; ++p) weights[p] = mask.data[p] ? w : 0.0;
  SsimResult r = ssim_weighted(a, ref, cfg.ssim, weights);
  for (auto& g : r.grad.data) g *= -0.5;
  return {0.5 * r.dissimilarity, std::move(r.grad)};
}

namespace detail {

constexpr double kVarianceFloor = 1e-8;

/// 1 - Pearson correlation over the listed pixels; gradient scattered into
/// `grad` with weight `scale`.
inline DepthLoss pearson_over(const DepthBuffer& r, const DepthBuffer& e, const std::vector<std::size_t>& px,
                              double scale, std::vector<double>& grad) {
  DepthLoss out;
  if (px.size() < 2) {
    out.status = DepthLossStatus::TooFewPixels;
    return out;
  }
  const double n = static_cast<double>(px.size());
  double mr = 0, me = 0;
  for (auto i : px) {
    mr += r.data[i];
    me += e.data[i];
  }
  mr /= n;
  me /= n;
  double vr = 0, ve = 0, cov = 0;
  for (auto i : px) {
    const double dr = r.data[i] - mr, de = e.data[i] - me;
    vr += dr * dr;
    ve += de * de;
    cov += dr * de;
  }
  vr /= n;
  ve /= n;
  cov /= n;
  auto is_constant = [](double var, double mean) { return var <= 1e-14 * (1.0 + mean * mean); };
  if (is_constant(vr, mr) || is_constant(ve, me)) {
    out.value = 1.0;
    out.status = DepthLossStatus::Constant;
    return out;
  }
  const double vr_f = vr + kVarianceFloor, ve_f = ve + kVarianceFloor;
  const double denom = std::sqrt(vr_f * ve_f);
  const double rho = cov / denom;
  out.value = 1.0 - rho;
  for (auto i : px) {
    const double dr = r.data[i] - mr, de = e.data[i] - me;
    const double d_rho = de / (n * denom) - rho * dr / (n * vr_f);
    grad[i] += -scale * d_rho;
  }
  return out;
}

}  // namespace detail

/// 1 - Cov(r, e) / sqrt(Var r Var e) over pixels where the rendered coverage
/// reaches cfg.min_coverage. Patch mode averages the same quantity over
/// non-overlapping P x P patches.
inline DepthLoss pearson_depth_loss(const DepthBuffer& r, const DepthBuffer& e, const LossConfig& cfg = {}) {
  IESRGS_EXPECTS(r.same_shape(e), "pearson_depth_loss operands must match");
  DepthLoss out;
  out.grad.assign(r.size(), 0.0);
  if (cfg.pearson_mode == PearsonMode::Global) {
    std::vector<std::size_t> px;
    for (std::size_t i = 0; i < r.size(); ++i)
      if (r.coverage[i] >= cfg.min_coverage) px.push_back(i);
    DepthLoss d = detail::pearson_over(r, e, px, 1.0, out.grad);
    out.value = d.value;
    out.status = d.status;
    return out;
  }

  const int P = cfg.patch_size;
  std::vector<std::vector<std::size_t>> patches;
  for (int py = 0; py < r.height; py += P)
    for (int px0 = 0; px0 < r.width; px0 += P) {
      std::vector<std::size_t> px;
      for (int y = py; y < std::min(r.height, py + P); ++y)
        for (int x = px0; x < std::min(r.width, px0 + P); ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * r.width + x;
          if (r.coverage[i] >= cfg.min_coverage) px.push_back(i);
        }
      if (px.size() >= 2) patches.push_back(std::move(px));
    }
  if (patches.empty()) {
    out.status = DepthLossStatus::TooFewPixels;
    return out;
  }
  const double scale = 1.0 / static_cast<double>(patches.size());
  for (const auto& px : patches) out.value += scale * detail::pearson_over(r, e, px, scale, out.grad).value;
  return out;
}

/// Mean |r - i| over pixels valid in both buffers.
inline DepthLoss internal_geom_loss(const DepthBuffer& r, const DepthBuffer& i, const LossConfig& cfg = {}) {
  IESRGS_EXPECTS(r.same_shape(i), "internal_geom_loss operands must match");
  DepthLoss out;
  out.grad.assign(r.size(), 0.0);
  std::size_t count = 0;
  for (std::size_t p = 0; p < r.size(); ++p)
    if (r.coverage[p] >= cfg.min_coverage && i.coverage[p] >= cfg.min_coverage) ++count;
  if (count == 0) {
    out.status = DepthLossStatus::TooFewPixels;
    return out;
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t p = 0; p < r.size(); ++p) {
    if (!(r.coverage[p] >= cfg.min_coverage && i.coverage[p] >= cfg.min_coverage)) continue;
    const double d = r.data[p] - i.data[p];
    out.value += std::abs(d);
    out.grad[p] = (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) * inv;
  }
  out.value *= inv;
  return out;
}

/// (1 - lambda) L1 + lambda D-SSIM of `rendered` against `ref`, optionally
/// restricted to a mask. Gradient is w.r.t. `rendered`.
inline ImageLoss texture_loss(const ImageBuffer& ref, const ImageBuffer& rendered, const LossConfig& cfg,
                              const MaskBuffer* mask = nullptr) {
  IESRGS_EXPECTS(ref.same_shape(rendered), "texture_loss operands must match");
  ImageLoss l1 = l1_loss(rendered, ref, mask);
  const double lam = cfg.lambda_ds;
  ImageLoss out{(1.0 - lam) * l1.value, std::move(l1.grad)};
  for (auto& g : out.grad.data) g *= 1.0 - lam;
  if (lam == 0.0) return out;
  const ImageLoss ds = mask ? masked_dssim_loss(rendered, ref, *mask, cfg) : dssim_loss(rendered, ref, cfg.ssim);
  out.value += lam * ds.value;
  for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad.data[i] += lam * ds.grad.data[i];
  return out;
}

/// D(p) = mean over channels of |I - E| / (I + eps).
inline ImageBuffer discrepancy_map(const ImageBuffer& internal, const ImageBuffer& external, double epsilon) {
  IESRGS_EXPECTS(internal.same_shape(external), "discrepancy operands must match");
  IESRGS_EXPECTS(epsilon > 0.0, "epsilon must be positive");
  ImageBuffer d(internal.width, internal.height, 1);
  const int C = internal.channels;
  for (std::size_t p = 0; p < internal.pixel_count(); ++p) {
    double acc = 0;
    for (int c = 0; c < C; ++c) {
      const double iv = internal.data[p * C + c], ev = external.data[p * C + c];
      acc += std::abs(iv - ev) / (iv + epsilon);
    }
    d.data[p] = acc / C;
  }
  return d;
}

/// M(p) = 1 iff D(p) >= T.
inline MaskBuffer binary_mask(const ImageBuffer& d, double threshold) {
  IESRGS_EXPECTS(d.channels == 1, "discrepancy map must be single-channel");
  IESRGS_EXPECTS(threshold >= 0.0, "threshold must be non-negative");
  MaskBuffer m(d.width, d.height);
  for (std::size_t p = 0; p < d.pixel_count(); ++p) m.data[p] = d.data[p] >= threshold ? 1 : 0;
  return m;
}

struct FusedTextureLoss {
  double value{0};
  double internal_term{0};
  double external_term{0};
  ImageBuffer grad;
  MaskBuffer mask;
};

/// Mask-guided texture supervision: internal reference where the two
/// references disagree (M = 1), external elsewhere. A precomputed mask for
/// this view may be passed in.
inline FusedTextureLoss fused_texture_loss(const ImageBuffer& rendered, const ImageBuffer& internal,
                                           const ImageBuffer& external, const LossConfig& cfg,
                                           const MaskBuffer* mask = nullptr) {
  IESRGS_EXPECTS(rendered.same_shape(internal) && rendered.same_shape(external),
                 "fused_texture_loss buffers must match");
  FusedTextureLoss out;
  out.mask = mask ? *mask : binary_mask(discrepancy_map(internal, external, cfg.epsilon), cfg.threshold);
  const MaskBuffer inv = out.mask.complement();
  ImageLoss li = texture_loss(internal, rendered, cfg, &out.mask);
  const ImageLoss le = texture_loss(external, rendered, cfg, &inv);
  out.internal_term = li.value;
  out.external_term = le.value;
  out.value = li.value + le.value;
  out.grad = std::move(li.grad);
  for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad.data[i] += le.grad.data[i];
  return out;
}

struct FusedGeometryLoss {
  double value{0};
  double internal_term{0};
  double external_term{0};
  std::vector<double> grad;
};

/// lambda_i L1(I_depth, R_depth) + lambda_e Pearson(R_depth, E_depth).
inline FusedGeometryLoss fused_geometry_loss(const DepthBuffer& rendered, const DepthBuffer& internal,
                                             const DepthBuffer& external, const LossConfig& cfg) {
  IESRGS_EXPECTS(rendered.same_shape(internal) && rendered.same_shape(external),
                 "fused_geometry_loss buffers must match");
  FusedGeometryLoss out;
  out.grad.assign(rendered.size(), 0.0);
  if (cfg.lambda_i != 0.0) {
    const DepthLoss li = internal_geom_loss(rendered, internal, cfg);
    out.internal_term = li.value;
    for (std::size_t p = 0; p < out.grad.size(); ++p) out.grad[p] += cfg.lambda_i * li.grad[p];
  }
  if (cfg.lambda_e != 0.0) {
    const DepthLoss le = pearson_depth_loss(rendered, external, cfg);
    out.external_term = le.value;
    for (std::size_t p = 0; p < out.grad.size(); ++p) out.grad[p] += cfg.lambda_e * le.grad[p];
  }
  out.value = cfg.lambda_i * out.internal_term + cfg.lambda_e * out.external_term;
  return out;
}

/// Internal and external references for one view at the supervision
/// resolution.
struct GuidanceView {
  ImageBuffer external_image;
  DepthBuffer external_depth;
  ImageBuffer internal_image;
  DepthBuffer internal_depth;
};

struct FinalLoss {
  double total{0};
  double texture{0};
  double geometry{0};
  RenderUpstream upstream;
};

/// Texture term (mask-fused unless an ablation mode is selected) plus the
/// weighted geometric term, with gradients ready for render_backward.
inline FinalLoss final_loss(const ImageBuffer& rendered, const DepthBuffer& rendered_depth,
                            const GuidanceView& g, const LossConfig& cfg, const MaskBuffer* mask = nullptr) {
  FinalLoss out;
  ImageBuffer grad;
  switch (cfg.texture_mode) {
    case TextureMode::Fused: {
      FusedTextureLoss t = fused_texture_loss(rendered, g.internal_image, g.external_image, cfg, mask);
      out.texture = t.value;
      grad = std::move(t.grad);
      break;
    }
    case TextureMode::ExternalOnly: {
      ImageLoss t = texture_loss(g.external_image, rendered, cfg);
      out.texture = t.value;
      grad = std::move(t.grad);
      break;
    }
    case TextureMode::InternalOnly: {
      ImageLoss t = texture_loss(g.internal_image, rendered, cfg);
      out.texture = t.value;
      grad = std::move(t.grad);
      break;
    }
    case TextureMode::Sum: {
      ImageLoss te = texture_loss(g.external_image, rendered, cfg);
      const ImageLoss ti = texture_loss(g.internal_image, rendered, cfg);
      out.texture = te.value + ti.value;
      for (std::size_t i = 0; i < te.grad.size(); ++i) te.grad.data[i] += ti.grad.data[i];
      grad = std::move(te.grad);
      break;
    }
  }
  FusedGeometryLoss geo = fused_geometry_loss(rendered_depth, g.internal_depth, g.external_depth, cfg);
  out.geometry = geo.value;
  out.total = out.texture + out.geometry;
  out.upstream.d_image = std::move(grad);
  out.upstream.d_depth = std::move(geo.grad);
  return out;
}

}  // namespace iesrgs
