#pragma once

#include <cmath>
#include <limits>
#include <span>

#include "iesrgs/math.hpp"

namespace iesrgs {

/// One splat primitive in activated (constrained) form.
struct Gaussian3D {
  Vec3 position;
  Vec3 scale{1, 1, 1};  // per-axis standard deviations, strictly positive
  Quat rotation;        // unit length
  Vec3 color{0.5, 0.5, 0.5};
  double opacity{1.0};

  Mat3 rotation_matrix() const { return iesrgs::rotation_matrix(rotation.normalized()); }

  /// Sigma = R diag(scale^2) R^T
  Mat3 covariance() const {
    const Mat3 R = rotation_matrix();
    const Mat3 S2 = Mat3::diag({scale.x * scale.x, scale.y * scale.y, scale.z * scale.z});
    return R * S2 * R.transposed();
  }

  friend bool operator==(const Gaussian3D&, const Gaussian3D&) = default;
};

/// Pinhole camera with a world-to-camera rigid transform. Pixel (x, y) has its
/// center at continuous coordinates (x + 0.5, y + 0.5).
struct Camera {
  Vec2 focal{100, 100};
  Vec2 principal_point{16, 16};
  int width{32};
  int height{32};
  Mat3 rotation = Mat3::identity();
  Vec3 translation;

  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }

  /// Camera with all intrinsics multiplied by `factor`; dimensions rounded.
  Camera scaled(double factor) const {
    Camera c = *this;
    c.focal = {focal.x * factor, focal.y * factor};
    c.principal_point = {principal_point.x * factor, principal_point.y * factor};
    c.width = static_cast<int>(std::lround(width * factor));
    c.height = static_cast<int>(std::lround(height * factor));
    return c;
  }

  /// Camera at `eye` looking at `target`; +y of the image points along -up.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, Vec2 focal,
                        int width, int height) {
    auto normalize = [](Vec3 v) { return v * (1.0 / norm(v)); };
    auto cross = [](const Vec3& a, const Vec3& b) {
      return Vec3{a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
    };
    const Vec3 forward = normalize(target - eye);
    const Vec3 right = normalize(cross(forward, up));
    const Vec3 down = cross(forward, right);
    Camera c;
    c.focal = focal;
    c.principal_point = {0.5 * width, 0.5 * height};
    c.width = width;
    c.height = height;
    for (int k = 0; k < 3; ++k) {
      c.rotation(0, k) = right[k];
      c.rotation(1, k) = down[k];
      c.rotation(2, k) = forward[k];
    }
    c.translation = (c.rotation * eye) * -1.0;
    return c;
  }

  friend bool operator==(const Camera&, const Camera&) = default;
};

struct ProjectionSettings {
  double dilation{0.3};      // px^2 added to the 2D covariance diagonal
  double near_plane{0.01};   // world units
};

struct Projected2D {
  Vec2 mean2d;
  Sym2 cov2d;
  double depth{0};
  bool visible{false};
};

/// exp(-0.5 (x - mu)^T Sigma^-1 (x - mu))
inline double evaluate_density(const Gaussian3D& g, const Vec3& x) {
  const Vec3 d = x - g.position;
  const Vec3 sd = g.covariance().inverse() * d;
  return std::exp(-0.5 * dot(d, sd));
}

/// Result of convolving a Gaussian with an isotropic low-pass Gaussian.
/// Expressed as the enlarged covariance plus the opacity factor that keeps
/// the integrated mass opacity * sqrt(det Sigma) fixed.
struct SmoothedCovariance {
  Mat3 covariance;
  double opacity_factor{1.0};
};

inline SmoothedCovariance smooth_covariance(const Mat3& cov, double sigma_low) {
  if (sigma_low == 0.0) return {cov, 1.0};
  Mat3 enlarged = cov;
  const double s2 = sigma_low * sigma_low;
  enlarged(0, 0) += s2;
  enlarged(1, 1) += s2;
  enlarged(2, 2) += s2;
  return {enlarged, std::sqrt(cov.det() / enlarged.det())};
}

/// The smoothed primitive in closed form. Scale and rotation are recovered
/// from the eigen-decomposition of the enlarged covariance, which shares the
/// eigenvectors of the input: each axis variance grows by sigma_low^2.
inline Gaussian3D apply_3d_smoothing(const Gaussian3D& g, double sigma_low) {
  IESRGS_EXPECTS(sigma_low >= 0.0, "sigma_low must be non-negative");
  if (sigma_low == 0.0) return g;
  Gaussian3D out = g;
  const double s2 = sigma_low * sigma_low;
  double before = 1.0, after = 1.0;
  for (int k = 0; k < 3; ++k) {
    const double v = g.scale[k] * g.scale[k];
    before *= v;
    after *= v + s2;
    out.scale[k] = std::sqrt(v + s2);
  }
  out.opacity = g.opacity * std::sqrt(before / after);
  return out;
}

struct SamplingSettings {
  double k{0.2};
  double fallback_sigma{0.0};
  double near_plane{0.01};
};

/// Low-pass filter width from the highest sampling rate (focal / depth) over
/// the cameras that see the Gaussian's center in front of them.
inline double compute_sampling_sigma(const Gaussian3D& g, std::span<const Camera> cameras,
                                     const SamplingSettings& settings = {}) {
  double max_rate = 0.0;
  for (const Camera& cam : cameras) {
    const double z = cam.to_camera(g.position).z;
    if (z <= settings.near_plane) continue;
    max_rate = std::max(max_rate, cam.focal.x / z);
  }
  if (max_rate == 0.0) return settings.fallback_sigma;
  if (std::isinf(max_rate)) return 0.0;
  return settings.k / max_rate;
}

/// Intermediates of projecting one Gaussian, kept for the reverse pass.
struct ProjectionTrace {
  Vec3 cam_point;
  Mat3 cov3d;            // covariance after smoothing
  Mat3 cov3d_raw;        // covariance before smoothing
  double opacity_factor{1.0};
  Mat3 rotation;         // of the normalized quaternion
  Quat unit_rotation;
  // Perspective Jacobian rows: [j00 0 j02; 0 j11 j12]
  double j00{0}, j02{0}, j11{0}, j12{0};
  Mat3 cam_cov;          // W Sigma W^T
};

inline Projected2D project_traced(const Gaussian3D& g, const Camera& cam, double sigma_low,
                                  const ProjectionSettings& settings, ProjectionTrace* trace) {
  Projected2D out;
  const Vec3 t = cam.to_camera(g.position);
  out.depth = t.z;
  if (t.z <= settings.near_plane) return out;

  const Quat q = g.rotation.normalized();
  const Mat3 R = iesrgs::rotation_matrix(q);
  const Mat3 S2 = Mat3::diag({g.scale.x * g.scale.x, g.scale.y * g.scale.y, g.scale.z * g.scale.z});
  const Mat3 cov_raw = R * S2 * R.transposed();
  const SmoothedCovariance smoothed = smooth_covariance(cov_raw, sigma_low);

  const double inv_z = 1.0 / t.z;
  const double fx = cam.focal.x, fy = cam.focal.y;
  out.mean2d = {fx * t.x * inv_z + cam.principal_point.x, fy * t.y * inv_z + cam.principal_point.y};

  const double j00 = fx * inv_z, j02 = -fx * t.x * inv_z * inv_z;
  const double j11 = fy * inv_z, j12 = -fy * t.y * inv_z * inv_z;
  const Mat3& W = cam.rotation;
  const Mat3 M = W * smoothed.covariance * W.transposed();

  // J M J^T for the sparse 2x3 Jacobian.
  const double a = j00 * (j00 * M(0, 0) + j02 * M(2, 0)) + j02 * (j00 * M(0, 2) + j02 * M(2, 2));
  const double b = j00 * (j11 * M(0, 1) + j12 * M(0, 2)) + j02 * (j11 * M(2, 1) + j12 * M(2, 2));
  const double c = j11 * (j11 * M(1, 1) + j12 * M(2, 1)) + j12 * (j11 * M(1, 2) + j12 * M(2, 2));
  out.cov2d = {a + settings.dilation, b, c + settings.dilation};
  out.visible = out.cov2d.det() > 0.0;

  if (trace) {
    trace->cam_point = t;
    trace->cov3d = smoothed.covariance;
    trace->cov3d_raw = cov_raw;
    trace->opacity_factor = smoothed.opacity_factor;
    trace->rotation = R;
    trace->unit_rotation = q;
    trace->j00 = j00;
    trace->j02 = j02;
    trace->j11 = j11;
    trace->j12 = j12;
    trace->cam_cov = M;
  }
  return out;
}

/// Screen-space projection: perspective mean, EWA covariance J W Sigma W^T J^T
/// plus the fixed dilation, and camera-space depth.
inline Projected2D project(const Gaussian3D& g, const Camera& cam,
                           const ProjectionSettings& settings = {}) {
  return project_traced(g, cam, 0.0, settings, nullptr);
}

/// Gradients of a scalar with respect to one Gaussian's activated parameters.
struct GaussianGrad {
  Vec3 position;
  Vec3 scale;
  Quat rotation{0, 0, 0, 0};
  Vec3 color;
  double opacity{0};
};

/// Reverse pass of project_traced plus the smoothing opacity factor.
/// Inputs are gradients w.r.t. the projected mean, the 2D covariance (full
/// 2x2 convention, symmetric), depth, and the effective (smoothed) opacity.
inline void project_backward(const Gaussian3D& g, const ProjectionTrace& tr, const Camera& cam,
                             const Vec2& d_mean2d, const Sym2& d_cov2d, double d_depth,
                             double d_opacity_eff, GaussianGrad& out) {
  const Vec3& t = tr.cam_point;
  const double inv_z = 1.0 / t.z;
  const double fx = cam.focal.x, fy = cam.focal.y;
  const Mat3& M = tr.cam_cov;

  // Full symmetric 2x2 gradient G = [[ga, gb], [gb, gc]].
  const double ga = d_cov2d.a, gb = d_cov2d.b, gc = d_cov2d.c;

  // dL/dJ = 2 G J M, J = [[j00, 0, j02], [0, j11, j12]].
  double JM[2][3];
  for (int k = 0; k < 3; ++k) {
    JM[0][k] = tr.j00 * M(0, k) + tr.j02 * M(2, k);
    JM[1][k] = tr.j11 * M(1, k) + tr.j12 * M(2, k);
  }
  double dJ[2][3];
  for (int k = 0; k < 3; ++k) {
    dJ[0][k] = 2.0 * (ga * JM[0][k] + gb * JM[1][k]);
    dJ[1][k] = 2.0 * (gb * JM[0][k] + gc * JM[1][k]);
  }

  // dL/dM = J^T G J
  Mat3 dM;
  const double J[2][3] = {{tr.j00, 0.0, tr.j02}, {0.0, tr.j11, tr.j12}};
  const double G[2][2] = {{ga, gb}, {gb, gc}};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) s += J[i][r] * G[i][j] * J[j][c];
      dM(r, c) = s;
    }
  const Mat3& W = cam.rotation;
  Mat3 d_cov3d = W.transposed() * dM * W;

  // Opacity factor sqrt(det Sigma / det Sigma'): d/dSigma = f/2 (Sigma^-1 - Sigma'^-1).
  out.opacity += d_opacity_eff * tr.opacity_factor;
  if (!(tr.cov3d == tr.cov3d_raw)) {
    const double d_factor = d_opacity_eff * g.opacity;
    const Mat3 diff = tr.cov3d_raw.inverse() - tr.cov3d.inverse();
    d_cov3d += diff * (0.5 * d_factor * tr.opacity_factor);
  }

  // Sigma = R S^2 R^T
  const Mat3& R = tr.rotation;
  const Mat3 RtGR = R.transposed() * d_cov3d * R;
  for (int k = 0; k < 3; ++k) out.scale[k] += 2.0 * g.scale[k] * RtGR(k, k);
  const Mat3 S2 = Mat3::diag({g.scale.x * g.scale.x, g.scale.y * g.scale.y, g.scale.z * g.scale.z});
  const Mat3 dR = (d_cov3d + d_cov3d.transposed()) * R * S2;
  const Quat dq_unit = rotation_matrix_vjp(tr.unit_rotation, dR);
  const Quat& q = tr.unit_rotation;
  const double qn = g.rotation.norm();
  const double proj = q.w * dq_unit.w + q.x * dq_unit.x + q.y * dq_unit.y + q.z * dq_unit.z;
  out.rotation.w += (dq_unit.w - q.w * proj) / qn;
  out.rotation.x += (dq_unit.x - q.x * proj) / qn;
  out.rotation.y += (dq_unit.y - q.y * proj) / qn;
  out.rotation.z += (dq_unit.z - q.z * proj) / qn;

  // Camera-space point through the mean, the Jacobian, and depth.
  Vec3 dt;
  dt.x = d_mean2d.x * fx * inv_z;
  dt.y = d_mean2d.y * fy * inv_z;
  dt.z = -d_mean2d.x * fx * t.x * inv_z * inv_z - d_mean2d.y * fy * t.y * inv_z * inv_z + d_depth;
  const double inv_z2 = inv_z * inv_z, inv_z3 = inv_z2 * inv_z;
  dt.z += dJ[0][0] * (-fx * inv_z2) + dJ[0][2] * (2.0 * fx * t.x * inv_z3) +
          dJ[1][1] * (-fy * inv_z2) + dJ[1][2] * (2.0 * fy * t.y * inv_z3);
  dt.x += dJ[0][2] * (-fx * inv_z2);
  dt.y += dJ[1][2] * (-fy * inv_z2);
  out.position += W.transposed() * dt;
}

}  // namespace iesrgs
