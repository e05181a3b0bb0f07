#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "iesrgs/gaussian.hpp"
#include "iesrgs/render.hpp"

namespace iesrgs {

/// Unconstrained per-Gaussian parameters, laid out as
///   [0,3) position, [3,6) softplus-inverse scale, [6,10) quaternion (w,x,y,z),
///   [10,13) logit color, [13] logit opacity.
using RawParams = std::array<double, 14>;

enum class ParamGroup { Position, Scale, Rotation, Color, Opacity };
inline constexpr int kGroupBegin[6] = {0, 3, 6, 10, 13, 14};

/// Lower clamp when mapping activated values back to logits, so colors or
/// opacities of exactly 0 or 1 stay finite.
inline constexpr double kLogitClamp = 1e-6;

inline RawParams to_raw(const Gaussian3D& g) {
  auto clamped_logit = [](double v) { return logit(std::clamp(v, kLogitClamp, 1.0 - kLogitClamp)); };
  const Quat q = g.rotation.normalized();
  return {g.position.x,
          g.position.y,
          g.position.z,
          softplus_inverse(g.scale.x),
          softplus_inverse(g.scale.y),
          softplus_inverse(g.scale.z),
          q.w,
          q.x,
          q.y,
          q.z,
          clamped_logit(g.color.x),
          clamped_logit(g.color.y),
          clamped_logit(g.color.z),
          clamped_logit(g.opacity)};
}

inline Gaussian3D activate(const RawParams& p) {
  Gaussian3D g;
  g.position = {p[0], p[1], p[2]};
  g.scale = {softplus(p[3]), softplus(p[4]), softplus(p[5])};
  g.rotation = Quat{p[6], p[7], p[8], p[9]}.normalized();
  g.color = {sigmoid(p[10]), sigmoid(p[11]), sigmoid(p[12])};
  g.opacity = sigmoid(p[13]);
  return g;
}

/// Gradient w.r.t. the raw parameters from a gradient w.r.t. activated ones.
/// The quaternion gradient from the renderer already includes the
/// normalization Jacobian, so it passes through unchanged.
inline RawParams raw_gradient(const RawParams& p, const GaussianGrad& g) {
  auto dsoftplus = [](double x) { return sigmoid(x); };
  auto dsigmoid = [](double x) {
    const double s = sigmoid(x);
    return s * (1 - s);
  };
  return {g.position.x,
          g.position.y,
          g.position.z,
          g.scale.x * dsoftplus(p[3]),
          g.scale.y * dsoftplus(p[4]),
          g.scale.z * dsoftplus(p[5]),
          g.rotation.w,
          g.rotation.x,
          g.rotation.y,
          g.rotation.z,
          g.color.x * dsigmoid(p[10]),
          g.color.y * dsigmoid(p[11]),
          g.color.z * dsigmoid(p[12]),
          g.opacity * dsigmoid(p[13])};
}

/// The live optimization variables.
struct ParamSet {
  std::vector<RawParams> rows;

  static ParamSet from_scene(std::span<const Gaussian3D> scene) {
    ParamSet p;
    p.rows.reserve(scene.size());
    for (const auto& g : scene) p.rows.push_back(to_raw(g));
    return p;
  }

  std::vector<Gaussian3D> scene() const {
    std::vector<Gaussian3D> s;
    s.reserve(rows.size());
    for (const auto& r : rows) s.push_back(activate(r));
    return s;
  }

  std::size_t size() const { return rows.size(); }
  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

struct AdamSettings {
  double beta1{0.9};
  double beta2{0.999};
  double epsilon{1e-8};
};

/// Per-group learning rates.
struct LearningRates {
  double position{1.6e-4};
  double scale{5e-3};
  double rotation{1e-3};
  double color{2.5e-3};
  double opacity{5e-2};

  double for_group(int g) const {
    switch (g) {
      case 0: return position;
      case 1: return scale;
      case 2: return rotation;
      case 3: return color;
      default: return opacity;
    }
  }
};

/// First/second moment rows aligned with ParamSet::rows.
struct OptimizerState {
  std::vector<RawParams> m;
  std::vector<RawParams> v;
  std::size_t step{0};

  explicit OptimizerState(std::size_t n = 0) : m(n, RawParams{}), v(n, RawParams{}) {}
  std::size_t size() const { return m.size(); }
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

struct StepReport {
  std::size_t nonfinite_zeroed{0};
};

/// One bias-corrected adaptive-moment step, then renormalization of every
/// quaternion. Non-finite gradient entries are zeroed and counted.
inline StepReport optimizer_step(ParamSet& params, std::vector<RawParams> grads, OptimizerState& state,
                                 const LearningRates& lr, const AdamSettings& adam = {}) {
  IESRGS_EXPECTS(grads.size() == params.size() && state.size() == params.size(),
                 "parameters, gradients and optimizer state must have equal rows");
  StepReport report;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(adam.beta1, t);
  const double bc2 = 1.0 - std::pow(adam.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    RawParams& p = params.rows[i];
    RawParams& g = grads[i];
    RawParams& m = state.m[i];
    RawParams& v = state.v[i];
    for (int group = 0; group < 5; ++group) {
      const double rate = lr.for_group(group);
      for (int k = kGroupBegin[group]; k < kGroupBegin[group + 1]; ++k) {
        if (!std::isfinite(g[k])) {
          g[k] = 0.0;
          ++report.nonfinite_zeroed;
        }
        m[k] = adam.beta1 * m[k] + (1 - adam.beta1) * g[k];
        v[k] = adam.beta2 * v[k] + (1 - adam.beta2) * g[k] * g[k];
        const double mhat = m[k] / bc1, vhat = v[k] / bc2;
        p[k] -= rate * mhat / (std::sqrt(vhat) + adam.epsilon);
      }
    }
    const Quat q = Quat{p[6], p[7], p[8], p[9]};
    const double n = q.norm();
    if (n > 0 && std::isfinite(n)) {
      p[6] /= n;
      p[7] /= n;
      p[8] /= n;
      p[9] /= n;
    } else {
      p[6] = 1;
      p[7] = p[8] = p[9] = 0;
    }
  }
  return report;
}

/// Log-linear decay from `initial` at step 0 to `final` at `max_steps`.
inline double exponential_decay(double initial, double final_value, std::size_t step, std::size_t max_steps) {
  if (max_steps == 0) return initial;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(max_steps), 0.0, 1.0);
  return std::exp(std::log(initial) * (1 - t) + std::log(final_value) * t);
}

}  // namespace iesrgs
