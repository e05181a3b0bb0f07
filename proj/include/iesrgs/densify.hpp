#pragma once

#include <cmath>
#include <cstddef>
#include <ostream>
#include <vector>

#include "iesrgs/optimizer.hpp"
#include "iesrgs/rng.hpp"

namespace iesrgs {

/// Running screen-space gradient magnitudes since the last densification.
struct DensifyStats {
  std::vector<double> grad_accum;
  std::vector<double> count;

  explicit DensifyStats(std::size_t n = 0) : grad_accum(n, 0.0), count(n, 0.0) {}
  std::size_t size() const { return grad_accum.size(); }

  /// Adds the gradient of one rendered view. Pixel-space gradients are
  /// converted to normalized device coordinates (x W/2, y H/2) so the
  /// threshold does not depend on image resolution.
  void accumulate(const RenderGradients& g, int width, int height) {
    IESRGS_EXPECTS(g.mean2d.size() == size(), "gradient rows must match the statistics");
    for (std::size_t i = 0; i < size(); ++i) {
      if (!g.visible[i]) continue;
      const double gx = g.mean2d[i].x * 0.5 * width, gy = g.mean2d[i].y * 0.5 * height;
      grad_accum[i] += std::sqrt(gx * gx + gy * gy);
      count[i] += 1.0;
    }
  }
};

struct DensifySettings {
  double grad_threshold{0.0002};
  double percent_dense{0.01};     // clone/split boundary as a fraction of scene extent
  double prune_opacity{0.005};
  double split_scale_divisor{1.6};
  int split_count{2};
  std::size_t max_gaussians{100000};
};

struct DensifyReport {
  std::size_t cloned{0};
  std::size_t split{0};
  std::size_t pruned{0};
  bool capped{false};
};

/// Clones small and splits large high-gradient Gaussians, then prunes those
/// below the opacity threshold. Optimizer rows follow their Gaussians (new
/// rows copy the source's moments); statistics are reset.
inline DensifyReport densify_and_prune(ParamSet& params, OptimizerState& state, DensifyStats& stats,
                                       double scene_extent, const DensifySettings& cfg, Rng& rng,
                                       std::ostream* log = nullptr) {
  IESRGS_EXPECTS(state.size() == params.size() && stats.size() == params.size(),
                 "parameters, optimizer state and statistics must have equal rows");
  DensifyReport report;
  const std::size_t n = params.size();
  std::vector<int> action(n, 0);  // 0 keep, 1 clone, 2 split
  std::size_t growth = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (stats.count[i] == 0) continue;
    if (stats.grad_accum[i] / stats.count[i] < cfg.grad_threshold) continue;
    const Gaussian3D g = activate(params.rows[i]);
    const double max_scale = std::max({g.scale.x, g.scale.y, g.scale.z});
    action[i] = max_scale <= cfg.percent_dense * scene_extent ? 1 : 2;
    growth += action[i] == 1 ? 1 : static_cast<std::size_t>(cfg.split_count - 1);
  }
  if (growth > 0 && n + growth > cfg.max_gaussians) {
    report.capped = true;
    std::fill(action.begin(), action.end(), 0);
    if (log) *log << "warning: Gaussian cap " << cfg.max_gaussians << " reached; densification skipped\n";
  }

  ParamSet next;
  OptimizerState next_state;
  next_state.step = state.step;
  auto push = [&](const RawParams& p, std::size_t src) {
    next.rows.push_back(p);
    next_state.m.push_back(state.m[src]);
    next_state.v.push_back(state.v[src]);
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (action[i] != 2) {
      push(params.rows[i], i);
      if (action[i] == 1) {
        push(params.rows[i], i);
        ++report.cloned;
      }
      continue;
    }
    ++report.split;
    const Gaussian3D g = activate(params.rows[i]);
    const Mat3 R = g.rotation_matrix();
    for (int k = 0; k < cfg.split_count; ++k) {
      const Vec3 local{rng.normal() * g.scale.x, rng.normal() * g.scale.y, rng.normal() * g.scale.z};
      Gaussian3D child = g;
      child.position = g.position + R * local;
      child.scale = g.scale * (1.0 / cfg.split_scale_divisor);
      RawParams row = params.rows[i];
      const RawParams converted = to_raw(child);
      for (int s = 0; s < 6; ++s) row[s] = converted[s];
      push(row, i);
    }
  }

  // Prune by opacity.
  ParamSet kept;
  OptimizerState kept_state;
  kept_state.step = next_state.step;
  for (std::size_t i = 0; i < next.size(); ++i) {
    if (sigmoid(next.rows[i][13]) < cfg.prune_opacity) {
      ++report.pruned;
      continue;
    }
    kept.rows.push_back(next.rows[i]);
    kept_state.m.push_back(next_state.m[i]);
    kept_state.v.push_back(next_state.v[i]);
  }
  params = std::move(kept);
  state = std::move(kept_state);
  stats = DensifyStats(params.size());
  IESRGS_EXPECTS(state.size() == params.size(), "optimizer state out of sync after densification");
  return report;
}

}  // namespace iesrgs
