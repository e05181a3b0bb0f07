#pragma once

#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iesrgs/config.hpp"
#include "iesrgs/densify.hpp"
#include "iesrgs/guidance.hpp"
#include "iesrgs/losses.hpp"
#include "iesrgs/metrics.hpp"
#include "iesrgs/optimizer.hpp"
#include "iesrgs/render.hpp"
#include "iesrgs/rng.hpp"

namespace iesrgs {

/// One calibrated low-resolution training image.
struct TrainView {
  ViewId id;
  Camera camera;
  ImageBuffer image;
};

/// Raised when the loss stops being finite (CLI exit code 3).
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::vector<double> recent)
      : std::runtime_error(what + describe(recent)), recent_(std::move(recent)) {}
  const std::vector<double>& recent_losses() const { return recent_; }

 private:
  static std::string describe(const std::vector<double>& r) {
    if (r.empty()) return "; no earlier losses";
    std::string s = "; last losses:";
    for (double v : r) s += " " + metric_string(v);
    return s;
  }
  std::vector<double> recent_;
};

struct LogRow {
  std::size_t step{0};
  double loss_total{0};
  double loss_tex{0};
  double loss_gem{0};
  double psnr_holdout{std::numeric_limits<double>::quiet_NaN()};  // NaN when not evaluated
  std::size_t num_gaussians{0};
};

inline void write_training_log(const std::filesystem::path& path, const std::vector<LogRow>& rows) {
  detail::ensure_parent(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "step,loss_total,loss_tex,loss_gem,psnr_holdout,num_gaussians\n";
  for (const auto& r : rows)
    os << r.step << ',' << metric_string(r.loss_total) << ',' << metric_string(r.loss_tex) << ','
       << metric_string(r.loss_gem) << ',' << metric_string(r.psnr_holdout) << ',' << r.num_gaussians << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

/// Loss and gradient of one view under the current scene.
struct ViewLoss {
  double total{0};
  double texture{0};
  double geometry{0};
  RenderGradients grads;
};

using ViewObjective =
    std::function<ViewLoss(std::span<const Gaussian3D> scene, std::size_t view, const RenderSettings& settings)>;

/// What a training stage optimizes: per-view objectives at the training
/// resolution, and the cameras that define it.
struct StageProblem {
  std::vector<Camera> cameras;
  ViewObjective objective;
};

/// Holdout PSNR of the current scene.
using HoldoutEval = std::function<double(std::span<const Gaussian3D> scene, const RenderSettings& settings)>;

struct TrainResult {
  ParamSet params;
  OptimizerState state;
  std::vector<LogRow> log;
  std::size_t nonfinite_zeroed{0};
  std::size_t densify_events{0};

  std::vector<Gaussian3D> scene() const { return params.scene(); }
};

/// Radius of the camera centers around their mean, padded by 10%.
inline double scene_extent(std::span<const Camera> cams) {
  IESRGS_EXPECTS(!cams.empty(), "need at least one camera");
  std::vector<Vec3> centers;
  Vec3 mean;
  for (const auto& c : cams) {
    const Vec3 center = c.rotation.transposed() * (c.translation * -1.0);
    centers.push_back(center);
    mean += center;
  }
  mean = mean * (1.0 / static_cast<double>(cams.size()));
  double r = 0;
  for (const auto& c : centers) r = std::max(r, norm(c - mean));
  return 1.1 * std::max(r, 1e-6);
}

/// Per-Gaussian 3D filter widths for the given training cameras.
inline std::vector<double> smoothing_sigmas(std::span<const Gaussian3D> scene, std::span<const Camera> cams,
                                            const TrainConfig& cfg) {
  std::vector<double> out(scene.size(), 0.0);
  if (!cfg.smoothing) return out;
  SamplingSettings s = cfg.sampling;
  s.near_plane = cfg.projection.near_plane;
  for (std::size_t i = 0; i < scene.size(); ++i) out[i] = compute_sampling_sigma(scene[i], cams, s);
  return out;
}

/// The settings keep a view of `sigma`; it must outlive them.
inline RenderSettings render_settings(const TrainConfig& cfg, std::span<const double> sigma) {
  RenderSettings s;
  s.background = cfg.background;
  s.projection = cfg.projection;
  s.smoothing = sigma;
  return s;
}

RenderSettings render_settings(const TrainConfig&, std::vector<double>&&) = delete;

/// Sum of the listed views' losses and gradients (MV-Regulation).
inline ViewLoss mv_gradient(std::span<const Gaussian3D> scene, std::span<const std::size_t> views,
                            const StageProblem& problem, const RenderSettings& settings) {
  ViewLoss sum;
  sum.grads = RenderGradients(scene.size());
  for (std::size_t v : views) {
    const ViewLoss l = problem.objective(scene, v, settings);
    sum.total += l.total;
    sum.texture += l.texture;
    sum.geometry += l.geometry;
    sum.grads += l.grads;
  }
  return sum;
}

/// The shared optimization loop of both stages.
inline TrainResult run_stage(ParamSet init, const StageProblem& problem, const TrainConfig& cfg,
                             std::uint64_t stream, const HoldoutEval* holdout = nullptr,
                             std::ostream* log = nullptr) {
  IESRGS_EXPECTS(!problem.cameras.empty(), "a stage needs training views");
  if (cfg.mv_views > problem.cameras.size())
    throw ConfigError("mv_views (" + std::to_string(cfg.mv_views) + ") exceeds the number of training views (" +
                      std::to_string(problem.cameras.size()) + ")");
  TrainResult res;
  res.params = std::move(init);
  res.state = OptimizerState(res.params.size());
  Rng rng(cfg.seed * 0x9E3779B97F4A7C15ULL + stream);
  const double extent = scene_extent(problem.cameras);
  DensifyStats stats(res.params.size());

  std::vector<Gaussian3D> scene = res.params.scene();
  std::vector<double> sigma = smoothing_sigmas(scene, problem.cameras, cfg);
  std::deque<double> recent;

  for (std::size_t step = 1; step <= cfg.iterations; ++step) {
    const RenderSettings settings = render_settings(cfg, sigma);
    const auto views = rng.sample_without_replacement(problem.cameras.size(), cfg.mv_views);
    ViewLoss total;
    total.grads = RenderGradients(scene.size());
    for (std::size_t v : views) {
      const ViewLoss l = problem.objective(scene, v, settings);
      total.total += l.total;
      total.texture += l.texture;
      total.geometry += l.geometry;
      total.grads += l.grads;
      if (cfg.densify && step < cfg.densify_until)
        stats.accumulate(l.grads, problem.cameras[v].width, problem.cameras[v].height);
    }
    recent.push_back(total.total);
    if (recent.size() > 10) recent.pop_front();
    if (!std::isfinite(total.total))
      throw NumericalError("non-finite loss at step " + std::to_string(step), {recent.begin(), recent.end()});

    std::vector<RawParams> raw(res.params.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = raw_gradient(res.params.rows[i], total.grads.gaussians[i]);
    LearningRates lr = cfg.lr;
    lr.position = exponential_decay(cfg.position_lr_init * extent, cfg.position_lr_final * extent, step - 1,
                                    cfg.iterations);
    const StepReport rep = optimizer_step(res.params, std::move(raw), res.state, lr, cfg.adam);
    if (rep.nonfinite_zeroed && log)
      *log << "warning: step " << step << ": zeroed " << rep.nonfinite_zeroed << " non-finite gradient entries\n";
    res.nonfinite_zeroed += rep.nonfinite_zeroed;

    bool structure_changed = false;
    if (cfg.densify && step >= cfg.densify_from && step < cfg.densify_until && step % cfg.densify_interval == 0) {
      const DensifyReport d = densify_and_prune(res.params, res.state, stats, extent, cfg.densify_settings, rng, log);
      ++res.densify_events;
      structure_changed = d.cloned || d.split || d.pruned;
    }
    scene = res.params.scene();
    if (structure_changed) sigma = smoothing_sigmas(scene, problem.cameras, cfg);

    LogRow row{step, total.total, total.texture, total.geometry, std::numeric_limits<double>::quiet_NaN(),
               scene.size()};
    const bool eval_now = step == cfg.iterations || (cfg.eval_interval && step % cfg.eval_interval == 0);
    if (holdout && *holdout && eval_now) row.psnr_holdout = (*holdout)(scene, render_settings(cfg, sigma));
    res.log.push_back(row);
  }
  return res;
}

// ---------------------------------------------------------------- stage 1

/// Objective of the internal model: texture loss against each LR image.
inline StageProblem internal_problem(const std::vector<TrainView>& views, const TrainConfig& cfg) {
  StageProblem p;
  for (const auto& v : views) p.cameras.push_back(v.camera);
  p.objective = [&views, loss = cfg.loss](std::span<const Gaussian3D> scene, std::size_t v,
                                          const RenderSettings& settings) {
    const TrainView& view = views[v];
    const RenderResult r = render(scene, view.camera, settings);
    ImageLoss l = texture_loss(view.image, r.image, loss);
    ViewLoss out;
    out.total = out.texture = l.value;
    RenderUpstream up;
    up.d_image = std::move(l.grad);
    out.grads = render_backward(scene, view.camera, up, settings);
    return out;
  };
  return p;
}

/// Stage 1: multi-view regulated training of the internal model on LR views.
inline TrainResult train_internal(const std::vector<TrainView>& views, const std::vector<Gaussian3D>& init,
                                  const TrainConfig& cfg, const HoldoutEval* holdout = nullptr,
                                  std::ostream* log = nullptr) {
  cfg.loss.validate();
  return run_stage(ParamSet::from_scene(init), internal_problem(views, cfg), cfg, 1, holdout, log);
}

// ---------------------------------------------------------------- stage 2

/// Objective of the HR model: the final fused loss at HR resolution.
/// `guidance[v]` supervises `views[v]`; the discrepancy masks are fixed
/// because guidance is immutable during this stage.
class HrProblem {
 public:
  HrProblem(const std::vector<TrainView>& views, std::vector<GuidanceView> guidance, const TrainConfig& cfg)
      : guidance_(std::move(guidance)), loss_(cfg.loss) {
    IESRGS_EXPECTS(guidance_.size() == views.size(), "one guidance set per training view");
    for (std::size_t v = 0; v < views.size(); ++v) {
      const Camera hr = views[v].camera.scaled(cfg.scale);
      const GuidanceView& g = guidance_[v];
      IESRGS_EXPECTS(g.external_image.width == hr.width && g.external_image.height == hr.height &&
                         g.internal_image.width == hr.width && g.internal_image.height == hr.height &&
                         g.external_depth.width == hr.width && g.internal_depth.height == hr.height,
                     "guidance must match the HR camera");
      cams_.push_back(hr);
      masks_.push_back(binary_mask(discrepancy_map(g.internal_image, g.external_image, loss_.epsilon), loss_.threshold));
    }
  }

  const std::vector<MaskBuffer>& masks() const { return masks_; }

  StageProblem problem() const {
    StageProblem p;
    p.cameras = cams_;
    p.objective = [this](std::span<const Gaussian3D> scene, std::size_t v, const RenderSettings& settings) {
      const RenderResult r = render(scene, cams_[v], settings);
      FinalLoss l = final_loss(r.image, r.depth, guidance_[v], loss_, &masks_[v]);
      ViewLoss out;
      out.total = l.total;
      out.texture = l.texture;
      out.geometry = l.geometry;
      out.grads = render_backward(scene, cams_[v], l.upstream, settings);
      return out;
    };
    return p;
  }

 private:
  std::vector<GuidanceView> guidance_;
  LossConfig loss_;
  std::vector<Camera> cams_;
  std::vector<MaskBuffer> masks_;
};

/// Stage 2: HR optimization from a copy of the internal model.
inline TrainResult train_hr(const std::vector<TrainView>& views, std::vector<GuidanceView> guidance,
                            const ParamSet& internal, const TrainConfig& cfg, const HoldoutEval* holdout = nullptr,
                            std::ostream* log = nullptr) {
  cfg.loss.validate();
  const HrProblem hr(views, std::move(guidance), cfg);
  return run_stage(internal, hr.problem(), cfg, 2, holdout, log);
}

}  // namespace iesrgs
