#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "iesrgs/checkpoint.hpp"
#include "iesrgs/guidance.hpp"
#include "iesrgs/io.hpp"
#include "iesrgs/metrics.hpp"
#include "iesrgs/trainer.hpp"

namespace iesrgs {

// ---------------------------------------------------------------- scenes

enum class Layout { Cluster, Shell, TexturedGrid };

inline const std::vector<std::pair<std::string, Layout>>& layout_names() {
  static const std::vector<std::pair<std::string, Layout>> names = {
      {"cluster", Layout::Cluster}, {"shell", Layout::Shell}, {"textured-grid", Layout::TexturedGrid}};
  return names;
}

inline Layout parse_layout(const std::string& s) { return detail::parse_enum("layout", s, layout_names()); }

struct SceneSpec {
  std::uint64_t seed{0};
  std::size_t n_gaussians{100};
  Layout layout{Layout::Cluster};
  int train_views{8};
  int holdout_views{2};
  int lr_size{32};      // LR width = height
  int down_factor{4};   // LR = bicubic downsample of a render at lr_size * down_factor
  double ring_radius{3.0};
  Vec3 background{0, 0, 0};
};

/// A synthetic dataset: the true scene, LR cameras for every view, and the
/// LR inputs. Views are interleaved on the ring; `holdout` lists the views
/// withheld from training.
struct GeneratedScene {
  std::vector<Gaussian3D> truth;
  std::vector<Camera> cameras;  // LR cameras
  std::vector<ViewId> ids;
  std::vector<ImageBuffer> lr;
  std::vector<std::size_t> train;
  std::vector<std::size_t> holdout;
  int down_factor{4};
  Vec3 background{0, 0, 0};
};

namespace detail {

inline Gaussian3D random_gaussian(Rng& rng, const Vec3& position) {
  Gaussian3D g;
  g.position = position;
  const double s = 0.025 * std::exp(rng.uniform() * std::log(3.2));  // log-uniform in [0.025, 0.08]
  g.scale = {s * rng.uniform(0.5, 1.5), s * rng.uniform(0.5, 1.5), s * rng.uniform(0.5, 1.5)};
  g.rotation = Quat{rng.normal(), rng.normal(), rng.normal(), rng.normal()}.normalized();
  g.color = {rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)};
  g.opacity = rng.uniform(0.6, 0.95);
  return g;
}

inline std::vector<std::size_t> holdout_indices(int total, int holdout) {
  std::vector<std::size_t> out;
  for (int k = 0; k < holdout; ++k) out.push_back(static_cast<std::size_t>((2 * k + 1) * total / (2 * holdout)));
  return out;
}

}  // namespace detail

/// Random Gaussians in a unit-ish volume for the given layout.
inline std::vector<Gaussian3D> generate_gaussians(std::uint64_t seed, std::size_t n, Layout layout) {
  IESRGS_EXPECTS(n >= 1, "a scene needs at least one Gaussian");
  Rng rng(seed * 0x9E3779B97F4A7C15ULL + 0x5CE7E);
  std::vector<Gaussian3D> scene;
  auto clampv = [](Vec3 p) {
    for (int k = 0; k < 3; ++k) p[k] = std::clamp(p[k], -0.7, 0.7);
    return p;
  };
  switch (layout) {
    case Layout::Cluster: {
      std::vector<Vec3> centers;
      for (int c = 0; c < 5; ++c) centers.push_back({rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)});
      for (std::size_t i = 0; i < n; ++i) {
        const Vec3& c = centers[i % centers.size()];
        scene.push_back(detail::random_gaussian(
            rng, clampv(c + Vec3{rng.normal(0, 0.15), rng.normal(0, 0.15), rng.normal(0, 0.15)})));
      }
      break;
    }
    case Layout::Shell:
      for (std::size_t i = 0; i < n; ++i) {
        Vec3 d{rng.normal(), rng.normal(), rng.normal()};
        d = d * (rng.uniform(0.45, 0.55) / std::max(norm(d), 1e-12));
        scene.push_back(detail::random_gaussian(rng, d));
      }
      break;
    case Layout::TexturedGrid: {
      const int side = static_cast<int>(std::ceil(std::cbrt(static_cast<double>(n))));
      const Vec3 a{rng.uniform(0.6, 0.95), rng.uniform(0.6, 0.95), rng.uniform(0.6, 0.95)};
      const Vec3 b{rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)};
      for (std::size_t i = 0; i < n; ++i) {
        const int x = static_cast<int>(i) % side, y = static_cast<int>(i) / side % side,
                  z = static_cast<int>(i) / (side * side);
        const double step = side > 1 ? 1.0 / (side - 1) : 0.0;
        Gaussian3D g = detail::random_gaussian(rng, Vec3{x * step - 0.5, y * step - 0.5, z * step - 0.5});
        g.color = (x + y + z) % 2 ? a : b;
        scene.push_back(g);
      }
      break;
    }
  }
  return scene;
}

/// Inward-looking cameras on a ring around the origin, alternating in height.
inline std::vector<Camera> ring_cameras(int count, int size, double radius) {
  std::vector<Camera> cams;
  for (int v = 0; v < count; ++v) {
    const double a = 2 * std::numbers::pi * v / count;
    const Vec3 eye{radius * std::cos(a), (v % 2 ? 0.35 : -0.35) * radius, radius * std::sin(a)};
    cams.push_back(Camera::look_at(eye, {0, 0, 0}, {0, 1, 0}, {1.6 * size, 1.6 * size}, size, size));
  }
  return cams;
}

/// The render used to produce LR inputs (or HR ground truth) of a view.
inline RenderResult ground_truth_render(const GeneratedScene& data, std::size_t view, int factor) {
  RenderSettings s;
  s.background = data.background;
  return render(data.truth, data.cameras[view].scaled(factor), s);
}

inline std::vector<ViewId> view_ids(std::size_t count) {
  std::vector<ViewId> ids;
  for (std::size_t i = 0; i < count; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "view_%02zu", i % 1000000);
    ids.push_back(buf);
  }
  return ids;
}

/// Builds a dataset from a true scene and its LR cameras.
inline GeneratedScene make_dataset(std::vector<Gaussian3D> truth, std::vector<Camera> cameras, int holdout_views,
                                   int down_factor, Vec3 background = {}) {
  IESRGS_EXPECTS(down_factor >= 1, "down factor must be >= 1");
  if (holdout_views < 0 || holdout_views >= static_cast<int>(cameras.size()))
    throw ConfigError("holdout view count must leave at least one training view");
  GeneratedScene s;
  s.truth = std::move(truth);
  s.cameras = std::move(cameras);
  s.down_factor = down_factor;
  s.background = background;
  s.ids = view_ids(s.cameras.size());
  s.holdout = detail::holdout_indices(static_cast<int>(s.cameras.size()), holdout_views);
  for (std::size_t v = 0; v < s.cameras.size(); ++v) {
    if (std::find(s.holdout.begin(), s.holdout.end(), v) == s.holdout.end()) s.train.push_back(v);
    const ImageBuffer native = ground_truth_render(s, v, down_factor).image;
    s.lr.push_back(down_factor == 1 ? native : bicubic_downsample(native, down_factor));
  }
  return s;
}

/// Random scene, ring cameras, and LR inputs made by bicubic downsampling of
/// renders at `down_factor` times the LR resolution.
inline GeneratedScene generate_scene(const SceneSpec& spec) {
  if (spec.train_views < 1) throw ConfigError("need at least one training view");
  if (spec.lr_size < 4) throw ConfigError("lr_size must be >= 4");
  return make_dataset(generate_gaussians(spec.seed, spec.n_gaussians, spec.layout),
                      ring_cameras(spec.train_views + spec.holdout_views, spec.lr_size, spec.ring_radius),
                      spec.holdout_views, spec.down_factor, spec.background);
}

/// Stage-1 initialization in the style of a sparse point cloud: jittered true
/// centers, isotropic scale from the 3 nearest neighbours, gray color, low
/// opacity.
inline std::vector<Gaussian3D> point_cloud_init(const std::vector<Gaussian3D>& truth, std::uint64_t seed,
                                                double jitter = 0.02) {
  Rng rng(seed * 0x9E3779B97F4A7C15ULL + 0x1417);
  std::vector<Gaussian3D> init;
  for (const auto& t : truth) {
    Gaussian3D g;
    g.position = t.position + Vec3{rng.normal(0, jitter), rng.normal(0, jitter), rng.normal(0, jitter)};
    g.color = {0.5, 0.5, 0.5};
    g.opacity = 0.1;
    init.push_back(g);
  }
  for (std::size_t i = 0; i < init.size(); ++i) {
    std::vector<double> d2;
    for (std::size_t j = 0; j < init.size(); ++j)
      if (j != i) {
        const Vec3 d = init[i].position - init[j].position;
        d2.push_back(d.x * d.x + d.y * d.y + d.z * d.z);
      }
    double s = 0.05;
    if (!d2.empty()) {
      const std::size_t k = std::min<std::size_t>(3, d2.size());
      std::partial_sort(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(k), d2.end());
      double mean = 0;
      for (std::size_t q = 0; q < k; ++q) mean += d2[q];
      s = std::sqrt(std::max(mean / static_cast<double>(k), 1e-7));
    }
    init[i].scale = {s, s, s};
  }
  return init;
}

/// On-disk dataset: scene.txt (true scene), init.txt (stage-1 start),
/// cameras.txt (LR cameras), split.txt (`<id> train|holdout`), dataset.txt
/// (down_factor, background), lr/<id>.fimg (+ .png previews).
inline void write_dataset(const std::filesystem::path& dir, const GeneratedScene& s, std::uint64_t seed) {
  write_scene(dir / "scene.txt", s.truth);
  write_scene(dir / "init.txt", point_cloud_init(s.truth, seed));
  write_cameras(dir / "cameras.txt", s.cameras);
  {
    std::ofstream os(dir / "split.txt");
    for (std::size_t v = 0; v < s.ids.size(); ++v)
      os << s.ids[v] << ' '
         << (std::find(s.holdout.begin(), s.holdout.end(), v) == s.holdout.end() ? "train" : "holdout") << '\n';
    std::ofstream meta(dir / "dataset.txt");
    meta << "down_factor = " << s.down_factor << "\nbackground = " << detail::format_double(s.background.x) << ' '
         << detail::format_double(s.background.y) << ' ' << detail::format_double(s.background.z) << '\n';
    if (!os || !meta) throw IoError("cannot write dataset files in " + dir.string());
  }
  for (std::size_t v = 0; v < s.ids.size(); ++v) {
    write_fimg(dir / "lr" / (s.ids[v] + ".fimg"), s.lr[v]);
    write_png(dir / "lr" / (s.ids[v] + ".png"), s.lr[v]);
  }
}

inline GeneratedScene read_dataset(const std::filesystem::path& dir) {
  GeneratedScene s;
  if (std::filesystem::exists(dir / "scene.txt")) s.truth = read_scene(dir / "scene.txt");
  s.cameras = read_cameras(dir / "cameras.txt");
  std::ifstream split(dir / "split.txt");
  if (!split) throw IoError("cannot open: " + (dir / "split.txt").string());
  std::string id, role;
  while (split >> id >> role) {
    if (role != "train" && role != "holdout") throw IoError("split.txt: bad role '" + role + "' for " + id);
    (role == "train" ? s.train : s.holdout).push_back(s.ids.size());
    s.ids.push_back(id);
  }
  if (s.ids.size() != s.cameras.size()) throw IoError("split.txt and cameras.txt disagree on the number of views");
  std::ifstream meta(dir / "dataset.txt");
  for (std::string line; std::getline(meta, line);) {
    std::istringstream ls(line);
    std::string key, eq;
    ls >> key >> eq;
    if (key == "down_factor") ls >> s.down_factor;
    if (key == "background") ls >> s.background.x >> s.background.y >> s.background.z;
  }
  for (std::size_t v = 0; v < s.ids.size(); ++v) {
    ImageBuffer img = read_fimg_image(dir / "lr" / (s.ids[v] + ".fimg"));
    if (img.width != s.cameras[v].width || img.height != s.cameras[v].height)
      throw IoError("LR image of " + s.ids[v] + " does not match its camera");
    s.lr.push_back(std::move(img));
  }
  return s;
}

// ---------------------------------------------------------------- guidance

/// Ground truth with per-view random color blobs: a stand-in for 2D
/// super-resolution hallucinations, which disagree between views.
struct ArtifactSettings {
  int blobs_per_view{10};
  double min_radius{2.0};  // HR pixels
  double max_radius{6.0};
  double amplitude{0.6};
};

inline ImageBuffer add_artifacts(const ImageBuffer& img, const ArtifactSettings& a, Rng& rng) {
  ImageBuffer out = img;
  for (int b = 0; b < a.blobs_per_view; ++b) {
    const double cx = rng.uniform(0, img.width), cy = rng.uniform(0, img.height);
    const double r = rng.uniform(a.min_radius, a.max_radius);
    const Vec3 offset{rng.uniform(-a.amplitude, a.amplitude), rng.uniform(-a.amplitude, a.amplitude),
                      rng.uniform(-a.amplitude, a.amplitude)};
    const int x0 = std::max(0, static_cast<int>(cx - 3 * r)), x1 = std::min(img.width - 1, static_cast<int>(cx + 3 * r));
    const int y0 = std::max(0, static_cast<int>(cy - 3 * r)), y1 = std::min(img.height - 1, static_cast<int>(cy + 3 * r));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double w = std::exp(-(dx * dx + dy * dy) / (2 * r * r));
        for (int c = 0; c < img.channels; ++c)
          out.at(x, y, c) = std::clamp(out.at(x, y, c) + w * offset[c % 3], 0.0, 1.0);
      }
  }
  return out;
}

enum class ExternalSource { GroundTruth, Artifacts };

inline const std::vector<std::pair<std::string, ExternalSource>>& external_source_names() {
  static const std::vector<std::pair<std::string, ExternalSource>> names = {
      {"ground-truth", ExternalSource::GroundTruth}, {"artifacts", ExternalSource::Artifacts}};
  return names;
}

/// External HR guidance for the training views of a generated dataset:
/// exact HR renders (or their artifact-corrupted versions) and true HR depth.
inline std::map<ViewId, ExternalGuidance> synthetic_external_guidance(const GeneratedScene& data, int scale,
                                                                      ExternalSource source,
                                                                      const ArtifactSettings& artifacts,
                                                                      std::uint64_t seed) {
  Rng rng(seed * 0x9E3779B97F4A7C15ULL + 0xA271);
  std::map<ViewId, ExternalGuidance> out;
  for (std::size_t v : data.train) {
    RenderResult gt = ground_truth_render(data, v, scale);
    ImageBuffer img = source == ExternalSource::Artifacts ? add_artifacts(gt.image, artifacts, rng) : gt.image;
    out.emplace(data.ids[v], ExternalGuidance{std::move(img), std::move(gt.depth)});
  }
  return out;
}

// ---------------------------------------------------------------- experiment

struct ExperimentSpec {
  SceneSpec scene;
  std::optional<std::filesystem::path> scene_dir;  // scene.txt + cameras.txt instead of generation
  int scale{4};
  TrainConfig stage1;
  TrainConfig stage2;
  ExternalSource external{ExternalSource::GroundTruth};
  ArtifactSettings artifacts;
  std::vector<std::string> metrics{"psnr", "ssim"};
  std::optional<std::filesystem::path> out;  // nothing is written without it
  std::ostream* log{nullptr};

  void validate() const {
    if (scale < 1) throw ConfigError("scale must be >= 1");
    for (const auto& m : metrics)
      if (m != "psnr" && m != "ssim") throw ConfigError("unknown metric '" + m + "'");
    stage1.validate();
    stage2.validate();
  }
};

/// A stage's configuration as run inside an experiment: the scale and the
/// background always follow the experiment and its dataset.
inline TrainConfig stage_config(const ExperimentSpec& spec, const TrainConfig& stage) {
  TrainConfig c = stage;
  c.scale = spec.scale;
  c.background = spec.scene.background;
  return c;
}

/// Reduced-iteration defaults for single-core desk-scale runs.
inline ExperimentSpec desk_experiment(std::uint64_t seed) {
  ExperimentSpec spec;
  spec.scene.seed = seed;
  for (TrainConfig* c : {&spec.stage1, &spec.stage2}) {
    c->seed = seed;
    c->scale = spec.scale;
    c->mv_views = 3;
    c->densify = false;  // at desk scale densification over-fits the LR views
    c->densify_from = 100;
    c->densify_interval = 100;
    c->eval_interval = 0;
  }
  spec.stage1.iterations = 900;
  spec.stage1.densify_until = 600;
  spec.stage1.position_lr_init = 1.6e-3;
  spec.stage1.position_lr_final = 1.6e-5;
  spec.stage2.iterations = 400;
  spec.stage2.densify_until = 200;
  spec.stage2.position_lr_init = 4e-4;
  spec.stage2.position_lr_final = 1.6e-5;
  return spec;
}

struct MetricRow {
  std::string config;
  ViewId view;  // "mean" for the average over holdout views
  double psnr{0};
  double ssim{0};
};

/// Everything produced by the shared part of an experiment: data, stage 1,
/// and the guidance for stage 2.
struct PreparedExperiment {
  GeneratedScene data;
  std::vector<TrainView> train_views;
  TrainResult stage1;
  std::vector<GuidanceView> guidance;     // aligned with train_views
  std::vector<Camera> holdout_hr;
  std::vector<ImageBuffer> holdout_gt;    // exact HR renders
};

struct ModelEvaluation {
  std::vector<MetricRow> rows;  // per holdout view, then "mean"
  std::vector<RenderResult> renders;
  std::vector<double> filter;   // 3D filter widths used for the renders
};

inline double mean_psnr(const std::vector<MetricRow>& rows, const std::string& config) {
  for (const auto& r : rows)
    if (r.config == config && r.view == "mean") return r.psnr;
  throw std::out_of_range("no metrics for configuration '" + config + "'");
}

namespace detail {

inline void quantize(RenderResult& r) {
  quantize_f32(r.image.data);
  quantize_f32(r.depth.data);
  quantize_f32(r.depth.coverage);
}

}  // namespace detail

/// SR-splats a model at the holdout views and scores it against the exact HR
/// renders. Renders are rounded to f32 first, so metrics recomputed from the
/// saved files reproduce these values.
inline ModelEvaluation evaluate_model(const std::vector<Gaussian3D>& scene, std::span<const Camera> train_cams,
                                      const TrainConfig& cfg, const PreparedExperiment& p, const std::string& config,
                                      const std::vector<std::string>& metrics) {
  const bool want_ssim = std::find(metrics.begin(), metrics.end(), "ssim") != metrics.end();
  const auto sigma = smoothing_sigmas(scene, train_cams, cfg);
  const RenderSettings settings = render_settings(cfg, sigma);
  ModelEvaluation ev;
  ev.filter = sigma;
  double sp = 0, ss = 0;
  for (std::size_t k = 0; k < p.holdout_hr.size(); ++k) {
    RenderResult r = render(scene, p.holdout_hr[k], settings);
    detail::quantize(r);
    MetricRow row{config, p.data.ids[p.data.holdout[k]], psnr(r.image, p.holdout_gt[k]),
                  want_ssim ? ssim_metric(r.image, p.holdout_gt[k]) : std::numeric_limits<double>::quiet_NaN()};
    sp += row.psnr;
    ss += row.ssim;
    ev.rows.push_back(row);
    ev.renders.push_back(std::move(r));
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, p.holdout_hr.size()));
  ev.rows.push_back({config, "mean", sp / n, ss / n});
  return ev;
}

inline GeneratedScene load_or_generate(const ExperimentSpec& spec) {
  if (spec.scene_dir)
    return make_dataset(read_scene(*spec.scene_dir / "scene.txt"), read_cameras(*spec.scene_dir / "cameras.txt"),
                        spec.scene.holdout_views, spec.scene.down_factor, spec.scene.background);
  return generate_scene(spec.scene);
}

/// Dataset, stage 1, internal guidance (SR-splatted stage-1 model) and
/// external guidance.
inline PreparedExperiment prepare_experiment(const ExperimentSpec& spec) {
  spec.validate();
  PreparedExperiment p;
  p.data = load_or_generate(spec);
  for (std::size_t v : p.data.train) p.train_views.push_back({p.data.ids[v], p.data.cameras[v], p.data.lr[v]});
  for (std::size_t v : p.data.holdout) {
    p.holdout_hr.push_back(p.data.cameras[v].scaled(spec.scale));
    ImageBuffer gt = ground_truth_render(p.data, v, spec.scale).image;
    detail::quantize_f32(gt.data);  // stored as f32 next to the renders
    p.holdout_gt.push_back(std::move(gt));
  }
  const TrainConfig s1 = stage_config(spec, spec.stage1);
  p.stage1 = train_internal(p.train_views, point_cloud_init(p.data.truth, spec.scene.seed), s1, nullptr, spec.log);

  const auto internal_scene = p.stage1.scene();
  std::vector<Camera> cams;
  std::vector<ViewId> ids;
  for (const auto& v : p.train_views) {
    cams.push_back(v.camera);
    ids.push_back(v.id);
  }
  InternalGuidanceOptions o;
  o.factor = spec.scale;
  const auto sigma = smoothing_sigmas(internal_scene, cams, s1);
  o.render = render_settings(s1, sigma);
  o.log = spec.log;
  const auto internal = build_internal_guidance(internal_scene, cams, ids, o);
  const auto external =
      synthetic_external_guidance(p.data, spec.scale, spec.external, spec.artifacts, spec.scene.seed);
  for (const auto& g : assemble_guidance(ids, external, internal)) p.guidance.push_back(g.view());
  return p;
}

/// Evaluation of the stage-1 model SR-splatted to HR.
inline ModelEvaluation evaluate_internal(const PreparedExperiment& p, const ExperimentSpec& spec,
                                         const std::string& name = "internal") {
  std::vector<Camera> cams;
  for (const auto& v : p.train_views) cams.push_back(v.camera);
  return evaluate_model(p.stage1.scene(), cams, stage_config(spec, spec.stage1), p, name, spec.metrics);
}

struct VariantResult {
  std::string name;
  TrainResult result;
  ModelEvaluation eval;
};

/// Stage 2 under a loss configuration, scored at the holdout views.
inline VariantResult run_variant(const PreparedExperiment& p, const ExperimentSpec& spec, const std::string& name,
                                 const LossConfig& loss) {
  TrainConfig cfg = stage_config(spec, spec.stage2);
  cfg.loss = loss;
  VariantResult v;
  v.name = name;
  v.result = train_hr(p.train_views, p.guidance, p.stage1.params, cfg, nullptr, spec.log);
  std::vector<Camera> hr;
  for (const auto& t : p.train_views) hr.push_back(t.camera.scaled(spec.scale));
  v.eval = evaluate_model(v.result.scene(), hr, cfg, p, name, spec.metrics);
  return v;
}

/// Loss settings of the named rows: external-only (b) and full fusion (c).
inline LossConfig external_only_loss(LossConfig l) {
  l.texture_mode = TextureMode::ExternalOnly;
  l.lambda_i = 0;
  return l;
}

struct ExperimentReport {
  std::vector<MetricRow> rows;
  std::vector<std::string> errors;  // failed stages; rows of completed ones are kept
};

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  detail::ensure_parent(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "config,view,psnr,ssim\n";
  for (const auto& r : rows)
    os << r.config << ',' << r.view << ',' << metric_string(r.psnr) << ',' << metric_string(r.ssim) << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<MetricRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 4) throw IoError(path.string() + ": expected 4 columns in '" + line + "'");
    rows.push_back({f[0], f[1], parse_metric(f[2]), parse_metric(f[3])});
  }
  return rows;
}

namespace detail {

inline void write_model_outputs(const std::filesystem::path& dir, const PreparedExperiment& p,
                                const TrainResult& result, const ModelEvaluation& ev) {
  write_scene(dir / "scene.txt", result.scene());
  write_filter(dir / "filter.txt", ev.filter);
  write_checkpoint(dir / "checkpoint.iesr", make_checkpoint(result.params, result.state));
  write_training_log(dir / "log.csv", result.log);
  for (std::size_t k = 0; k < ev.renders.size(); ++k) {
    const ViewId& id = p.data.ids[p.data.holdout[k]];
    write_fimg(dir / "renders" / (id + ".fimg"), ev.renders[k].image);
    write_png(dir / "renders" / (id + ".png"), ev.renders[k].image);
    write_png(dir / "depth" / (id + ".png"), depth_visualization(ev.renders[k].depth));
  }
}

}  // namespace detail

/// Stage 1, guidance, and stage 2 for the named rows: (a) the internal model
/// SR-splatted, (b) external-only, (c) full fusion. With an output directory,
/// writes metrics.csv, per-model checkpoints / logs / renders, per-view grids
/// (LR | internal | fused | ground truth), depth maps and masks.
inline ExperimentReport run_experiment(const ExperimentSpec& spec) {
  ExperimentReport report;
  PreparedExperiment p;
  try {
    p = prepare_experiment(spec);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    report.errors.push_back(std::string("stage 1 / guidance: ") + e.what());
    if (spec.out) write_metrics_csv(*spec.out / "metrics.csv", report.rows);
    return report;
  }
  const auto& out = spec.out;
  if (out) {
    write_scene(*out / "truth" / "scene.txt", p.data.truth);
    write_cameras(*out / "truth" / "cameras.txt", p.data.cameras);
    std::ofstream split(*out / "truth" / "split.txt");
    for (std::size_t v = 0; v < p.data.ids.size(); ++v)
      split << p.data.ids[v] << ' '
            << (std::find(p.data.holdout.begin(), p.data.holdout.end(), v) == p.data.holdout.end() ? "train" : "holdout")
            << '\n';
    for (std::size_t k = 0; k < p.holdout_gt.size(); ++k)
      write_fimg(*out / "truth" / "hr" / (p.data.ids[p.data.holdout[k]] + ".fimg"), p.holdout_gt[k]);
  }

  const ModelEvaluation internal = evaluate_internal(p, spec);
  report.rows.insert(report.rows.end(), internal.rows.begin(), internal.rows.end());
  if (out) detail::write_model_outputs(*out / "internal", p, p.stage1, internal);

  std::optional<VariantResult> fused;
  const std::vector<std::pair<std::string, LossConfig>> variants = {
      {"external-only", external_only_loss(spec.stage2.loss)}, {"fused", spec.stage2.loss}};
  for (const auto& [name, loss] : variants) {
    try {
      VariantResult v = run_variant(p, spec, name, loss);
      report.rows.insert(report.rows.end(), v.eval.rows.begin(), v.eval.rows.end());
      if (out) detail::write_model_outputs(*out / name, p, v.result, v.eval);
      if (name == "fused") fused = std::move(v);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      report.errors.push_back(name + ": " + e.what());
    }
  }

  if (out) {
    write_metrics_csv(*out / "metrics.csv", report.rows);
    for (std::size_t k = 0; k < p.holdout_hr.size(); ++k) {
      const std::size_t v = p.data.holdout[k];
      std::vector<ImageBuffer> tiles = {p.data.lr[v], internal.renders[k].image};
      if (fused) tiles.push_back(fused->eval.renders[k].image);
      tiles.push_back(p.holdout_gt[k]);
      write_png(*out / "grids" / (p.data.ids[v] + ".png"), hstack(tiles));
    }
    for (std::size_t t = 0; t < p.train_views.size(); ++t) {
      const GuidanceView& g = p.guidance[t];
      const MaskBuffer m =
          binary_mask(discrepancy_map(g.internal_image, g.external_image, spec.stage2.loss.epsilon),
                      spec.stage2.loss.threshold);
      write_png(*out / "masks" / (p.train_views[t].id + ".png"),
                hstack({g.internal_image, g.external_image, mask_visualization(m)}));
    }
    if (!report.errors.empty()) {
      std::ofstream err(*out / "errors.txt");
      for (const auto& e : report.errors) err << e << '\n';
    }
  }
  return report;
}

// ---------------------------------------------------------------- ablation

/// Cumulative component ablation: internal baseline, + external texture,
/// + external geometry, + internal texture, + internal geometry, + mask.
inline std::vector<std::pair<std::string, LossConfig>> ablation_rows(const LossConfig& base) {
  std::vector<std::pair<std::string, LossConfig>> rows;
  LossConfig l = base;
  l.texture_mode = TextureMode::ExternalOnly;
  l.lambda_i = 0;
  l.lambda_e = 0;
  rows.emplace_back("+external-texture", l);
  l.lambda_e = base.lambda_e;
  rows.emplace_back("+external-geometry", l);
  l.texture_mode = TextureMode::Sum;
  rows.emplace_back("+internal-texture", l);
  l.lambda_i = base.lambda_i;
  rows.emplace_back("+internal-geometry", l);
  l.texture_mode = TextureMode::Fused;
  rows.emplace_back("+mask", l);
  return rows;
}

/// Mean holdout metrics of every ablation row, the internal baseline first.
inline std::vector<MetricRow> run_ablation(const PreparedExperiment& p, const ExperimentSpec& spec) {
  std::vector<MetricRow> out{evaluate_internal(p, spec, "internal").rows.back()};
  for (const auto& [name, loss] : ablation_rows(spec.stage2.loss))
    out.push_back(run_variant(p, spec, name, loss).eval.rows.back());
  return out;
}

struct SweepPoint {
  double threshold{0};
  double psnr{0};
  double ssim{0};
};

/// Full fusion at each threshold.
inline std::vector<SweepPoint> sweep_threshold(const PreparedExperiment& p, const ExperimentSpec& spec,
                                               const std::vector<double>& thresholds) {
  std::vector<SweepPoint> out;
  for (double t : thresholds) {
    LossConfig l = spec.stage2.loss;
    l.threshold = t;
    const MetricRow m = run_variant(p, spec, "T=" + detail::format_double(t), l).eval.rows.back();
    out.push_back({t, m.psnr, m.ssim});
  }
  return out;
}

inline void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepPoint>& points) {
  detail::ensure_parent(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "threshold,psnr,ssim\n";
  for (const auto& p : points)
    os << detail::format_double(p.threshold) << ',' << metric_string(p.psnr) << ',' << metric_string(p.ssim) << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

inline double median(std::vector<double> v) {
  IESRGS_EXPECTS(!v.empty(), "median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace iesrgs
