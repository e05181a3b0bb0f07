#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "iesrgs/bench.hpp"

namespace fs = std::filesystem;
using namespace iesrgs;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

std::string dashed(std::string key) {
  for (auto& c : key)
    if (c == '_') c = '-';
  return key;
}

/// --config plus one flag per configuration field. Config-file keys may be
/// prefixed with `internal.` or `hr.` to target a single stage.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::string iters;
  CLI::Option* iters_option{nullptr};

  void add(CLI::App* app, const std::string& iters_help) {
    app->add_option("--config", config_file, "configuration file (flat key = value)");
    iters_option = app->add_option("--iters", iters, iters_help);
    for (const auto& [key, field] : detail::config_fields())
      options[key] = app->add_option("--" + dashed(key), values[key], "override '" + key + "'")->group("Config fields");
  }

  /// defaults < file < flags; `stage` is "internal" or "hr".
  TrainConfig resolve(TrainConfig cfg, const std::string& stage, bool iters_applies) const {
    if (!config_file.empty())
      for (ConfigEntry e : read_config_file(config_file)) {
        const auto dot = e.key.find('.');
        if (dot != std::string::npos) {
          const std::string prefix = e.key.substr(0, dot);
          if (prefix != "internal" && prefix != "hr")
            throw ConfigError(e.where + ": unknown stage prefix '" + prefix + "' (use internal. or hr.)");
          if (prefix != stage) continue;
          e.key = e.key.substr(dot + 1);
        }
        apply_config_entry(cfg, e);
      }
    for (const auto& [key, opt] : options)
      if (opt->count()) set_config_value(cfg, key, values.at(key));
    if (iters_applies && iters_option->count()) set_config_value(cfg, "iterations", iters);
    cfg.validate();
    return cfg;
  }
};

std::vector<TrainView> training_views(const GeneratedScene& d) {
  std::vector<TrainView> views;
  for (std::size_t v : d.train) views.push_back({d.ids[v], d.cameras[v], d.lr[v]});
  return views;
}

std::vector<Camera> cameras_of(const std::vector<TrainView>& views, int scale) {
  std::vector<Camera> cams;
  for (const auto& v : views) cams.push_back(v.camera.scaled(scale));
  return cams;
}

/// Holdout PSNR at `scale` against true-scene renders (needs scene.txt).
struct HoldoutTargets {
  std::vector<Camera> cams;
  std::vector<ImageBuffer> gt;
  HoldoutEval eval;
};

HoldoutTargets holdout_targets(const GeneratedScene& d, int scale) {
  HoldoutTargets h;
  if (d.truth.empty() || d.holdout.empty()) return h;
  for (std::size_t v : d.holdout) {
    h.cams.push_back(d.cameras[v].scaled(scale));
    h.gt.push_back(ground_truth_render(d, v, scale).image);
  }
  h.eval = [&h](std::span<const Gaussian3D> scene, const RenderSettings& s) {
    double sum = 0;
    for (std::size_t k = 0; k < h.cams.size(); ++k) sum += psnr(render(scene, h.cams[k], s).image, h.gt[k]);
    return sum / static_cast<double>(h.cams.size());
  };
  return h;
}

void write_model(const fs::path& out, const TrainResult& r, const std::vector<double>& filter,
                 const TrainConfig& cfg) {
  write_scene(out / "scene.txt", r.scene());
  write_filter(out / "filter.txt", filter);
  write_checkpoint(out / "checkpoint.iesr", make_checkpoint(r.params, r.state));
  write_training_log(out / "log.csv", r.log);
  std::ofstream(out / "config.txt") << dump_config(cfg);
}

struct Model {
  std::vector<Gaussian3D> scene;
  std::vector<double> filter;
};

Model read_model(const fs::path& p) {
  Model m;
  const fs::path scene = fs::is_directory(p) ? p / "scene.txt" : p;
  m.scene = read_scene(scene);
  const fs::path filter = scene.parent_path() / "filter.txt";
  if (fs::exists(filter)) {
    m.filter = read_filter(filter);
    if (m.filter.size() != m.scene.size()) throw IoError(filter.string() + ": one width per Gaussian expected");
  }
  return m;
}

std::map<ViewId, InternalGuidance> internal_guidance(const GeneratedScene& d, const std::vector<TrainView>& views,
                                                     const Model& model, const TrainConfig& cfg,
                                                     const fs::path& cache) {
  std::vector<Camera> cams;
  std::vector<ViewId> ids;
  for (const auto& v : views) {
    cams.push_back(v.camera);
    ids.push_back(v.id);
  }
  InternalGuidanceOptions o;
  o.factor = cfg.scale;
  TrainConfig c = cfg;
  c.background = d.background;
  o.render = render_settings(c, model.filter);
  o.cache_root = cache;
  return build_internal_guidance(model.scene, cams, ids, o);
}

// ---------------------------------------------------------------- commands

struct ExperimentFlags {
  SceneSpec scene;
  double background{0};
  std::string scene_dir;
  std::string external{"ground-truth"};
  int artifact_blobs{ArtifactSettings{}.blobs_per_view};
  std::string iters_internal;
  CLI::Option* iters_internal_option{nullptr};
  std::string layout{"cluster"};

  void add(CLI::App* app) {
    app->add_option("--n-gaussians", scene.n_gaussians, "Gaussians in the generated scene")->capture_default_str();
    app->add_option("--layout", layout, "cluster | shell | textured-grid")->capture_default_str();
    app->add_option("--views", scene.train_views, "training views")->capture_default_str();
    app->add_option("--holdout", scene.holdout_views, "holdout views")->capture_default_str();
    app->add_option("--lr-size", scene.lr_size, "LR image width and height")->capture_default_str();
    app->add_option("--down-factor", scene.down_factor, "LR = bicubic downsample of renders at this factor")
        ->capture_default_str();
    app->add_option("--background", background, "gray background level")->capture_default_str();
    app->add_option("--scene-dir", scene_dir, "use scene.txt + cameras.txt from this directory");
    app->add_option("--external-source", external, "ground-truth | artifacts")->capture_default_str();
    app->add_option("--artifact-blobs", artifact_blobs, "artifact blobs per view (artifacts source)")
        ->capture_default_str();
    iters_internal_option = app->add_option("--iters-internal", iters_internal, "stage-1 iterations");
  }

  ExperimentSpec resolve(const ConfigFlags& cfg) const {
    const ExperimentSpec base = desk_experiment(0);
    ExperimentSpec spec = base;
    spec.stage1 = cfg.resolve(base.stage1, "internal", false);
    if (iters_internal_option->count()) set_config_value(spec.stage1, "iterations", iters_internal);
    spec.stage2 = cfg.resolve(base.stage2, "hr", true);
    spec.scale = spec.stage2.scale;
    spec.scene = scene;
    spec.scene.seed = spec.stage2.seed;
    spec.scene.layout = parse_layout(layout);
    spec.scene.background = {background, background, background};
    if (!scene_dir.empty()) spec.scene_dir = scene_dir;
    spec.external = detail::parse_enum("external-source", external, external_source_names());
    spec.artifacts.blobs_per_view = artifact_blobs;
    spec.log = &std::clog;
    return spec;
  }
};

void print_rows(const std::vector<MetricRow>& rows) {
  std::printf("%-22s %-10s %10s %8s\n", "config", "view", "psnr", "ssim");
  for (const auto& r : rows)
    std::printf("%-22s %-10s %10.3f %8.4f\n", r.config.c_str(), r.view.c_str(), r.psnr, r.ssim);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Internal/external guided 3D Gaussian splatting super-resolution"};
  app.require_subcommand(1);

  // gen-scene
  auto* gen = app.add_subcommand("gen-scene", "generate a synthetic multi-view dataset");
  SceneSpec gen_spec;
  std::string gen_layout = "cluster", gen_out;
  double gen_background = 0;
  int gen_scale = 4;
  gen->add_option("--seed", gen_spec.seed, "random seed")->capture_default_str();
  gen->add_option("--n-gaussians", gen_spec.n_gaussians, "number of Gaussians")->capture_default_str();
  gen->add_option("--layout", gen_layout, "cluster | shell | textured-grid")->capture_default_str();
  gen->add_option("--views", gen_spec.train_views, "training views")->capture_default_str();
  gen->add_option("--holdout", gen_spec.holdout_views, "holdout views")->capture_default_str();
  gen->add_option("--lr-size", gen_spec.lr_size, "LR width and height")->capture_default_str();
  gen->add_option("--down-factor", gen_spec.down_factor, "bicubic downsampling factor for LR views")
      ->capture_default_str();
  gen->add_option("--background", gen_background, "gray background level")->capture_default_str();
  gen->add_option("--scale", gen_scale, "also write HR ground truth at this factor (0 = none)")->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->required();

  // train-internal
  auto* ti = app.add_subcommand("train-internal", "stage 1: train the internal model on LR views");
  std::string ti_data, ti_init, ti_out;
  ConfigFlags ti_cfg;
  ti->add_option("--data", ti_data, "dataset directory (gen-scene layout)")->required();
  ti->add_option("--init", ti_init, "initial scene (default: <data>/init.txt)");
  ti->add_option("--out", ti_out, "model output directory")->required();
  ti_cfg.add(ti, "training iterations");

  // build-guidance
  auto* bg = app.add_subcommand("build-guidance", "SR-splat the internal model and prepare external guidance");
  std::string bg_data, bg_model, bg_out, bg_source = "ground-truth", bg_manifest;
  ConfigFlags bg_cfg;
  bg->add_option("--data", bg_data, "dataset directory")->required();
  bg->add_option("--model", bg_model, "stage-1 model directory or scene file")->required();
  bg->add_option("--out", bg_out, "guidance directory")->required();
  bg->add_option("--external-source", bg_source, "ground-truth | artifacts | bicubic")->capture_default_str();
  bg->add_option("--manifest", bg_manifest, "ingest external guidance from this manifest instead");
  bg_cfg.add(bg, "unused");

  // train-hr
  auto* th = app.add_subcommand("train-hr", "stage 2: HR training under fused guidance");
  std::string th_data, th_model, th_guidance, th_out;
  ConfigFlags th_cfg;
  th->add_option("--data", th_data, "dataset directory")->required();
  th->add_option("--model", th_model, "stage-1 model directory or scene file")->required();
  th->add_option("--guidance", th_guidance, "directory written by build-guidance")->required();
  th->add_option("--out", th_out, "model output directory")->required();
  th_cfg.add(th, "training iterations");

  // render
  auto* rd = app.add_subcommand("render", "render a model at every camera");
  std::string rd_model, rd_cameras, rd_data, rd_out;
  double rd_scale = 1;
  double rd_background = -1;
  rd->add_option("--model", rd_model, "model directory or scene file")->required();
  rd->add_option("--data", rd_data, "dataset directory (cameras, view ids, background)");
  rd->add_option("--cameras", rd_cameras, "camera file (overrides --data)");
  rd->add_option("--scale", rd_scale, "render at this factor of the camera resolution")->capture_default_str();
  rd->add_option("--background", rd_background, "gray background (default: dataset's, else black)");
  rd->add_option("--out", rd_out, "output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "PSNR/SSIM of renders against references with the same file names");
  std::string ev_renders, ev_reference, ev_out;
  ev->add_option("--renders", ev_renders, "directory of .fimg/.png renders")->required();
  ev->add_option("--reference", ev_reference, "directory of references")->required();
  ev->add_option("--out", ev_out, "write metrics CSV here (default: stdout)");

  // run-experiment
  auto* re = app.add_subcommand("run-experiment", "stage 1 -> guidance -> stage 2 with evaluation and figures");
  std::string re_out;
  bool re_ablation = false;
  ConfigFlags re_cfg;
  ExperimentFlags re_exp;
  re->add_option("--out", re_out, "output directory")->required();
  re->add_flag("--ablation", re_ablation, "also run the cumulative component ablation");
  re_cfg.add(re, "stage-2 iterations");
  re_exp.add(re);

  // sweep-threshold
  auto* sw = app.add_subcommand("sweep-threshold", "holdout metrics of full fusion across mask thresholds");
  std::string sw_out;
  std::vector<double> sw_thresholds{0.0, 0.3, 0.6, 0.9, 1.0};
  ConfigFlags sw_cfg;
  ExperimentFlags sw_exp;
  sw->add_option("--out", sw_out, "output directory")->required();
  sw->add_option("--thresholds", sw_thresholds, "thresholds to evaluate")->delimiter(',')->capture_default_str();
  sw_cfg.add(sw, "stage-2 iterations");
  sw_exp.add(sw);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) {
      gen_spec.layout = parse_layout(gen_layout);
      gen_spec.background = {gen_background, gen_background, gen_background};
      const GeneratedScene s = generate_scene(gen_spec);
      write_dataset(gen_out, s, gen_spec.seed);
      if (gen_scale > 0)
        for (std::size_t v = 0; v < s.ids.size(); ++v) {
          const RenderResult r = ground_truth_render(s, v, gen_scale);
          write_fimg(fs::path(gen_out) / "hr" / (s.ids[v] + ".fimg"), r.image);
          write_fimg_depth(fs::path(gen_out) / "hr" / (s.ids[v] + "_depth.fimg"), r.depth);
          write_png(fs::path(gen_out) / "hr" / (s.ids[v] + ".png"), r.image);
        }
      std::cout << "wrote " << s.ids.size() << " views (" << s.train.size() << " train, " << s.holdout.size()
                << " holdout) to " << gen_out << '\n';
    } else if (ti->parsed()) {
      TrainConfig cfg = ti_cfg.resolve(TrainConfig{}, "internal", true);
      const GeneratedScene d = read_dataset(ti_data);
      cfg.background = d.background;
      const auto views = training_views(d);
      const auto init = read_scene(ti_init.empty() ? fs::path(ti_data) / "init.txt" : fs::path(ti_init));
      HoldoutTargets h = holdout_targets(d, cfg.scale);
      const TrainResult r = train_internal(views, init, cfg, h.eval ? &h.eval : nullptr, &std::clog);
      const auto cams = cameras_of(views, 1);
      write_model(ti_out, r, smoothing_sigmas(r.scene(), cams, cfg), cfg);
      std::cout << "stage 1: " << r.log.size() << " steps, " << r.params.size() << " Gaussians, final loss "
                << (r.log.empty() ? std::string("-") : metric_string(r.log.back().loss_total)) << '\n';
    } else if (bg->parsed()) {
      const TrainConfig cfg = bg_cfg.resolve(TrainConfig{}, "internal", false);
      const GeneratedScene d = read_dataset(bg_data);
      const auto views = training_views(d);
      Model model = read_model(bg_model);
      if (model.filter.empty()) {
        TrainConfig c = cfg;
        model.filter = smoothing_sigmas(model.scene, cameras_of(views, 1), c);
      }
      const fs::path out = bg_out;
      const auto internal = internal_guidance(d, views, model, cfg, out / "internal");
      std::map<ViewId, ExternalGuidance> external;
      GuidanceManifest manifest;
      manifest.scale = cfg.scale;
      if (!bg_manifest.empty()) {
        std::map<ViewId, ViewSize> sizes;
        for (const auto& v : views) sizes[v.id] = {v.camera.width, v.camera.height};
        external = ingest_external(read_manifest(bg_manifest), sizes);
      } else if (bg_source == "bicubic") {
        manifest.provenance = Provenance::BicubicFallback;
        Rng rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 0xB1C0);
        for (const auto& v : views)
          external.emplace(v.id, ExternalGuidance{bicubic_fallback(v.image, cfg.scale),
                                                  perturbed_depth(internal.at(v.id).depth, 0.05, 4, rng)});
      } else {
        if (d.truth.empty()) throw ConfigError("--external-source " + bg_source + " needs <data>/scene.txt");
        external = synthetic_external_guidance(d, cfg.scale,
                                               detail::parse_enum("external-source", bg_source, external_source_names()),
                                               ArtifactSettings{}, cfg.seed);
      }
      for (const auto& v : views) {
        const auto& e = external.at(v.id);
        const fs::path img = out / "external" / (v.id + ".fimg"), depth = out / "external" / (v.id + "_depth.fimg");
        write_fimg(img, e.image);
        write_fimg_depth(depth, e.depth);
        manifest.entries.push_back({v.id, fs::relative(img, out), fs::relative(depth, out)});
      }
      write_manifest(out / "manifest.txt", manifest);
      std::cout << "guidance for " << views.size() << " views at " << cfg.scale << "x in " << bg_out << '\n';
    } else if (th->parsed()) {
      TrainConfig cfg = th_cfg.resolve(TrainConfig{}, "hr", true);
      const GeneratedScene d = read_dataset(th_data);
      cfg.background = d.background;
      const auto views = training_views(d);
      const Model model = read_model(th_model);
      const GuidanceManifest manifest = read_manifest(fs::path(th_guidance) / "manifest.txt");
      if (manifest.scale != cfg.scale)
        throw ConfigError("guidance was built at scale " + std::to_string(manifest.scale) + ", training at " +
                          std::to_string(cfg.scale));
      std::map<ViewId, ViewSize> sizes;
      for (const auto& v : views) sizes[v.id] = {v.camera.width, v.camera.height};
      const auto external = ingest_external(manifest, sizes);
      if (model.filter.empty()) throw IoError("stage-1 model lacks filter.txt");
      const auto internal = internal_guidance(d, views, model, cfg, fs::path(th_guidance) / "internal");
      std::vector<ViewId> ids;
      for (const auto& v : views) ids.push_back(v.id);
      std::vector<GuidanceView> guidance;
      for (const auto& g : assemble_guidance(ids, external, internal)) guidance.push_back(g.view());
      HoldoutTargets h = holdout_targets(d, cfg.scale);
      const HrProblem problem(views, guidance, cfg);
      const TrainResult r = train_hr(views, guidance, ParamSet::from_scene(model.scene), cfg,
                                     h.eval ? &h.eval : nullptr, &std::clog);
      write_model(th_out, r, smoothing_sigmas(r.scene(), cameras_of(views, cfg.scale), cfg), cfg);
      for (std::size_t v = 0; v < views.size(); ++v)
        write_png(fs::path(th_out) / "masks" / (views[v].id + ".png"), mask_visualization(problem.masks()[v]));
      std::cout << "stage 2: " << r.log.size() << " steps, " << r.params.size() << " Gaussians, final loss "
                << (r.log.empty() ? std::string("-") : metric_string(r.log.back().loss_total)) << '\n';
    } else if (rd->parsed()) {
      const Model model = read_model(rd_model);
      std::vector<Camera> cams;
      std::vector<ViewId> ids;
      Vec3 background;
      if (!rd_data.empty()) {
        const GeneratedScene d = read_dataset(rd_data);
        cams = d.cameras;
        ids = d.ids;
        background = d.background;
      }
      if (!rd_cameras.empty()) {
        cams = read_cameras(rd_cameras);
        ids = view_ids(cams.size());
      }
      if (cams.empty()) throw ConfigError("render needs --data or --cameras");
      if (rd_background >= 0) background = {rd_background, rd_background, rd_background};
      RenderSettings s;
      s.background = background;
      s.smoothing = model.filter;
      for (std::size_t v = 0; v < cams.size(); ++v) {
        const RenderResult r = sr_splat(model.scene, cams[v], rd_scale, s);
        write_fimg(fs::path(rd_out) / (ids[v] + ".fimg"), r.image);
        write_png(fs::path(rd_out) / (ids[v] + ".png"), r.image);
        write_png(fs::path(rd_out) / "depth" / (ids[v] + ".png"), depth_visualization(r.depth));
      }
      std::cout << "rendered " << cams.size() << " views to " << rd_out << '\n';
    } else if (ev->parsed()) {
      std::vector<MetricRow> rows;
      const std::string config = fs::path(ev_renders).filename().string();
      std::set<fs::path> files;
      for (const auto& e : fs::directory_iterator(ev_renders))
        if (e.is_regular_file() && (e.path().extension() == ".fimg" || e.path().extension() == ".png"))
          files.insert(e.path());
      std::set<std::string> seen;
      double sp = 0, ss = 0;
      for (const auto& f : files) {
        const std::string stem = f.stem().string();
        if (seen.count(stem)) continue;  // prefer .fimg over its .png preview
        fs::path ref = fs::path(ev_reference) / (stem + ".fimg");
        if (!fs::exists(ref)) ref = fs::path(ev_reference) / (stem + ".png");
        if (!fs::exists(ref)) continue;
        seen.insert(stem);
        const ImageBuffer a = read_image(f), b = read_image(ref);
        if (!a.same_shape(b)) throw IoError("render and reference of " + stem + " differ in size");
        rows.push_back({config, stem, psnr(a, b), ssim_metric(a, b)});
        sp += rows.back().psnr;
        ss += rows.back().ssim;
      }
      if (rows.empty()) throw IoError("no render has a matching reference");
      const double n = static_cast<double>(rows.size());
      rows.push_back({config, "mean", sp / n, ss / n});
      if (ev_out.empty()) {
        std::cout << "config,view,psnr,ssim\n";
        for (const auto& r : rows)
          std::cout << r.config << ',' << r.view << ',' << metric_string(r.psnr) << ',' << metric_string(r.ssim)
                    << '\n';
      } else {
        write_metrics_csv(ev_out, rows);
      }
    } else if (re->parsed()) {
      ExperimentSpec spec = re_exp.resolve(re_cfg);
      spec.out = re_out;
      fs::create_directories(re_out);
      std::ofstream(fs::path(re_out) / "config_internal.txt") << dump_config(spec.stage1);
      std::ofstream(fs::path(re_out) / "config_hr.txt") << dump_config(spec.stage2);
      const ExperimentReport report = run_experiment(spec);
      print_rows(report.rows);
      if (re_ablation) {
        const PreparedExperiment p = prepare_experiment(spec);
        const auto rows = run_ablation(p, spec);
        write_metrics_csv(fs::path(re_out) / "ablation.csv", rows);
        print_rows(rows);
      }
      for (const auto& e : report.errors) std::cerr << "error: " << e << '\n';
      if (!report.errors.empty()) return kExitFailure;
    } else if (sw->parsed()) {
      ExperimentSpec spec = sw_exp.resolve(sw_cfg);
      fs::create_directories(sw_out);
      const PreparedExperiment p = prepare_experiment(spec);
      const auto points = sweep_threshold(p, spec, sw_thresholds);
      write_sweep_csv(fs::path(sw_out) / "threshold_sweep.csv", points);
      std::printf("%10s %10s %8s\n", "threshold", "psnr", "ssim");
      for (const auto& pt : points)
        std::printf("%10.3f %10.3f %8.4f\n", pt.threshold, pt.psnr, pt.ssim);
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}
