// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only if
// every criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "iesrgs/bench.hpp"
#include "test_support.hpp"

using namespace iesrgs;
namespace fs = std::filesystem;
namespace t = iesrgs::testing;

namespace {

struct Outcome {
  bool pass{false};
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

DepthBuffer random_depth(Rng& rng, int w, int h, double lo = 1.0, double hi = 5.0) {
  DepthBuffer d(w, h, 0.0, 1.0);
  for (auto& v : d.data) v = rng.uniform(lo, hi);
  return d;
}

ImageBuffer offset_copy(Rng& rng, const ImageBuffer& b) {
  ImageBuffer a = b;
  for (auto& v : a.data) v += (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.01, 0.3);
  return a;
}

// ------------------------------------------------------------------ 1

Outcome rasterizer_oracle() {
  double worst = 0;
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(10000 + seed);
    const Camera cam = t::forward_camera(32, 32, 36);
    const auto n = static_cast<std::size_t>(1 + rng.index(64));
    const auto scene = t::random_scene(rng, n, cam, 0.5, 6.0);
    RenderSettings s;
    s.background = {rng.uniform(), rng.uniform(), rng.uniform()};
    const RenderResult a = render(scene, cam, s), b = t::naive_render(scene, cam, s);
    for (std::size_t i = 0; i < a.image.size(); ++i) worst = std::max(worst, std::abs(a.image.data[i] - b.image.data[i]));
    for (std::size_t i = 0; i < a.depth.size(); ++i) worst = std::max(worst, std::abs(a.depth.data[i] - b.depth.data[i]));
  }
  return {worst <= 1e-6, fmt("max |tile - naive| = %.3g over 100 scenes of <= 64 Gaussians at 32x32", worst)};
}

// ------------------------------------------------------------------ 2

struct GradTally {
  long checked{0};
  long failed{0};
  long skipped{0};
  std::string first_failure;

  void record(bool ok, const std::string& what) {
    ++checked;
    if (!ok && failed++ == 0) first_failure = what;
  }
};

template <typename F>
void check_image(GradTally& tally, const char* name, ImageBuffer a, const ImageBuffer& analytic, F loss) {
  const double h = 1e-5;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double v = a.data[i];
    a.data[i] = v + h;
    const double lp = loss(a);
    a.data[i] = v - h;
    const double lm = loss(a);
    a.data[i] = v;
    tally.record(t::grad_close(analytic.data[i], (lp - lm) / (2 * h)), name);
  }
}

template <typename F>
void check_depth(GradTally& tally, const char* name, DepthBuffer r, const std::vector<double>& analytic, F loss) {
  const double h = 1e-5;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double v = r.data[i];
    r.data[i] = v + h;
    const double lp = loss(r);
    r.data[i] = v - h;
    const double lm = loss(r);
    r.data[i] = v;
    tally.record(t::grad_close(analytic[i], (lp - lm) / (2 * h)), name);
  }
}

void check_renderer(GradTally& tally, int seed, bool smoothing) {
  Rng rng(20000 + 2 * seed + smoothing);
  const Camera cam = t::forward_camera(16, 16, 18);
  const auto scene = t::random_scene(rng, 5, cam, 1.0, 4.0);
  RenderSettings s;
  std::vector<double> sigma(scene.size());
  if (smoothing) {
    for (auto& v : sigma) v = rng.uniform(0.01, 0.2);
    s.smoothing = sigma;
    s.background = {rng.uniform(), rng.uniform(), rng.uniform()};
  }
  const t::GradCheckReport rep = t::check_render_gradients(scene, cam, t::random_upstream(rng, 16, 16), s);
  tally.checked += rep.checked;
  tally.skipped += rep.skipped;
  if (rep.failed && tally.failed == 0)
    tally.first_failure = fmt("renderer seed %d (worst rel %.3g)", seed, rep.worst_rel);
  tally.failed += rep.failed;
}

void check_losses(GradTally& tally, int seed) {
  Rng rng(30000 + seed);
  const int W = 16, H = 16;
  {
    const ImageBuffer a = t::random_image(rng, W, H, 3), b = t::random_image(rng, W, H, 3);
    check_image(tally, "d-ssim", a, dssim_loss(a, b).grad, [&](const ImageBuffer& x) { return dssim_loss(x, b).value; });
  }
  {
    const ImageBuffer b = t::random_image(rng, W, H, 3), a = offset_copy(rng, b);
    check_image(tally, "l1", a, l1_loss(a, b).grad, [&](const ImageBuffer& x) { return l1_loss(x, b).value; });
  }
  {
    const ImageBuffer ref = t::random_image(rng, W, H, 3), a = offset_copy(rng, ref);
    MaskBuffer m(W, H);
    for (auto& v : m.data) v = rng.uniform() < 0.4;
    for (auto mode : {MaskedSsimMode::Substitute, MaskedSsimMode::MultiplyMap}) {
      LossConfig cfg;
      cfg.masked_ssim = mode;
      check_image(tally, "masked texture", a, texture_loss(ref, a, cfg, &m).grad,
                  [&](const ImageBuffer& x) { return texture_loss(ref, x, cfg, &m).value; });
    }
  }
  {
    DepthBuffer r = random_depth(rng, W, H);
    const DepthBuffer e = random_depth(rng, W, H);
    for (std::size_t i = 0; i < r.size(); ++i) r.coverage[i] = rng.uniform() < 0.1 ? 0.01 : 1.0;
    for (auto mode : {PearsonMode::Global, PearsonMode::Patch}) {
      LossConfig cfg;
      cfg.pearson_mode = mode;
      cfg.patch_size = 5;
      check_depth(tally, "pearson", r, pearson_depth_loss(r, e, cfg).grad,
                  [&](const DepthBuffer& x) { return pearson_depth_loss(x, e, cfg).value; });
    }
  }
  {
    const DepthBuffer i = random_depth(rng, W, H);
    DepthBuffer r = i;
    for (auto& v : r.data) v += (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.01, 0.5);
    check_depth(tally, "internal geometry", r, internal_geom_loss(r, i).grad,
                [&](const DepthBuffer& x) { return internal_geom_loss(x, i).value; });
  }
  GuidanceView g;
  g.internal_image = t::random_image(rng, W, H, 3, 0.1, 1.0);
  g.external_image = t::random_image(rng, W, H, 3, 0.1, 1.0);
  g.internal_depth = random_depth(rng, W, H);
  g.external_depth = random_depth(rng, W, H);
  LossConfig cfg;
  cfg.lambda_i = 0.3;
  cfg.lambda_e = 0.2;
  ImageBuffer img = offset_copy(rng, g.internal_image);
  // Keep |img - external| away from the L1 kink as well.
  for (std::size_t k = 0; k < img.size(); ++k)
    if (std::abs(img.data[k] - g.external_image.data[k]) < 0.01) img.data[k] += 0.02;
  DepthBuffer depth = g.internal_depth;
  for (auto& v : depth.data) v += (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.01, 0.5);
  check_image(tally, "fused texture", img, fused_texture_loss(img, g.internal_image, g.external_image, cfg).grad,
              [&](const ImageBuffer& x) { return fused_texture_loss(x, g.internal_image, g.external_image, cfg).value; });
  check_depth(tally, "fused geometry", depth, fused_geometry_loss(depth, g.internal_depth, g.external_depth, cfg).grad,
              [&](const DepthBuffer& x) {
                return fused_geometry_loss(x, g.internal_depth, g.external_depth, cfg).value;
              });
  const FinalLoss l = final_loss(img, depth, g, cfg);
  check_image(tally, "final (image)", img, l.upstream.d_image,
              [&](const ImageBuffer& x) { return final_loss(x, depth, g, cfg).total; });
  check_depth(tally, "final (depth)", depth, l.upstream.d_depth,
              [&](const DepthBuffer& x) { return final_loss(img, x, g, cfg).total; });
}

Outcome gradient_suite() {
  GradTally render_tally, loss_tally;
  for (int seed = 0; seed < 50; ++seed) {
    check_renderer(render_tally, seed, false);
    check_renderer(render_tally, seed, true);
    check_losses(loss_tally, seed);
  }
  // FD pairs that straddle a footprint cutoff are skipped; they must stay rare.
  const bool rare_skips = render_tally.skipped * 20 <= render_tally.checked;
  std::string detail =
      fmt("50 seeds: %ld renderer partials (position, scale, rotation, color, opacity; %ld skipped at cutoffs), "
          "%ld loss partials; failures %ld + %ld",
          render_tally.checked, render_tally.skipped, loss_tally.checked, render_tally.failed, loss_tally.failed);
  if (render_tally.failed) detail += "; first: " + render_tally.first_failure;
  if (loss_tally.failed) detail += "; first: " + loss_tally.first_failure;
  return {render_tally.failed == 0 && loss_tally.failed == 0 && rare_skips, detail};
}

// ------------------------------------------------------------------ 3

Outcome loss_identities() {
  Rng rng(40000);
  std::vector<std::string> bad;
  const ImageBuffer a = t::random_image(rng, 16, 16, 3, 0.05, 1.0);
  const ImageBuffer b = t::random_image(rng, 16, 16, 3, 0.05, 1.0);
  const DepthBuffer d = random_depth(rng, 16, 16);
  const LossConfig cfg;
  auto exact_zero = [&](const char* name, double v) {
    if (v != 0.0) bad.push_back(fmt("%s = %.3g", name, v));
  };
  exact_zero("L1(a, a)", l1_loss(a, a).value);
  exact_zero("D-SSIM(a, a)", dssim_loss(a, a).value);
  exact_zero("texture(a, a)", texture_loss(a, a, cfg).value);
  exact_zero("internal geometry(d, d)", internal_geom_loss(d, d).value);
  exact_zero("fused texture(a; a, a)", fused_texture_loss(a, a, a, cfg).value);
  {
    LossConfig zero = cfg;
    zero.threshold = 0.0;
    exact_zero("fused texture(a; a, b) at T=0", fused_texture_loss(a, a, b, zero).value);
  }

  double pearson_affine = 0, pearson_neg = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const DepthBuffer e = random_depth(rng, 16, 16);
    DepthBuffer r = e, n = e;
    const double s = rng.uniform(0.01, 100.0), off = rng.uniform(-10.0, 10.0);
    for (auto& v : r.data) v = s * v + off;
    for (auto& v : n.data) v = -s * v + off;
    pearson_affine = std::max(pearson_affine, std::abs(pearson_depth_loss(r, e).value));
    pearson_neg = std::max(pearson_neg, std::abs(pearson_depth_loss(n, e).value - 2.0));
  }
  if (pearson_affine > 1e-6) bad.push_back(fmt("Pearson under a*e+b: %.3g", pearson_affine));
  if (pearson_neg > 1e-6) bad.push_back(fmt("Pearson under negation: |L-2| = %.3g", pearson_neg));
  const double geometry_identity = fused_geometry_loss(d, d, d, cfg).value;
  if (std::abs(geometry_identity) > 1e-6) bad.push_back(fmt("fused geometry(d; d, d) = %.3g", geometry_identity));

  double internal_only = 0, collapse = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const ImageBuffer r = t::random_image(rng, 16, 16, 3);
    const ImageBuffer i = t::random_image(rng, 16, 16, 3, 0.05, 1.0), e = t::random_image(rng, 16, 16, 3, 0.05, 1.0);
    LossConfig zero = cfg;
    zero.threshold = 0.0;
    internal_only = std::max(internal_only,
                             std::abs(fused_texture_loss(r, i, e, zero).value - texture_loss(i, r, zero).value));
    collapse = std::max(collapse, std::abs(fused_texture_loss(r, e, e, cfg).value - texture_loss(e, r, cfg).value));
  }
  if (internal_only > 1e-12) bad.push_back(fmt("T=0 vs internal texture: %.3g", internal_only));
  if (collapse > 1e-12) bad.push_back(fmt("I=E vs external texture: %.3g", collapse));

  std::string detail = fmt("identity losses exact; Pearson affine %.2g, negation %.2g; T=0 %.2g, I=E %.2g",
                           pearson_affine, pearson_neg, internal_only, collapse);
  for (const auto& s : bad) detail += "; " + s;
  return {bad.empty(), detail};
}

// ------------------------------------------------------------------ 4

Outcome mask_oracle() {
  const double eps = 1e-6;
  long pixels = 0, mismatches = 0, set = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(50000 + trial);
    const int w = 8 + static_cast<int>(rng.index(25)), h = 8 + static_cast<int>(rng.index(25));
    ImageBuffer i = t::random_image(rng, w, h, 3), e = t::random_image(rng, w, h, 3);
    // Exact zeros in the internal image exercise the epsilon; equal pixels
    // give zero discrepancy.
    for (std::size_t k = 0; k < i.size(); ++k) {
      const double u = rng.uniform();
      if (u < 0.05) i.data[k] = 0.0;
      else if (u < 0.10) e.data[k] = i.data[k];
    }
    const ImageBuffer d = discrepancy_map(i, e, eps);
    for (double T : {0.6, 0.9}) {
      const MaskBuffer m = binary_mask(d, T);
      for (int p = 0; p < w * h; ++p) {
        double sum = 0;
        for (int c = 0; c < 3; ++c) sum += std::abs(i.data[p * 3 + c] - e.data[p * 3 + c]) / (i.data[p * 3 + c] + eps);
        const int expected = sum / 3.0 >= T ? 1 : 0;
        mismatches += m.data[p] != expected;
        set += expected;
        ++pixels;
      }
    }
  }
  return {mismatches == 0 && set > 0 && set < pixels,
          fmt("%ld mask bits at T in {0.6, 0.9}, eps = 1e-6: %ld set, %ld mismatches", pixels, set, mismatches)};
}

// ------------------------------------------------------------------ 5

bool bit_equal(const RenderResult& a, const RenderResult& b) {
  return a.image.width == b.image.width && a.image.height == b.image.height && a.image.data == b.image.data &&
         a.depth.data == b.depth.data && a.depth.coverage == b.depth.coverage;
}

Outcome sr_splat_identity() {
  int failures = 0;
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(60000 + seed);
    const Camera cam = t::forward_camera(24, 20, 26);
    const auto scene = t::random_scene(rng, 30, cam);
    RenderSettings s;
    s.background = {rng.uniform(), rng.uniform(), rng.uniform()};
    Camera hand = cam;
    hand.focal = {2 * cam.focal.x, 2 * cam.focal.y};
    hand.principal_point = {2 * cam.principal_point.x, 2 * cam.principal_point.y};
    hand.width = 2 * cam.width;
    hand.height = 2 * cam.height;
    failures += !bit_equal(sr_splat(scene, cam, 1, s), render(scene, cam, s));
    failures += !bit_equal(sr_splat(scene, cam, 2, s), render(scene, hand, s));
  }
  return {failures == 0, fmt("20 scenes, factors 1 and 2: %d differ", failures)};
}

// ------------------------------------------------------------------ 6

Outcome mv_linearity() {
  ExperimentSpec spec = desk_experiment(0);
  spec.stage1.iterations = 50;
  const PreparedExperiment p = prepare_experiment(spec);
  const TrainConfig cfg = stage_config(spec, spec.stage2);
  const HrProblem hr(p.train_views, p.guidance, cfg);
  const StageProblem problem = hr.problem();
  const auto scene = p.stage1.scene();
  const std::vector<double> sigma = smoothing_sigmas(scene, problem.cameras, cfg);
  const RenderSettings settings = render_settings(cfg, sigma);
  const std::vector<std::size_t> views = {5, 0, 3};
  const ViewLoss joint = mv_gradient(scene, views, problem, settings);
  RenderGradients sum(scene.size());
  for (std::size_t v : views) {
    const std::size_t one[] = {v};
    sum += mv_gradient(scene, one, problem, settings).grads;
  }
  double worst = 0;
  for (std::size_t i = 0; i < scene.size(); ++i)
    for (int k = 0; k < 14; ++k)
      worst = std::max(worst, std::abs(t::grad_slot(joint.grads.gaussians[i], k) - t::grad_slot(sum.gaussians[i], k)));
  return {worst <= 1e-9, fmt("3-view HR fused-loss gradient vs sum of singles: max |d| = %.3g", worst)};
}

// ------------------------------------------------------------------ 7-9

const std::vector<std::uint64_t> kSeeds = {0, 1, 2};

Outcome end_to_end() {
  std::vector<double> gains;
  std::string detail;
  for (auto seed : kSeeds) {
    const auto start = std::chrono::steady_clock::now();
    const ExperimentSpec spec = desk_experiment(seed);
    const PreparedExperiment p = prepare_experiment(spec);
    const double internal = mean_psnr(evaluate_internal(p, spec).rows, "internal");
    const double fused = mean_psnr(run_variant(p, spec, "fused", spec.stage2.loss).eval.rows, "fused");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    gains.push_back(fused - internal);
    detail += fmt("seed %llu %.2f -> %.2f dB (%.0f s); ", static_cast<unsigned long long>(seed), internal, fused, secs);
  }
  const double m = median(gains);
  return {m >= 1.0, detail + fmt("median gain %.2f dB (need >= 1)", m)};
}

ExperimentSpec artifact_experiment(std::uint64_t seed) {
  ExperimentSpec spec = desk_experiment(seed);
  spec.external = ExternalSource::Artifacts;
  return spec;
}

struct ArtifactRuns {
  std::vector<std::vector<MetricRow>> ablation;  // per seed
  std::vector<std::vector<SweepPoint>> sweep;    // per seed, T ascending
};

ArtifactRuns run_artifact_experiments() {
  ArtifactRuns out;
  for (auto seed : kSeeds) {
    const ExperimentSpec spec = artifact_experiment(seed);
    const PreparedExperiment p = prepare_experiment(spec);
    auto rows = run_ablation(p, spec);
    // The last ablation row is full fusion at the default threshold.
    const double default_t = spec.stage2.loss.threshold;
    auto sweep = sweep_threshold(p, spec, {0.0, 0.3, 0.9, 1.0});
    sweep.push_back({default_t, rows.back().psnr, rows.back().ssim});
    std::sort(sweep.begin(), sweep.end(), [](const SweepPoint& a, const SweepPoint& b) { return a.threshold < b.threshold; });
    out.ablation.push_back(std::move(rows));
    out.sweep.push_back(std::move(sweep));
  }
  return out;
}

Outcome ablation_monotonicity(const ArtifactRuns& runs) {
  const auto& names = runs.ablation.front();
  bool pass = true;
  std::string detail;
  for (std::size_t k = 0; k < names.size(); ++k) {
    std::vector<double> psnr, step;
    for (const auto& rows : runs.ablation) {
      psnr.push_back(rows[k].psnr);
      if (k) step.push_back(rows[k].psnr - rows[k - 1].psnr);
    }
    detail += fmt("%s %.2f", names[k].config.c_str(), median(psnr));
    if (k) {
      const double m = median(step);
      pass = pass && m >= -0.1;
      detail += fmt(" (%+.2f)", m);
    }
    detail += k + 1 < names.size() ? "; " : "";
  }
  return {pass, detail + " [median dB over seeds; steps need >= -0.1]"};
}

Outcome threshold_sweep(const ArtifactRuns& runs) {
  std::vector<double> margins;
  std::string detail = "median PSNR:";
  const std::size_t n = runs.sweep.front().size();
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> v;
    for (const auto& s : runs.sweep) v.push_back(s[k].psnr);
    detail += fmt(" T=%.1f %.2f", runs.sweep.front()[k].threshold, median(v));
  }
  for (const auto& s : runs.sweep) {
    double best_interior = -1e300, ends = -1e300;
    for (const auto& pt : s) {
      if (pt.threshold == 0.0 || pt.threshold == 1.0) ends = std::max(ends, pt.psnr);
      else best_interior = std::max(best_interior, pt.psnr);
    }
    margins.push_back(best_interior - ends);
  }
  const double m = median(margins);
  return {m >= 0.0, detail + fmt("; best interior - max(T=0, T=1) median %+.2f dB", m)};
}

// ------------------------------------------------------------------ 10

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "iesrgs_acceptance_determinism";
  fs::remove_all(root);
  std::vector<fs::path> outs = {root / "a", root / "b"};
  for (const auto& out : outs) {
    const std::string cmd = std::string("\"") + IESRGS_CLI + "\" run-experiment --seed 7 --iters-internal 300 "
                            "--iters 100 --out \"" + out.string() + "\" > \"" + (root / "log.txt").string() +
                            "\" 2>&1";
    fs::create_directories(root);
    const int rc = std::system(cmd.c_str());
    if (rc != 0) return {false, fmt("run-experiment exited with status %d", rc)};
  }
  long compared = 0;
  std::vector<std::string> differ;
  for (const auto& e : fs::recursive_directory_iterator(outs[0])) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), outs[0]);
    ++compared;
    if (!fs::exists(outs[1] / rel) || slurp(e.path()) != slurp(outs[1] / rel)) differ.push_back(rel.string());
  }
  bool have_checkpoints = fs::exists(outs[0] / "fused" / "checkpoint.iesr") && fs::exists(outs[0] / "metrics.csv");
  std::string detail = fmt("two CLI runs, seed 7: %ld files compared (checkpoints, metrics.csv, renders), %zu differ",
                           compared, differ.size());
  if (!differ.empty()) detail += "; first: " + differ.front();
  if (differ.empty()) fs::remove_all(root);
  return {differ.empty() && have_checkpoints, detail};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int n, const char* name, const std::function<Outcome()>& f) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.pass;
    std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  report(1, "rasterizer oracle equivalence", rasterizer_oracle);
  report(2, "gradient suite", gradient_suite);
  report(3, "loss identities", loss_identities);
  report(4, "mask oracle", mask_oracle);
  report(5, "sr-splat identity", sr_splat_identity);
  report(6, "multi-view linearity", mv_linearity);
  report(7, "end-to-end desk-scale SR", end_to_end);

  ArtifactRuns runs;
  bool runs_ok = true;
  std::string runs_error;
  try {
    runs = run_artifact_experiments();
  } catch (const std::exception& e) {
    runs_ok = false;
    runs_error = e.what();
  }
  auto with_runs = [&](Outcome (*f)(const ArtifactRuns&)) {
    return [&, f]() -> Outcome {
      if (!runs_ok) return {false, "experiment failed: " + runs_error};
      return f(runs);
    };
  };
  report(8, "ablation monotonicity", with_runs(ablation_monotonicity));
  report(9, "threshold sweep", with_runs(threshold_sweep));
  report(10, "determinism", determinism);

  std::printf("%d of 10 criteria passed\n", 10 - failures);
  return failures == 0 ? 0 : 1;
}
