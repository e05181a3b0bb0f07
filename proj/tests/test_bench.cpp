#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>

#include "iesrgs/bench.hpp"
#include "test_support.hpp"

using namespace iesrgs;
namespace t = iesrgs::testing;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  const fs::path dir = fs::temp_directory_path() / (std::string("iesrgs_") + info->test_suite_name() + "_" + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// A few-second experiment: 20 Gaussians, 16x16 LR, 2x scale.
ExperimentSpec tiny_experiment(std::uint64_t seed) {
  ExperimentSpec spec = desk_experiment(seed);
  spec.scene.n_gaussians = 20;
  spec.scene.lr_size = 16;
  spec.scene.train_views = 4;
  spec.scene.holdout_views = 1;
  spec.scene.down_factor = 2;
  spec.scale = 2;
  spec.stage1.iterations = 30;
  spec.stage2.iterations = 10;
  spec.stage1.mv_views = spec.stage2.mv_views = 2;
  return spec;
}

/// SSIM by direct summation over each 2D window (no separable passes).
double direct_ssim(const ImageBuffer& a, const ImageBuffer& b) {
  const int half = 5;
  double kern[11], sum = 0;
  for (int i = 0; i < 11; ++i) sum += kern[i] = std::exp(-(i - half) * (i - half) / (2 * 1.5 * 1.5));
  auto mirror = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  for (int c = 0; c < a.channels; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (int j = -half; j <= half; ++j)
          for (int i = -half; i <= half; ++i) {
            const double w = kern[i + half] * kern[j + half] / (sum * sum);
            const double va = a.at(mirror(x + i, a.width), mirror(y + j, a.height), c);
            const double vb = b.at(mirror(x + i, a.width), mirror(y + j, a.height), c);
            mx += w * va;
            my += w * vb;
            xx += w * va * va;
            yy += w * vb * vb;
            xy += w * va * vb;
          }
        total += (2 * mx * my + c1) * (2 * (xy - mx * my) + c2) /
                 ((mx * mx + my * my + c1) * (xx - mx * mx + yy - my * my + c2));
      }
  return total / static_cast<double>(a.size());
}

}  // namespace

// ---------------------------------------------------------------- scenes

TEST(GenerateScene, SameSeedGivesIdenticalFiles) {
  const fs::path dir = temp_dir();
  for (Layout layout : {Layout::Cluster, Layout::Shell, Layout::TexturedGrid}) {
    SceneSpec spec;
    spec.seed = 7;
    spec.layout = layout;
    spec.n_gaussians = 30;
    spec.lr_size = 16;
    const GeneratedScene a = generate_scene(spec), b = generate_scene(spec);
    write_scene(dir / "a.txt", a.truth);
    write_scene(dir / "b.txt", b.truth);
    write_cameras(dir / "ca.txt", a.cameras);
    write_cameras(dir / "cb.txt", b.cameras);
    EXPECT_EQ(slurp(dir / "a.txt"), slurp(dir / "b.txt"));
    EXPECT_EQ(slurp(dir / "ca.txt"), slurp(dir / "cb.txt"));
    EXPECT_EQ(a.lr, b.lr);
    spec.seed = 8;
    EXPECT_NE(generate_scene(spec).truth[0].scale.x, a.truth[0].scale.x);
  }
}

TEST(GenerateScene, LayoutsStayInsideTheVolume) {
  for (Layout layout : {Layout::Cluster, Layout::Shell, Layout::TexturedGrid}) {
    const auto scene = generate_gaussians(3, 64, layout);
    ASSERT_EQ(scene.size(), 64u);
    for (const auto& g : scene) {
      for (int k = 0; k < 3; ++k) {
        EXPECT_LE(std::abs(g.position[k]), 0.7);
        EXPECT_GT(g.scale[k], 0.0);
      }
      EXPECT_NEAR(g.rotation.norm(), 1.0, 1e-12);
      EXPECT_GE(g.opacity, 0.6);
    }
  }
}

TEST(GenerateScene, HoldoutIsDisjointFromTraining) {
  SceneSpec spec;
  spec.lr_size = 8;
  spec.n_gaussians = 5;
  const GeneratedScene s = generate_scene(spec);
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.holdout.size(), 2u);
  for (std::size_t h : s.holdout) EXPECT_EQ(std::count(s.train.begin(), s.train.end(), h), 0);
  EXPECT_NE(s.holdout[0], s.holdout[1]);
}

TEST(GenerateScene, LrViewEqualsDownsampleOracleOfHrRender) {
  SceneSpec spec;
  spec.n_gaussians = 40;
  spec.lr_size = 12;
  const GeneratedScene s = generate_scene(spec);
  const int f = spec.down_factor;
  for (std::size_t v : {std::size_t{0}, std::size_t{5}}) {
    const ImageBuffer hr = render(s.truth, s.cameras[v].scaled(f)).image;
    const ImageBuffer& lr = s.lr[v];
    ASSERT_EQ(lr.width, 12);
    for (int y = 0; y < lr.height; ++y)
      for (int x = 0; x < lr.width; ++x)
        for (int c = 0; c < 3; ++c) {
          const double cx = (x + 0.5) * f - 0.5, cy = (y + 0.5) * f - 0.5;
          double acc = 0, wsum = 0;
          for (int j = -12; j < hr.height + 12; ++j)
            for (int i = -12; i < hr.width + 12; ++i) {
              const double w = catmull_rom((i - cx) / f) * catmull_rom((j - cy) / f);
              if (w == 0) continue;
              acc += w * hr.at(std::clamp(i, 0, hr.width - 1), std::clamp(j, 0, hr.height - 1), c);
              wsum += w;
            }
          EXPECT_NEAR(lr.at(x, y, c), acc / wsum, 1e-12);
        }
  }
}

TEST(GenerateScene, PointCloudInitFollowsNeighbours) {
  std::vector<Gaussian3D> truth(3);
  truth[0].position = {0, 0, 0};
  truth[1].position = {0.1, 0, 0};
  truth[2].position = {0, 0.2, 0};
  const auto init = point_cloud_init(truth, 0, 0.0);
  // nearest distances of point 0: 0.1 and 0.2 -> sqrt((0.01 + 0.04) / 2)
  EXPECT_NEAR(init[0].scale.x, std::sqrt(0.025), 1e-12);
  EXPECT_EQ(init[0].position, truth[0].position);
  EXPECT_EQ(init[1].color, (Vec3{0.5, 0.5, 0.5}));
}

TEST(Artifacts, AreViewInconsistentAndInRange) {
  const ImageBuffer base(64, 64, 3, 0.5);
  iesrgs::Rng rng(1);
  const ImageBuffer a = add_artifacts(base, ArtifactSettings{}, rng);
  const ImageBuffer b = add_artifacts(base, ArtifactSettings{}, rng);
  EXPECT_NE(a, base);
  EXPECT_NE(a, b);
  for (double v : a.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

// ---------------------------------------------------------------- metrics

TEST(Metrics, IdenticalImagesGiveInfinitePsnrAndUnitSsim) {
  iesrgs::Rng rng(2);
  const ImageBuffer a = t::random_image(rng, 16, 16, 3);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_EQ(metric_string(psnr(a, a)), "inf");
  EXPECT_TRUE(std::isinf(parse_metric("inf")));
  EXPECT_NEAR(ssim_metric(a, a), 1.0, 1e-12);
}

TEST(Metrics, UniformOffsetGivesTwentyDecibels) {
  EXPECT_NEAR(psnr(ImageBuffer(8, 8, 3, 0.0), ImageBuffer(8, 8, 3, 0.1)), 20.0, 1e-9);
}

TEST(Metrics, MatchDirectFormulaOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    iesrgs::Rng rng(seed);
    const ImageBuffer a = t::random_image(rng, 8, 8, 3), b = t::random_image(rng, 8, 8, 3);
    long double se = 0;
    for (std::size_t i = 0; i < a.size(); ++i) se += (static_cast<long double>(a.data[i]) - b.data[i]) * (a.data[i] - b.data[i]);
    const double mse = static_cast<double>(se / a.size());
    EXPECT_NEAR(psnr(a, b), -10.0 * std::log10(mse), 1e-9);
    EXPECT_NEAR(ssim_metric(a, b), direct_ssim(a, b), 1e-9);
  }
}

TEST(Metrics, MetricStringRoundTrips) {
  for (double v : {0.1, 27.15, 1.0 / 3.0, -2.5}) EXPECT_EQ(parse_metric(metric_string(v)), v);
  EXPECT_TRUE(std::isnan(parse_metric(metric_string(std::numeric_limits<double>::quiet_NaN()))));
}

// ---------------------------------------------------------------- experiment

TEST(Experiment, ReportCsvRoundTripsThroughSavedRenders) {
  ExperimentSpec spec = tiny_experiment(1);
  const fs::path dir = temp_dir();
  spec.out = dir;
  const ExperimentReport report = run_experiment(spec);
  EXPECT_TRUE(report.errors.empty());
  const auto rows = read_metrics_csv(dir / "metrics.csv");
  ASSERT_EQ(rows.size(), report.rows.size());
  ASSERT_EQ(rows.size(), 6u);  // 3 configs x (1 holdout view + mean)
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].config, report.rows[i].config);
    EXPECT_EQ(rows[i].psnr, report.rows[i].psnr);
    if (rows[i].view == "mean") continue;
    const ImageBuffer render = read_fimg_image(dir / rows[i].config / "renders" / (rows[i].view + ".fimg"));
    const ImageBuffer gt = read_fimg_image(dir / "truth" / "hr" / (rows[i].view + ".fimg"));
    EXPECT_NEAR(psnr(render, gt), rows[i].psnr, 1e-9);
    EXPECT_NEAR(ssim_metric(render, gt), rows[i].ssim, 1e-9);
  }
  for (const char* f : {"grids/view_02.png", "masks/view_00.png", "fused/depth/view_02.png",
                        "internal/checkpoint.iesr", "fused/log.csv", "truth/split.txt"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
}

TEST(Experiment, ZeroIterationsLeaveEveryModelAtInitialization) {
  ExperimentSpec spec = tiny_experiment(2);
  spec.stage1.iterations = spec.stage2.iterations = 0;
  const fs::path dir = temp_dir();
  spec.out = dir;
  const ExperimentReport report = run_experiment(spec);
  EXPECT_TRUE(report.errors.empty());
  EXPECT_EQ(report.rows.size(), 6u);
  const GeneratedScene data = generate_scene(spec.scene);
  const fs::path init = dir / "init.txt";
  write_scene(init, ParamSet::from_scene(point_cloud_init(data.truth, spec.scene.seed)).scene());
  for (const char* m : {"internal", "external-only", "fused"})
    EXPECT_EQ(slurp(dir / m / "scene.txt"), slurp(init)) << m;
}

TEST(Experiment, RepeatedRunsWriteIdenticalFiles) {
  ExperimentSpec spec = tiny_experiment(3);
  spec.external = ExternalSource::Artifacts;
  const fs::path a = temp_dir() / "a", b = a.parent_path() / "b";
  spec.out = a;
  run_experiment(spec);
  spec.out = b;
  run_experiment(spec);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
  }
  EXPECT_GT(files, 20u);
}

TEST(Experiment, ScenesCanBeLoadedFromFiles) {
  ExperimentSpec spec = tiny_experiment(4);
  const GeneratedScene gen = generate_scene(spec.scene);
  const fs::path dir = temp_dir();
  write_scene(dir / "scene.txt", gen.truth);
  write_cameras(dir / "cameras.txt", gen.cameras);
  spec.scene_dir = dir;
  const GeneratedScene loaded = load_or_generate(spec);
  EXPECT_EQ(loaded.lr, gen.lr);
  EXPECT_EQ(loaded.holdout, gen.holdout);
}

TEST(Experiment, AblationRowsAddOneComponentEach) {
  const LossConfig base;
  const auto rows = ablation_rows(base);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0].second.texture_mode, TextureMode::ExternalOnly);
  EXPECT_EQ(rows[0].second.lambda_e, 0.0);
  EXPECT_EQ(rows[0].second.lambda_i, 0.0);
  EXPECT_EQ(rows[1].second.lambda_e, base.lambda_e);
  EXPECT_EQ(rows[2].second.texture_mode, TextureMode::Sum);
  EXPECT_EQ(rows[3].second.lambda_i, base.lambda_i);
  EXPECT_EQ(rows[4].second.texture_mode, TextureMode::Fused);
  EXPECT_EQ(rows[4].second.threshold, base.threshold);
}

TEST(Experiment, SweepCsvFormat) {
  const fs::path p = temp_dir() / "sweep.csv";
  write_sweep_csv(p, {{0.0, 20.5, 0.75}, {0.6, std::numeric_limits<double>::infinity(), 1.0}});
  EXPECT_EQ(slurp(p), "threshold,psnr,ssim\n0,20.5,0.75\n0.59999999999999998,inf,1\n");
}

// ---------------------------------------------------------------- descent

TEST(Descent, FrozenStructureMovingAverageDoesNotIncrease) {
  // Densification off, desk scene, 2000 steps, 3 seeds. Per-step losses are
  // sampled over random view subsets, so "non-increasing" is checked as a
  // statistical property: a 100-step block mean may exceed its predecessor
  // by at most two standard errors of the difference.
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const ExperimentSpec spec = desk_experiment(seed);
    const GeneratedScene data = generate_scene(spec.scene);
    std::vector<TrainView> views;
    for (std::size_t v : data.train) views.push_back({data.ids[v], data.cameras[v], data.lr[v]});
    TrainConfig cfg = stage_config(spec, spec.stage1);
    cfg.iterations = 2000;
    ASSERT_FALSE(cfg.densify);
    const TrainResult r = train_internal(views, point_cloud_init(data.truth, seed), cfg);
    std::vector<double> mean, var;
    for (std::size_t b = 0; b < 20; ++b) {
      double s = 0, s2 = 0;
      for (std::size_t i = b * 100; i < (b + 1) * 100; ++i) {
        s += r.log[i].loss_total;
        s2 += r.log[i].loss_total * r.log[i].loss_total;
      }
      mean.push_back(s / 100);
      var.push_back((s2 / 100 - mean.back() * mean.back()) * 100 / 99);
    }
    for (std::size_t b = 1; b < mean.size(); ++b) {
      const double se = std::sqrt((var[b] + var[b - 1]) / 100);
      EXPECT_LE(mean[b], mean[b - 1] + 2 * se) << "seed " << seed << " block " << b;
    }
    EXPECT_LT(mean.back(), mean.front() / 3) << "seed " << seed;
  }
}
