// Generates a small synthetic scene, trains the internal model on its LR
// views, then trains the HR model under fused internal/external guidance and
// prints holdout PSNR for both.
#include <cstdio>

#include "iesrgs/bench.hpp"

int main() {
  using namespace iesrgs;
  ExperimentSpec spec = desk_experiment(0);
  spec.scene.n_gaussians = 40;
  spec.scene.lr_size = 24;
  spec.scale = 2;
  spec.stage1.iterations = 300;
  spec.stage2.iterations = 100;

  const PreparedExperiment p = prepare_experiment(spec);
  const ModelEvaluation internal = evaluate_internal(p, spec);
  const VariantResult fused = run_variant(p, spec, "fused", spec.stage2.loss);

  std::printf("internal %.3f dB\n", mean_psnr(internal.rows, "internal"));
  std::printf("fused    %.3f dB\n", mean_psnr(fused.eval.rows, "fused"));
  return 0;
}
