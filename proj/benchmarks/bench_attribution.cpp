#include "fixtures.hpp"

#include "vitscope/attribution/importance.hpp"

#include <benchmark/benchmark.h>

using namespace vitscope;

namespace {

// Default-size toy backbone (64x64 images, 65 tokens, width 64) with random
// f=256, k=8 SAEs at every read point.
struct FullToy {
  backbone::Vit vit = backbone::Vit::initialize(backbone::BackboneConfig{}, 5);
  std::vector<std::shared_ptr<const sae::SaeParams>> saes;
  std::vector<sae::FeatureStats> stats;
  std::unique_ptr<attribution::ReplacementModel> rm;
  backbone::Image image = fixtures::random_image(64, 17);

  FullToy() {
    const int d = vit.config().width;
    for (int l = 0; l <= vit.config().layers; ++l) {
      saes.push_back(std::make_shared<const sae::SaeParams>(fixtures::random_sae(l, d, 256, 8, 40 + l)));
      sae::FeatureStatsAccumulator acc(l, 256, vit.num_tokens(), d, 4);
      for (int i = 0; i < 4; ++i) {
        const auto img = fixtures::random_image(64, 100 + i);
        const auto rec = backbone::run_forward(vit, img, {}, false);
        const auto cd = sae::encode_decode(*saes[l], rec.read_points[l]);
        acc.add_image(i, cd.codes, cd.error, rec.read_points[l], 0);
      }
      stats.push_back(acc.finalize());
    }
    rm = std::make_unique<attribution::ReplacementModel>(attribution::make_sae_model(vit, saes, stats));
  }
};

const FullToy& toy() {
  static const FullToy t;
  return t;
}

// The most important downstream nodes at read point layer + 1.
std::vector<int> downstream(attribution::ImageAttribution& ctx, int layer, int count) {
  const RowVector imp = ctx.node_importance(layer + 1).cwiseAbs();
  std::vector<int> idx(imp.size());
  for (int i = 0; i < static_cast<int>(idx.size()); ++i) idx[i] = i;
  std::partial_sort(idx.begin(), idx.begin() + count, idx.end(), [&](int a, int b) { return imp(a) > imp(b); });
  idx.resize(count);
  return idx;
}

void BM_EdgeImportanceJvp(benchmark::State& state) {
  const auto& t = toy();
  const int layer = static_cast<int>(state.range(0));
  for (auto _ : state) {
    attribution::ImageAttribution ctx(*t.rm, t.image, attribution::Objective::logit(0), backbone::GradMode::kCorrected);
    const auto down = downstream(ctx, layer, 8);
    benchmark::DoNotOptimize(ctx.edge_importance(layer, down));
  }
}
BENCHMARK(BM_EdgeImportanceJvp)->Arg(0)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_EdgeImportanceNaive(benchmark::State& state) {
  const auto& t = toy();
  const int layer = static_cast<int>(state.range(0));
  for (auto _ : state) {
    attribution::ImageAttribution ctx(*t.rm, t.image, attribution::Objective::logit(0), backbone::GradMode::kCorrected);
    const auto down = downstream(ctx, layer, 8);
    benchmark::DoNotOptimize(ctx.naive_edge_importance(layer, down));
  }
}
BENCHMARK(BM_EdgeImportanceNaive)->Arg(0)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_ImageAttributionSetup(benchmark::State& state) {
  const auto& t = toy();
  for (auto _ : state) {
    attribution::ImageAttribution ctx(*t.rm, t.image, attribution::Objective::logit(0), backbone::GradMode::kCorrected);
    benchmark::DoNotOptimize(ctx.objective_value());
  }
}
BENCHMARK(BM_ImageAttributionSetup)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
