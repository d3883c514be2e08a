#include "fixtures.hpp"

#include "vitscope/sae/sae.hpp"

#include <benchmark/benchmark.h>

using namespace vitscope;

namespace {

Matrix random_tokens(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(n, d);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return x;
}

void BM_TopK(benchmark::State& state) {
  const auto f = state.range(0);
  const RowVector z = random_tokens(1, f, 3).row(0);
  for (auto _ : state) benchmark::DoNotOptimize(sae::topk_relu(z.data(), static_cast<int>(f), 8));
}
BENCHMARK(BM_TopK)->Arg(256)->Arg(4096);

void BM_EncodeDecode(benchmark::State& state) {
  const int f = static_cast<int>(state.range(0));
  const auto s = fixtures::random_sae(0, 64, f, 8, 1);
  const Matrix x = random_tokens(65, 64, 2);
  for (auto _ : state) benchmark::DoNotOptimize(sae::encode_decode(s, x));
  state.SetItemsProcessed(state.iterations() * x.rows());
}
BENCHMARK(BM_EncodeDecode)->Arg(256)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
