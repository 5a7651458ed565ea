// Serial reference vs OpenMP kernels on the shapes the model actually runs.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "stow/kernels/kernels.hpp"

namespace {

using stow::kernels::ConvGeometry;
using stow::kernels::Trans;

std::vector<float> random_values(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = random_values(m * k, 1);
  const auto b = random_values(k * n, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      stow::kernels::gemm_parallel<float>(Trans::none, Trans::none, m, k, n, a, b, c, false);
    else
      stow::kernels::gemm_serial<float>(Trans::none, Trans::none, m, k, n, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * m * k * n));
}

template <bool Parallel>
void BM_Im2col(benchmark::State& state) {
  ConvGeometry g;
  g.channels = static_cast<std::size_t>(state.range(0));
  g.height = g.width = static_cast<std::size_t>(state.range(1));
  g.kernel = 3;
  g.stride = 1;
  g.padding = 1;
  const auto x = random_values(g.channels * g.height * g.width, 3);
  std::vector<float> cols(g.patch_size() * g.out_height() * g.out_width());
  for (auto _ : state) {
    if constexpr (Parallel)
      stow::kernels::im2col_parallel<float>(g, x, cols);
    else
      stow::kernels::im2col_serial<float>(g, x, cols);
    benchmark::DoNotOptimize(cols.data());
  }
}

// Decoder projections, cross-attention scores, pixel-decoder conv as gemm.
#define GEMM_SHAPES ->Args({20, 64, 64})->Args({64, 64, 64})->Args({20, 32, 256})->Args({32, 576, 256})

BENCHMARK(BM_Gemm<false>) GEMM_SHAPES;
BENCHMARK(BM_Gemm<true>) GEMM_SHAPES;
BENCHMARK(BM_Im2col<false>)->Args({3, 64})->Args({32, 16});
BENCHMARK(BM_Im2col<true>)->Args({3, 64})->Args({32, 16});

}  // namespace

BENCHMARK_MAIN();
