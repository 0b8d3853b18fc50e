// Serial reference kernels against their OpenMP versions, at the sizes the
// training loop uses: GRU and projection matmuls (T = 125 frames, 64 units),
// the CI-SDR cross-correlation (16000 samples, 256 lags) and RIR convolution.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "bfsep/kernels.hpp"

namespace k = bfsep::kernels;

namespace {

std::vector<double> noise(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1)),
             kk = static_cast<std::size_t>(state.range(2));
  const auto a = noise(m * kk, 1), b = noise(kk * n, 2);
  std::vector<double> c(m * n);
  const k::GemmShape s{m, n, kk};
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::gemm(s, a.data(), b.data(), c.data(), false);
    else
      k::reference::gemm(s, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * m * n * kk));
}

template <bool Parallel>
void BM_xcorr(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0)), lags = static_cast<std::size_t>(state.range(1));
  const auto a = noise(len, 3), b = noise(len + lags, 4);
  std::vector<double> out(lags);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::xcorr(a, b, out);
    else
      k::reference::xcorr(a, b, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_convolve(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0)), taps = static_cast<std::size_t>(state.range(1));
  const auto x = noise(len, 5), h = noise(taps, 6);
  std::vector<double> out(len + taps - 1);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::convolve_full(x, h, out);
    else
      k::reference::convolve_full(x, h, out);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Args({125, 192, 257})->Args({125, 1542, 128})->Args({256, 256, 256});
BENCHMARK(BM_gemm<true>)->Args({125, 192, 257})->Args({125, 1542, 128})->Args({256, 256, 256});
BENCHMARK(BM_xcorr<false>)->Args({16000, 256});
BENCHMARK(BM_xcorr<true>)->Args({16000, 256});
BENCHMARK(BM_convolve<false>)->Args({16000, 256})->Args({16000, 2400});
BENCHMARK(BM_convolve<true>)->Args({16000, 256})->Args({16000, 2400});

BENCHMARK_MAIN();
