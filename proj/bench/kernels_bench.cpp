#include <benchmark/benchmark.h>

#include <random>

#include "seqimpute/kernels.hpp"

using namespace seqimpute;

namespace {

Tensor filled(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(r, c);
  for (auto& v : t.vec()) v = u(eng);
  return t;
}

// Shapes typical of a training step: (batch x in) * (in x out).
template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = filled(64, n, 1), b = filled(n, n, 2);
  Tensor c(64, n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::gemm(a, kernels::Trans::no, b, kernels::Trans::no, c);
    } else {
      kernels::reference::gemm(a, kernels::Trans::no, b, kernels::Trans::no, c);
    }
    benchmark::DoNotOptimize(c.vec().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(64 * n * n));
}

// Weight-gradient shape: a^T * b.
template <bool Parallel>
void BM_GemmTransA(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = filled(64, n, 3), b = filled(64, n, 4);
  Tensor c(n, n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::gemm(a, kernels::Trans::yes, b, kernels::Trans::no, c);
    } else {
      kernels::reference::gemm(a, kernels::Trans::yes, b, kernels::Trans::no, c);
    }
    benchmark::DoNotOptimize(c.vec().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(64 * n * n));
}

template <bool Parallel, bool Sigmoid>
void BM_Elementwise(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor x = filled(1, n, 5);
  Tensor y(1, n);
  for (auto _ : state) {
    if constexpr (Parallel && Sigmoid) kernels::sigmoid(x.vec().data(), y.vec().data(), n);
    if constexpr (Parallel && !Sigmoid) kernels::tanh(x.vec().data(), y.vec().data(), n);
    if constexpr (!Parallel && Sigmoid) kernels::reference::sigmoid(x.vec().data(), y.vec().data(), n);
    if constexpr (!Parallel && !Sigmoid) kernels::reference::tanh(x.vec().data(), y.vec().data(), n);
    benchmark::DoNotOptimize(y.vec().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(256)->Arg(784);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(256)->Arg(784);
BENCHMARK(BM_GemmTransA<false>)->Name("gemm_at/reference")->Arg(64)->Arg(256);
BENCHMARK(BM_GemmTransA<true>)->Name("gemm_at/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_Elementwise<false, true>)->Name("sigmoid/reference")->Arg(1 << 12)->Arg(1 << 18);
BENCHMARK(BM_Elementwise<true, true>)->Name("sigmoid/parallel")->Arg(1 << 12)->Arg(1 << 18);
BENCHMARK(BM_Elementwise<false, false>)->Name("tanh/reference")->Arg(1 << 12)->Arg(1 << 18);
BENCHMARK(BM_Elementwise<true, false>)->Name("tanh/parallel")->Arg(1 << 12)->Arg(1 << 18);

BENCHMARK_MAIN();
