// Serial reference vs OpenMP kernels. Run with OMP_NUM_THREADS set to the
// thread count of interest; results are bit-identical either way.
#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "advlens/kernels.hpp"
#include "advlens/models.hpp"
#include "advlens/ops.hpp"

using namespace advlens;

namespace {

std::vector<double> random_vec(std::size_t n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const kernels::GemmShape s{n, n, n};
    const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::gemm_parallel(s, a.data(), b.data(), c.data(), false);
        } else {
            kernels::gemm_serial(s, a.data(), b.data(), c.data(), false);
        }
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <bool Parallel>
void BM_im2col(benchmark::State& state) {
    const auto batch = static_cast<std::size_t>(state.range(0));
    const kernels::ConvGeometry g{16, 32, 32, 3, 3, 1, 1};
    const auto images = random_vec(batch * 16 * 32 * 32, 3);
    std::vector<double> cols(g.patch_len() * batch * g.out_h() * g.out_w());
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::im2col_parallel(g, batch, images.data(), cols.data());
        } else {
            kernels::im2col_serial(g, batch, images.data(), cols.data());
        }
        benchmark::DoNotOptimize(cols.data());
    }
}

// conv2d forward as the library runs it: dispatching kernels choose the
// OpenMP path when more than one thread is available.
void BM_conv2d(benchmark::State& state) {
    const auto batch = static_cast<std::size_t>(state.range(0));
    const Tensor x({batch, 16, 32, 32}, random_vec(batch * 16 * 32 * 32, 4));
    const Tensor k({32, 16, 3, 3}, random_vec(32 * 16 * 9, 5));
    for (auto _ : state) {
        NoGradScope no_grad;
        benchmark::DoNotOptimize(conv2d(x, k, 1, 1).data().data());
    }
    state.counters["threads"] = kernels::max_threads();
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_gemm<true>)->Name("gemm/openmp")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_im2col<false>)->Name("im2col/serial")->Arg(8)->Arg(32);
BENCHMARK(BM_im2col<true>)->Name("im2col/openmp")->Arg(8)->Arg(32);
BENCHMARK(BM_conv2d)->Name("conv2d/dispatch")->Arg(8)->Arg(32);

BENCHMARK_MAIN();
