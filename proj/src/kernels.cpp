#include "advlens/kernels.hpp"

#include <algorithm>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace advlens::kernels {

namespace {

constexpr std::size_t kParallelWork = 1u << 15;

[[gnu::noinline]] void gemm_rows(const GemmShape& s, const double* __restrict a, const double* __restrict b,
                                 double* __restrict c, bool accumulate, std::size_t row_begin,
                                 std::size_t row_end) {
    const std::size_t m = s.m, n = s.n, k = s.k;
    if (!s.trans_b) {
        for (std::size_t i = row_begin; i < row_end; ++i) {
            double* crow = c + i * n;
            if (!accumulate) std::fill(crow, crow + n, 0.0);
            for (std::size_t p = 0; p < k; ++p) {
                const double av = s.trans_a ? a[p * m + i] : a[i * k + p];
                if (av == 0.0) continue;
                const double* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
        return;
    }
    for (std::size_t i = row_begin; i < row_end; ++i) {
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            if (s.trans_a) {
                for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * brow[p];
            } else {
                const double* arow = a + i * k;
                for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            }
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

[[gnu::noinline]] void im2col_one(const ConvGeometry& g, std::size_t batch, std::size_t b,
                                  const double* __restrict images, double* __restrict cols) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const std::size_t ld = batch * oh * ow;
    const double* img = images + b * g.channels * g.height * g.width;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const std::size_t row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                double* out = cols + row * ld + b * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                    for (std::size_t x = 0; x < ow; ++x) {
                        const auto ix = static_cast<std::ptrdiff_t>(x * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.padding);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                            ix < static_cast<std::ptrdiff_t>(g.width);
                        out[y * ow + x] = inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                                                       static_cast<std::size_t>(ix)]
                                                 : 0.0;
                    }
                }
            }
        }
    }
}

[[gnu::noinline]] void col2im_one(const ConvGeometry& g, std::size_t batch, std::size_t b,
                                  const double* __restrict cols, double* __restrict images) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const std::size_t ld = batch * oh * ow;
    double* img = images + b * g.channels * g.height * g.width;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const std::size_t row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                const double* in = cols + row * ld + b * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const auto ix = static_cast<std::ptrdiff_t>(x * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                        img[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] +=
                            in[y * ow + x];
                    }
                }
            }
        }
    }
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

bool in_parallel() {
#ifdef _OPENMP
    return omp_in_parallel() != 0;
#else
    return false;
#endif
}

void gemm_serial(const GemmShape& s, const double* a, const double* b, double* c, bool accumulate) {
    gemm_rows(s, a, b, c, accumulate, 0, s.m);
}

void gemm_parallel(const GemmShape& s, const double* a, const double* b, double* c, bool accumulate) {
    const auto m = static_cast<std::ptrdiff_t>(s.m);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < m; ++i) {
        gemm_rows(s, a, b, c, accumulate, static_cast<std::size_t>(i), static_cast<std::size_t>(i) + 1);
    }
}

void gemm(const GemmShape& s, const double* a, const double* b, double* c, bool accumulate) {
    if (s.m > 1 && s.m * s.n * s.k >= kParallelWork && max_threads() > 1 && !in_parallel()) {
        gemm_parallel(s, a, b, c, accumulate);
    } else {
        gemm_serial(s, a, b, c, accumulate);
    }
}

void im2col_serial(const ConvGeometry& g, std::size_t batch, const double* images, double* cols) {
    for (std::size_t b = 0; b < batch; ++b) im2col_one(g, batch, b, images, cols);
}

void im2col_parallel(const ConvGeometry& g, std::size_t batch, const double* images, double* cols) {
    const auto n = static_cast<std::ptrdiff_t>(batch);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t b = 0; b < n; ++b) im2col_one(g, batch, static_cast<std::size_t>(b), images, cols);
}

void im2col(const ConvGeometry& g, std::size_t batch, const double* images, double* cols) {
    if (batch > 1 && max_threads() > 1 && !in_parallel()) {
        im2col_parallel(g, batch, images, cols);
    } else {
        im2col_serial(g, batch, images, cols);
    }
}

void col2im_serial(const ConvGeometry& g, std::size_t batch, const double* cols, double* images) {
    for (std::size_t b = 0; b < batch; ++b) col2im_one(g, batch, b, cols, images);
}

void col2im_parallel(const ConvGeometry& g, std::size_t batch, const double* cols, double* images) {
    const auto n = static_cast<std::ptrdiff_t>(batch);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t b = 0; b < n; ++b) col2im_one(g, batch, static_cast<std::size_t>(b), cols, images);
}

void col2im(const ConvGeometry& g, std::size_t batch, const double* cols, double* images) {
    if (batch > 1 && max_threads() > 1 && !in_parallel()) {
        col2im_parallel(g, batch, cols, images);
    } else {
        col2im_serial(g, batch, cols, images);
    }
}

}  // namespace advlens::kernels
