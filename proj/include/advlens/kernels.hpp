#pragma once

// Dense numeric kernels behind the tensor ops. Each kernel has a serial
// reference and an OpenMP variant; both call the same per-row routine so the
// parallel result is bit-identical to the serial one for any thread count.

#include <cstddef>

namespace advlens::kernels {

struct GemmShape {
    std::size_t m, n, k;
    bool trans_a = false;  // A stored k×m
    bool trans_b = false;  // B stored n×k
};

// C[m×n] (+)= op(A)·op(B), all row-major.
void gemm_serial(const GemmShape& s, const double* a, const double* b, double* c, bool accumulate);
void gemm_parallel(const GemmShape& s, const double* a, const double* b, double* c, bool accumulate);
// Picks the parallel variant when the problem is large enough and no
// enclosing parallel region is active.
void gemm(const GemmShape& s, const double* a, const double* b, double* c, bool accumulate);

struct ConvGeometry {
    std::size_t channels, height, width;
    std::size_t kernel_h, kernel_w;
    std::size_t stride, padding;

    std::size_t out_h() const { return (height + 2 * padding - kernel_h) / stride + 1; }
    std::size_t out_w() const { return (width + 2 * padding - kernel_w) / stride + 1; }
    std::size_t patch_len() const { return channels * kernel_h * kernel_w; }
};

// Unfolds `batch` images [batch, C, H, W] into cols [C·kh·kw, batch·Ho·Wo].
void im2col_serial(const ConvGeometry& g, std::size_t batch, const double* images, double* cols);
void im2col_parallel(const ConvGeometry& g, std::size_t batch, const double* images, double* cols);
void im2col(const ConvGeometry& g, std::size_t batch, const double* images, double* cols);

// Adjoint of im2col: accumulates cols back into images.
void col2im_serial(const ConvGeometry& g, std::size_t batch, const double* cols, double* images);
void col2im_parallel(const ConvGeometry& g, std::size_t batch, const double* cols, double* images);
void col2im(const ConvGeometry& g, std::size_t batch, const double* cols, double* images);

int max_threads();
bool in_parallel();

}  // namespace advlens::kernels
