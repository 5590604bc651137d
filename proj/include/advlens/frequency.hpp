#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "advlens/tensor.hpp"

namespace advlens::frequency {

enum class MaskMode { full, low, high, custom };

std::string to_string(MaskMode mode);
MaskMode mask_mode_from_string(const std::string& name);

/// Binary selection over the DCT coefficient grid; (0, 0) is the DC term.
struct FrequencyMask {
    std::size_t height = 0;
    std::size_t width = 0;
    MaskMode mode = MaskMode::full;
    std::size_t corner = 0;  // f for low, f' for high
    std::vector<std::uint8_t> bits;

    bool at(std::size_t u, std::size_t v) const { return bits[u * width + v] != 0; }
    std::size_t count() const;
};

/// Orthonormal DCT-II matrix: C[k][i] = a_k cos(pi (2i+1) k / 2n).
std::vector<double> dct_matrix(std::size_t n);

/// 2-D transforms over the last two axes; leading axes are independent planes.
Tensor dct2d(const Tensor& x);
Tensor idct2d(const Tensor& coeffs);

/// Corner size scaled from 32 (low) or 192 (high) of a 224-pixel side.
std::size_t default_corner(std::size_t height, std::size_t width, MaskMode mode);

/// low: f×f ones in the top-left corner. high: f×f ones in the bottom-right.
/// Throws std::invalid_argument when f > min(H, W).
FrequencyMask make_mask(std::size_t height, std::size_t width, MaskMode mode, std::size_t f);
FrequencyMask make_mask(std::size_t height, std::size_t width, MaskMode mode);
FrequencyMask custom_mask(std::size_t height, std::size_t width, std::vector<std::uint8_t> bits);

FrequencyMask mask_union(const FrequencyMask& a, const FrequencyMask& b);
bool disjoint(const FrequencyMask& a, const FrequencyMask& b);

/// IDCT(DCT(delta) ⊙ M) plane by plane.
Tensor filter(const Tensor& delta, const FrequencyMask& mask);

/// Mask as an 8-bit image, 255 where a coefficient is kept.
void write_mask_pgm(const std::string& path, const FrequencyMask& mask);

}  // namespace advlens::frequency
