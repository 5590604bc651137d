#include "advlens/frequency.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "advlens/pgm.hpp"

namespace advlens::frequency {

namespace {

void require_planes(const Tensor& x, const char* op) {
    if (x.rank() < 2 || x.size(-1) == 0 || x.size(-2) == 0) {
        throw std::invalid_argument(std::string(op) + ": need at least a non-empty H×W plane, got " + shape_str(x.shape()));
    }
}

// out = A · X · Bᵀ for each H×W plane, with A [H×H] and B [W×W] given
// row-major and optionally transposed.
Tensor separable(const Tensor& x, const std::vector<double>& a, bool trans_a, const std::vector<double>& b, bool trans_b) {
    const std::size_t h = x.size(-2), w = x.size(-1);
    const std::size_t planes = x.numel() / (h * w);
    const auto src = x.data();
    std::vector<double> out(x.numel(), 0.0), tmp(h * w);
    const auto A = [&](std::size_t i, std::size_t j) { return trans_a ? a[j * h + i] : a[i * h + j]; };
    const auto B = [&](std::size_t i, std::size_t j) { return trans_b ? b[j * w + i] : b[i * w + j]; };
    for (std::size_t p = 0; p < planes; ++p) {
        const double* in = src.data() + p * h * w;
        double* dst = out.data() + p * h * w;
        // tmp = X · Bᵀ along rows.
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t k = 0; k < w; ++k) {
                double s = 0.0;
                for (std::size_t c = 0; c < w; ++c) s += in[r * w + c] * B(k, c);
                tmp[r * w + k] = s;
            }
        for (std::size_t k = 0; k < h; ++k)
            for (std::size_t c = 0; c < w; ++c) {
                double s = 0.0;
                for (std::size_t r = 0; r < h; ++r) s += A(k, r) * tmp[r * w + c];
                dst[k * w + c] = s;
            }
    }
    return Tensor(x.shape(), std::move(out));
}

}  // namespace

std::string to_string(MaskMode mode) {
    switch (mode) {
        case MaskMode::full:
            return "full";
        case MaskMode::low:
            return "low";
        case MaskMode::high:
            return "high";
        case MaskMode::custom:
            return "custom";
    }
    return "unknown";
}

MaskMode mask_mode_from_string(const std::string& name) {
    if (name == "full") return MaskMode::full;
    if (name == "low") return MaskMode::low;
    if (name == "high") return MaskMode::high;
    if (name == "custom") return MaskMode::custom;
    throw std::invalid_argument("unknown filter mode '" + name + "'");
}

std::size_t FrequencyMask::count() const {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

std::vector<double> dct_matrix(std::size_t n) {
    std::vector<double> c(n * n);
    const double a0 = std::sqrt(1.0 / static_cast<double>(n));
    const double ak = std::sqrt(2.0 / static_cast<double>(n));
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < n; ++i) {
            const double angle = std::numbers::pi * static_cast<double>((2 * i + 1) * k) / static_cast<double>(2 * n);
            c[k * n + i] = (k == 0 ? a0 : ak) * std::cos(angle);
        }
    return c;
}

Tensor dct2d(const Tensor& x) {
    require_planes(x, "dct2d");
    return separable(x, dct_matrix(x.size(-2)), false, dct_matrix(x.size(-1)), false);
}

Tensor idct2d(const Tensor& coeffs) {
    require_planes(coeffs, "idct2d");
    return separable(coeffs, dct_matrix(coeffs.size(-2)), true, dct_matrix(coeffs.size(-1)), true);
}

std::size_t default_corner(std::size_t height, std::size_t width, MaskMode mode) {
    const double side = static_cast<double>(std::min(height, width));
    switch (mode) {
        case MaskMode::low:
            return static_cast<std::size_t>(std::lround(32.0 / 224.0 * side));
        case MaskMode::high:
            return static_cast<std::size_t>(std::lround(192.0 / 224.0 * side));
        default:
            return 0;
    }
}

FrequencyMask make_mask(std::size_t height, std::size_t width, MaskMode mode, std::size_t f) {
    if (mode == MaskMode::custom) throw std::invalid_argument("make_mask: use custom_mask for custom grids");
    if (f > std::min(height, width)) {
        throw std::invalid_argument("make_mask: corner " + std::to_string(f) + " exceeds " + std::to_string(height) + "x" +
                                    std::to_string(width));
    }
    FrequencyMask m{height, width, mode, f, std::vector<std::uint8_t>(height * width, 0)};
    switch (mode) {
        case MaskMode::full:
            std::fill(m.bits.begin(), m.bits.end(), 1);
            m.corner = 0;
            break;
        case MaskMode::low:
            for (std::size_t u = 0; u < f; ++u)
                for (std::size_t v = 0; v < f; ++v) m.bits[u * width + v] = 1;
            break;
        case MaskMode::high:
            for (std::size_t u = height - f; u < height; ++u)
                for (std::size_t v = width - f; v < width; ++v) m.bits[u * width + v] = 1;
            break;
        case MaskMode::custom:
            break;
    }
    return m;
}

FrequencyMask make_mask(std::size_t height, std::size_t width, MaskMode mode) {
    return make_mask(height, width, mode, default_corner(height, width, mode));
}

FrequencyMask custom_mask(std::size_t height, std::size_t width, std::vector<std::uint8_t> bits) {
    if (bits.size() != height * width) throw std::invalid_argument("custom_mask: expected H·W entries");
    for (auto& b : bits) b = b != 0;
    return FrequencyMask{height, width, MaskMode::custom, 0, std::move(bits)};
}

FrequencyMask mask_union(const FrequencyMask& a, const FrequencyMask& b) {
    if (a.height != b.height || a.width != b.width) throw std::invalid_argument("mask_union: extent mismatch");
    std::vector<std::uint8_t> bits(a.bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = a.bits[i] | b.bits[i];
    return custom_mask(a.height, a.width, std::move(bits));
}

bool disjoint(const FrequencyMask& a, const FrequencyMask& b) {
    if (a.height != b.height || a.width != b.width) throw std::invalid_argument("disjoint: extent mismatch");
    for (std::size_t i = 0; i < a.bits.size(); ++i)
        if (a.bits[i] && b.bits[i]) return false;
    return true;
}

Tensor filter(const Tensor& delta, const FrequencyMask& mask) {
    require_planes(delta, "filter");
    if (delta.size(-2) != mask.height || delta.size(-1) != mask.width) {
        throw std::invalid_argument("filter: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                                    " does not match perturbation " + shape_str(delta.shape()));
    }
    if (mask.mode == MaskMode::full) return delta.detach();
    const Tensor transformed = dct2d(delta);
    std::vector<double> coeffs(transformed.data().begin(), transformed.data().end());
    const std::size_t plane = mask.height * mask.width;
    for (std::size_t i = 0; i < coeffs.size(); ++i)
        if (!mask.bits[i % plane]) coeffs[i] = 0.0;
    return idct2d(Tensor(delta.shape(), std::move(coeffs)));
}

void write_mask_pgm(const std::string& path, const FrequencyMask& mask) {
    GrayImage image{mask.width, mask.height, std::vector<std::uint8_t>(mask.bits.size())};
    for (std::size_t i = 0; i < mask.bits.size(); ++i) image.pixels[i] = mask.bits[i] ? 255 : 0;
    write_pgm(path, image);
}

}  // namespace advlens::frequency
