#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <vector>

#include "advlens/frequency.hpp"
#include "advlens/pgm.hpp"
#include "advlens/rng.hpp"
#include "doctest.h"

using namespace advlens;
using namespace advlens::frequency;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

// Direct cosine summation, independent of the matrix form.
std::vector<double> brute_dct(const std::vector<double>& x, std::size_t h, std::size_t w) {
    std::vector<double> out(h * w);
    for (std::size_t u = 0; u < h; ++u)
        for (std::size_t v = 0; v < w; ++v) {
            const double au = u == 0 ? std::sqrt(1.0 / h) : std::sqrt(2.0 / h);
            const double av = v == 0 ? std::sqrt(1.0 / w) : std::sqrt(2.0 / w);
            double s = 0.0;
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    s += x[i * w + j] * std::cos(std::numbers::pi * (2.0 * i + 1) * u / (2.0 * h)) *
                         std::cos(std::numbers::pi * (2.0 * j + 1) * v / (2.0 * w));
            out[u * w + v] = au * av * s;
        }
    return out;
}

double norm2(std::span<const double> v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("dct examples") {
    const Tensor c = Tensor::full({4, 6}, 0.3);
    const Tensor coeffs = dct2d(c);
    CHECK(coeffs[0] == doctest::Approx(0.3 * std::sqrt(24.0)).epsilon(1e-14));
    for (std::size_t i = 1; i < coeffs.numel(); ++i) CHECK(std::fabs(coeffs[i]) < 1e-14);

    const Tensor one = dct2d(Tensor({1, 2}, {1, 0}));
    CHECK(one[0] == doctest::Approx(0.70711).epsilon(1e-5));
    CHECK(one[1] == doctest::Approx(0.70711).epsilon(1e-5));

    std::vector<double> dc(24, 0.0);
    dc[0] = 0.3 * std::sqrt(24.0);
    const Tensor back = idct2d(Tensor({4, 6}, dc));
    for (double v : back.data()) CHECK(std::fabs(v - 0.3) < 1e-14);
    const Tensor zero = idct2d(Tensor::zeros({3, 3}));
    for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("dct round trip, Parseval and brute-force oracle") {
    for (std::size_t h : {1u, 2u, 5u, 8u, 16u}) {
        for (std::size_t w : {1u, 3u, 16u}) {
            const Tensor x = random_tensor({2, h, w}, h * 100 + w);
            const Tensor X = dct2d(x);
            CHECK(std::fabs(norm2(X.data()) - norm2(x.data())) < 1e-10);
            const Tensor xr = idct2d(X);
            const Tensor Xr = dct2d(idct2d(x));
            for (std::size_t i = 0; i < x.numel(); ++i) {
                CHECK(std::fabs(xr[i] - x[i]) < 1e-10);
                CHECK(std::fabs(Xr[i] - x[i]) < 1e-10);
            }
            for (std::size_t p = 0; p < 2; ++p) {
                std::vector<double> plane(x.data().begin() + p * h * w, x.data().begin() + (p + 1) * h * w);
                const auto want = brute_dct(plane, h, w);
                for (std::size_t i = 0; i < h * w; ++i) CHECK(std::fabs(X[p * h * w + i] - want[i]) < 1e-8);
            }
        }
    }
}

TEST_CASE("masks") {
    const auto low = make_mask(224, 224, MaskMode::low, 32);
    CHECK(low.count() == 1024);
    CHECK(low.at(0, 0));
    CHECK(low.at(31, 31));
    CHECK_FALSE(low.at(32, 0));
    const auto high = make_mask(224, 224, MaskMode::high, 192);
    CHECK(high.count() == 36864);
    CHECK(high.at(223, 223));
    CHECK(high.at(32, 32));
    CHECK_FALSE(high.at(31, 223));
    CHECK(disjoint(low, high));
    CHECK(make_mask(7, 9, MaskMode::full).count() == 63);
    CHECK_THROWS_AS(make_mask(8, 8, MaskMode::low, 9), std::invalid_argument);

    CHECK(default_corner(224, 224, MaskMode::low) == 32);
    CHECK(default_corner(224, 224, MaskMode::high) == 192);
    CHECK(default_corner(32, 32, MaskMode::low) == 5);
    CHECK(default_corner(32, 32, MaskMode::high) == 27);
    CHECK(disjoint(make_mask(32, 32, MaskMode::low), make_mask(32, 32, MaskMode::high)));
    CHECK(mask_mode_from_string("high") == MaskMode::high);
}

TEST_CASE("filtering") {
    const Tensor delta = random_tensor({3, 16, 16}, 5);
    const Tensor same = filter(delta, make_mask(16, 16, MaskMode::full));
    for (std::size_t i = 0; i < delta.numel(); ++i) CHECK(std::fabs(same[i] - delta[i]) < 1e-9);
    const Tensor none = filter(delta, make_mask(16, 16, MaskMode::low, 0));
    for (double v : none.data()) CHECK(std::fabs(v) < 1e-12);

    // low, high and the excluded band partition the grid.
    const auto low = make_mask(16, 16, MaskMode::low);
    const auto high = make_mask(16, 16, MaskMode::high);
    std::vector<std::uint8_t> mid(256);
    for (std::size_t i = 0; i < 256; ++i) mid[i] = !(low.bits[i] || high.bits[i]);
    const auto band = custom_mask(16, 16, mid);
    const Tensor a = filter(delta, low), b = filter(delta, high), c = filter(delta, band);
    for (std::size_t i = 0; i < delta.numel(); ++i) CHECK(std::fabs(a[i] + b[i] + c[i] - delta[i]) < 1e-9);
    const Tensor ab = filter(delta, mask_union(low, high));
    for (std::size_t i = 0; i < delta.numel(); ++i) CHECK(std::fabs(a[i] + b[i] - ab[i]) < 1e-10);

    CHECK_THROWS_AS(filter(delta, make_mask(8, 8, MaskMode::full)), std::invalid_argument);
}

TEST_CASE("mask pgm export") {
    const auto path = (std::filesystem::temp_directory_path() / "advlens_mask_test.pgm").string();
    write_mask_pgm(path, make_mask(6, 4, MaskMode::low, 2));
    const GrayImage img = read_pgm(path);
    CHECK(img.width == 4);
    CHECK(img.height == 6);
    CHECK(img.pixels[0] == 255);
    CHECK(img.pixels[5] == 255);
    CHECK(img.pixels[2] == 0);
    std::remove(path.c_str());

    const std::vector<double> flat(12, 3.5);
    for (auto p : normalize_to_gray(flat.data(), 3, 4).pixels) CHECK(p == 128);
    const std::vector<double> ramp{-1, 0, 1};
    const auto g = normalize_to_gray(ramp.data(), 1, 3).pixels;
    CHECK(g == std::vector<std::uint8_t>{0, 128, 255});
}
