#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace advlens {

struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

/// Binary P5 with maxval 255.
void write_pgm(const std::string& path, const GrayImage& image);
GrayImage read_pgm(const std::string& path);

/// Min-max scaling to 0..255; a constant plane becomes mid-gray (128).
GrayImage normalize_to_gray(const double* values, std::size_t height, std::size_t width);

}  // namespace advlens
