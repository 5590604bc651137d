#include "advlens/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace advlens {

void write_pgm(const std::string& path, const GrayImage& image) {
    if (image.pixels.size() != image.width * image.height) throw std::invalid_argument("write_pgm: pixel count mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
    out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

GrayImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
    std::string magic;
    std::size_t maxval = 0;
    GrayImage image;
    in >> magic >> image.width >> image.height >> maxval;
    if (magic != "P5" || maxval != 255 || !in) throw std::runtime_error("read_pgm: unsupported header in " + path);
    in.get();
    image.pixels.resize(image.width * image.height);
    in.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(image.pixels.size())) throw std::runtime_error("read_pgm: truncated " + path);
    return image;
}

GrayImage normalize_to_gray(const double* values, std::size_t height, std::size_t width) {
    GrayImage image{width, height, std::vector<std::uint8_t>(width * height, 128)};
    const std::size_t n = width * height;
    if (n == 0) return image;
    const auto [lo, hi] = std::minmax_element(values, values + n);
    if (!(*hi > *lo)) return image;
    const double scale = 255.0 / (*hi - *lo);
    for (std::size_t i = 0; i < n; ++i) {
        image.pixels[i] = static_cast<std::uint8_t>(std::lround((values[i] - *lo) * scale));
    }
    return image;
}

}  // namespace advlens
