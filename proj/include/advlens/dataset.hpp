#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "advlens/tensor.hpp"

namespace advlens::data {

/// Malformed dataset bytes; offset is where the problem was found.
class DataError : public std::runtime_error {
public:
    DataError(const std::string& what, std::uint64_t offset);
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

enum class Provenance { mnist, cifar10, synthetic };
std::string to_string(Provenance p);

struct Dataset {
    Tensor images;  // N×C×H×W in [0,1]
    std::vector<int> labels;
    std::size_t classes = 10;
    std::string split = "test";
    Provenance provenance = Provenance::synthetic;
    std::string checksum;  // sha256 of the canonical pixel and label bytes

    std::size_t size() const { return labels.size(); }
    void validate() const;  // std::invalid_argument
};

/// Gaussian-blob classes: each class owns a blob centre and a per-channel
/// colour drawn from `seed`; examples add centre jitter and pixel noise drawn
/// from (seed, split, index). `texture` adds a class-keyed ±1 checkerboard of
/// that amplitude, a cue that is predictive but tiny in ℓ∞.
struct SyntheticSpec {
    std::size_t classes = 10;
    std::size_t n = 1000;
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::uint64_t seed = 0;
    double blob_sigma = 0.15;  // fraction of min(H, W)
    double amplitude = 0.35;
    double jitter = 0.05;  // centre jitter, fraction of min(H, W)
    double noise = 0.1;
    double texture = 0.0;
};

Dataset make_synthetic(const SyntheticSpec& spec, const std::string& split = "train");

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path, const std::string& split = "test");
Dataset load_cifar10_binary(const std::vector<std::string>& paths, const std::string& split = "test");

/// Parses MNIST / CIFAR bytes already in memory (the loaders' core).
Dataset parse_mnist_idx(const std::vector<std::uint8_t>& images, const std::vector<std::uint8_t>& labels,
                        const std::string& split = "test");
Dataset parse_cifar10_binary(const std::vector<std::uint8_t>& bytes, const std::string& split = "test");

/// JSON dataset reference:
///   {"source": "synthetic", "split": "train", "classes": 10, "n": 1000, ...}
///   {"source": "mnist_idx", "path": dir} or {"images": f, "labels": f}
///   {"source": "cifar10_binary", "path": dir or file} or {"files": [...]}
/// A directory resolves to the standard file names for the split.
Dataset load_dataset(const nlohmann::json& ref);

/// n examples chosen by a seeded shuffle, kept in ascending index order.
/// n == 0 means all. std::invalid_argument when n exceeds the dataset.
Dataset subset(const Dataset& d, std::size_t n, std::uint64_t seed);
std::vector<std::size_t> subset_indices(std::size_t total, std::size_t n, std::uint64_t seed);
Dataset take(const Dataset& d, const std::vector<std::size_t>& indices);

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

}  // namespace advlens::data
