#include "advlens/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include <openssl/evp.h>

#include "advlens/rng.hpp"

namespace advlens::data {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kProtoKey = 0xB10BULL;
constexpr std::uint64_t kSampleKey = 0x5A3DULL;

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

std::vector<std::uint8_t> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset file " + path, 0);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::vector<std::uint8_t> prefix(const std::string& path, std::size_t n) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset file " + path, 0);
    std::vector<std::uint8_t> out(n);
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n));
    out.resize(static_cast<std::size_t>(in.gcount()));
    return out;
}

std::uint64_t file_size(const std::string& path) {
    std::error_code ec;
    const auto size = fs::file_size(path, ec);
    if (ec) throw DataError("cannot stat dataset file " + path, 0);
    return size;
}

std::uint64_t split_key(const std::string& split) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : split) h = (h ^ c) * 1099511628211ULL;
    return h;
}

void finish(Dataset& d) {
    const auto px = d.images.data();
    std::string bytes(reinterpret_cast<const char*>(px.data()), px.size() * sizeof(double));
    for (int l : d.labels) {
        const auto v = static_cast<std::int32_t>(l);
        bytes.append(reinterpret_cast<const char*>(&v), sizeof v);
    }
    d.checksum = sha256_hex(bytes);
}

}  // namespace

DataError::DataError(const std::string& what, std::uint64_t offset)
    : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::mnist:
            return "mnist";
        case Provenance::cifar10:
            return "cifar10";
        case Provenance::synthetic:
            return "synthetic";
    }
    return "unknown";
}

void Dataset::validate() const {
    if (labels.empty()) throw std::invalid_argument("dataset is empty");
    if (images.rank() != 4 || images.size(0) != labels.size()) {
        throw std::invalid_argument("dataset images " + shape_str(images.shape()) + " do not match " +
                                    std::to_string(labels.size()) + " labels");
    }
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= classes) throw std::invalid_argument("dataset label out of range");
    for (double v : images.data())
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("dataset pixel outside [0,1]");
}

Dataset make_synthetic(const SyntheticSpec& spec, const std::string& split) {
    if (spec.classes < 2 || spec.n < 1 || spec.channels < 1 || spec.height < 1 || spec.width < 1) {
        throw std::invalid_argument("synthetic: need classes >= 2 and positive n, channels, height, width");
    }
    const std::size_t C = spec.channels, H = spec.height, W = spec.width, K = spec.classes;
    const double side = static_cast<double>(std::min(H, W));
    const double s = std::max(spec.blob_sigma * side, 1e-6);

    // Class prototypes depend on the seed only, so splits share them.
    std::vector<double> cy(K), cx(K), colour(K * C), tex_sign(K * H * W);
    for (std::size_t k = 0; k < K; ++k) {
        Rng rng = make_rng(spec.seed, {k, kProtoKey});
        std::uniform_real_distribution<double> pos(0.2, 0.8);
        std::uniform_real_distribution<double> col(-1.0, 1.0);
        cy[k] = pos(rng) * static_cast<double>(H - 1);
        cx[k] = pos(rng) * static_cast<double>(W - 1);
        for (std::size_t c = 0; c < C; ++c) colour[k * C + c] = col(rng);
        // Colours away from zero so every class shows on every channel.
        for (std::size_t c = 0; c < C; ++c) colour[k * C + c] = colour[k * C + c] < 0 ? colour[k * C + c] - 0.5 : colour[k * C + c] + 0.5;
        for (std::size_t p = 0; p < H * W; ++p) tex_sign[k * H * W + p] = (rng() & 1U) ? 1.0 : -1.0;
    }
    if (K == 2) {
        // Opposite checkerboards make the texture cue linearly separable.
        for (std::size_t r = 0; r < H; ++r)
            for (std::size_t c = 0; c < W; ++c) {
                const double v = ((r + c) % 2 == 0) ? 1.0 : -1.0;
                tex_sign[r * W + c] = v;
                tex_sign[H * W + r * W + c] = -v;
            }
    }

    Dataset d;
    d.classes = K;
    d.split = split;
    d.provenance = Provenance::synthetic;
    d.labels.resize(spec.n);
    std::vector<double> px(spec.n * C * H * W);
    const std::uint64_t sk = split_key(split);
    for (std::size_t i = 0; i < spec.n; ++i) {
        const std::size_t k = i % K;
        d.labels[i] = static_cast<int>(k);
        Rng rng = make_rng(spec.seed, {sk, i, kSampleKey});
        std::normal_distribution<double> nd(0.0, 1.0);
        const double oy = cy[k] + spec.jitter * side * nd(rng);
        const double ox = cx[k] + spec.jitter * side * nd(rng);
        double* img = px.data() + i * C * H * W;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t r = 0; r < H; ++r)
                for (std::size_t q = 0; q < W; ++q) {
                    const double dy = static_cast<double>(r) - oy, dx = static_cast<double>(q) - ox;
                    double v = 0.5 + spec.amplitude * colour[k * C + c] * std::exp(-(dy * dy + dx * dx) / (2 * s * s));
                    v += spec.texture * tex_sign[k * H * W + r * W + q];
                    v += spec.noise * nd(rng);
                    img[(c * H + r) * W + q] = std::clamp(v, 0.0, 1.0);
                }
    }
    d.images = Tensor({spec.n, C, H, W}, std::move(px));
    finish(d);
    return d;
}

Dataset parse_mnist_idx(const std::vector<std::uint8_t>& images, const std::vector<std::uint8_t>& labels,
                        const std::string& split) {
    if (images.size() < 16) throw DataError("MNIST images: header truncated", images.size());
    if (be32(images, 0) != 2051) throw DataError("MNIST images: magic " + std::to_string(be32(images, 0)) + " is not 2051", 0);
    if (labels.size() < 8) throw DataError("MNIST labels: header truncated", labels.size());
    if (be32(labels, 0) != 2049) throw DataError("MNIST labels: magic " + std::to_string(be32(labels, 0)) + " is not 2049", 0);
    const std::uint64_t n = be32(images, 4), rows = be32(images, 8), cols = be32(images, 12);
    if (n == 0 || rows == 0 || cols == 0) throw DataError("MNIST images: zero dimension in header", 4);
    if (be32(labels, 4) != n) {
        throw DataError("MNIST labels: count " + std::to_string(be32(labels, 4)) + " does not match " + std::to_string(n) +
                            " images",
                        4);
    }
    const std::uint64_t need = 16 + n * rows * cols;
    if (images.size() != need) {
        throw DataError("MNIST images: expected " + std::to_string(need) + " bytes, file has " + std::to_string(images.size()),
                        std::min<std::uint64_t>(images.size(), need));
    }
    if (labels.size() != 8 + n) {
        throw DataError("MNIST labels: expected " + std::to_string(8 + n) + " bytes, file has " + std::to_string(labels.size()),
                        std::min<std::uint64_t>(labels.size(), 8 + n));
    }
    Dataset d;
    d.classes = 10;
    d.split = split;
    d.provenance = Provenance::mnist;
    d.labels.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        if (labels[8 + i] > 9) throw DataError("MNIST labels: label " + std::to_string(labels[8 + i]) + " out of range", 8 + i);
        d.labels[i] = labels[8 + i];
    }
    std::vector<double> px(n * rows * cols);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = images[16 + i] / 255.0;
    d.images = Tensor({n, 1, rows, cols}, std::move(px));
    finish(d);
    return d;
}

Dataset parse_cifar10_binary(const std::vector<std::uint8_t>& bytes, const std::string& split) {
    constexpr std::size_t rec = 3073;
    if (bytes.empty()) throw DataError("CIFAR-10: empty file", 0);
    if (bytes.size() % rec != 0) {
        throw DataError("CIFAR-10: " + std::to_string(bytes.size()) + " bytes is not a whole number of 3073-byte records",
                        bytes.size() - bytes.size() % rec);
    }
    const std::size_t n = bytes.size() / rec;
    Dataset d;
    d.classes = 10;
    d.split = split;
    d.provenance = Provenance::cifar10;
    d.labels.resize(n);
    std::vector<double> px(n * 3072);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t label = bytes[i * rec];
        if (label > 9) throw DataError("CIFAR-10: label " + std::to_string(label) + " out of range", i * rec);
        d.labels[i] = label;
        for (std::size_t k = 0; k < 3072; ++k) px[i * 3072 + k] = bytes[i * rec + 1 + k] / 255.0;
    }
    d.images = Tensor({n, 3, 32, 32}, std::move(px));
    finish(d);
    return d;
}

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path, const std::string& split) {
    // Headers first: a bad magic or size never triggers a payload read.
    const auto ih = prefix(images_path, 16), lh = prefix(labels_path, 8);
    if (ih.size() < 16) throw DataError("MNIST images: header truncated", ih.size());
    if (be32(ih, 0) != 2051) throw DataError("MNIST images: magic " + std::to_string(be32(ih, 0)) + " is not 2051", 0);
    if (lh.size() < 8) throw DataError("MNIST labels: header truncated", lh.size());
    if (be32(lh, 0) != 2049) throw DataError("MNIST labels: magic " + std::to_string(be32(lh, 0)) + " is not 2049", 0);
    const std::uint64_t n = be32(ih, 4);
    if (be32(lh, 4) != n) throw DataError("MNIST labels: count does not match images", 4);
    const std::uint64_t need = 16 + n * be32(ih, 8) * be32(ih, 12);
    if (const auto size = file_size(images_path); size != need) {
        throw DataError("MNIST images: expected " + std::to_string(need) + " bytes, file has " + std::to_string(size),
                        std::min(size, need));
    }
    if (const auto size = file_size(labels_path); size != 8 + n) {
        throw DataError("MNIST labels: expected " + std::to_string(8 + n) + " bytes, file has " + std::to_string(size),
                        std::min(size, 8 + n));
    }
    return parse_mnist_idx(slurp(images_path), slurp(labels_path), split);
}

Dataset load_cifar10_binary(const std::vector<std::string>& paths, const std::string& split) {
    if (paths.empty()) throw DataError("CIFAR-10: no files given", 0);
    for (const auto& p : paths) {
        const auto size = file_size(p);
        if (size == 0 || size % 3073 != 0) {
            throw DataError("CIFAR-10: " + p + " is not a whole number of 3073-byte records", size - size % 3073);
        }
    }
    std::vector<std::uint8_t> all;
    for (const auto& p : paths) {
        const auto b = slurp(p);
        all.insert(all.end(), b.begin(), b.end());
    }
    return parse_cifar10_binary(all, split);
}

Dataset load_dataset(const nlohmann::json& ref) {
    const std::string source = ref.at("source").get<std::string>();
    const std::string split = ref.value("split", "test");
    Dataset d;
    if (source == "synthetic") {
        SyntheticSpec s;
        s.classes = ref.value("classes", s.classes);
        s.n = ref.value("n", s.n);
        s.channels = ref.value("channels", s.channels);
        s.height = ref.value("height", s.height);
        s.width = ref.value("width", s.width);
        s.seed = ref.value("seed", s.seed);
        s.blob_sigma = ref.value("blob_sigma", s.blob_sigma);
        s.amplitude = ref.value("amplitude", s.amplitude);
        s.jitter = ref.value("jitter", s.jitter);
        s.noise = ref.value("noise", s.noise);
        s.texture = ref.value("texture", s.texture);
        d = make_synthetic(s, split);
    } else if (source == "mnist_idx") {
        std::string images = ref.value("images", ""), labels = ref.value("labels", "");
        if (images.empty()) {
            const fs::path dir = ref.at("path").get<std::string>();
            const std::string stem = split == "train" ? "train" : "t10k";
            images = (dir / (stem + "-images-idx3-ubyte")).string();
            labels = (dir / (stem + "-labels-idx1-ubyte")).string();
        }
        d = load_mnist_idx(images, labels, split);
    } else if (source == "cifar10_binary") {
        std::vector<std::string> files = ref.value("files", std::vector<std::string>{});
        if (files.empty()) {
            const fs::path p = ref.at("path").get<std::string>();
            if (fs::is_directory(p)) {
                if (split == "train") {
                    for (int b = 1; b <= 5; ++b) files.push_back((p / ("data_batch_" + std::to_string(b) + ".bin")).string());
                } else {
                    files.push_back((p / "test_batch.bin").string());
                }
            } else {
                files.push_back(p.string());
            }
        }
        d = load_cifar10_binary(files, split);
    } else {
        throw std::invalid_argument("unknown dataset source '" + source + "'");
    }
    if (const std::size_t limit = ref.value("limit", std::size_t{0}); limit > 0 && limit < d.size()) {
        std::vector<std::size_t> first(limit);
        std::iota(first.begin(), first.end(), 0);
        d = take(d, first);
    }
    return d;
}

std::vector<std::size_t> subset_indices(std::size_t total, std::size_t n, std::uint64_t seed) {
    if (n > total) {
        throw std::invalid_argument("sample count " + std::to_string(n) + " exceeds dataset size " + std::to_string(total));
    }
    std::vector<std::size_t> idx(total);
    std::iota(idx.begin(), idx.end(), 0);
    if (n == 0 || n == total) return idx;
    Rng rng = make_rng(seed, {0x5E1EC7ULL});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    return idx;
}

Dataset take(const Dataset& d, const std::vector<std::size_t>& indices) {
    const std::size_t per = d.images.numel() / d.size();
    const auto src = d.images.data();
    Dataset out;
    out.classes = d.classes;
    out.split = d.split;
    out.provenance = d.provenance;
    std::vector<double> px(indices.size() * per);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per, px.begin() + static_cast<std::ptrdiff_t>(i * per));
        out.labels.push_back(d.labels.at(indices[i]));
    }
    Shape s = d.images.shape();
    s[0] = indices.size();
    out.images = Tensor(s, std::move(px));
    finish(out);
    return out;
}

Dataset subset(const Dataset& d, std::size_t n, std::uint64_t seed) {
    if (n == 0 || n == d.size()) return d;
    return take(d, subset_indices(d.size(), n, seed));
}

std::string sha256_hex(const void* data, std::size_t size) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

std::string sha256_hex(const std::string& bytes) { return sha256_hex(bytes.data(), bytes.size()); }

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_hex(bytes);
}

}  // namespace advlens::data
