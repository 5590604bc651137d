#include "advlens/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace advlens {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_container(nlohmann::json header, const std::vector<models::ParameterSpec>& specs,
                                              const models::ParameterSet& params) {
    auto tensors = nlohmann::json::array();
    for (const auto& spec : specs) tensors.push_back({{"name", spec.name}, {"shape", spec.shape}});
    header["tensors"] = tensors;
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    const std::string magic = kCheckpointMagic;
    out.insert(out.end(), magic.begin(), magic.end());
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& spec : specs) {
        const Tensor& t = params.at(spec.name);
        if (t.shape() != spec.shape) throw std::invalid_argument("checkpoint: '" + spec.name + "' has the wrong shape");
        const auto data = t.data();
        const auto* bytes = reinterpret_cast<const std::uint8_t*>(data.data());
        out.insert(out.end(), bytes, bytes + data.size() * sizeof(double));
    }
    return out;
}

Container deserialize_container(
    const std::vector<std::uint8_t>& bytes,
    const std::function<std::vector<models::ParameterSpec>(const nlohmann::json&)>& manifest_for) {
    const std::string magic = kCheckpointMagic;
    if (bytes.size() < magic.size() + 8 || std::memcmp(bytes.data(), magic.data(), magic.size()) != 0) {
        throw CheckpointError("checkpoint: missing " + magic + " magic at byte 0");
    }
    std::size_t offset = magic.size();
    const std::uint64_t len = get_u64(bytes.data() + offset);
    offset += 8;
    if (len > bytes.size() - offset) {
        throw CheckpointError("checkpoint: manifest length " + std::to_string(len) + " at byte " + std::to_string(magic.size()) +
                              " overruns file of " + std::to_string(bytes.size()) + " bytes");
    }
    Container c;
    std::vector<models::ParameterSpec> expected;
    try {
        c.header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                         bytes.begin() + static_cast<std::ptrdiff_t>(offset + len));
        expected = manifest_for(c.header);
    } catch (const std::exception& e) {
        throw CheckpointError("checkpoint: bad manifest at byte " + std::to_string(offset) + ": " + e.what());
    }
    offset += len;
    for (const auto& spec : expected) {
        const std::size_t n = shape_numel(spec.shape);
        if (n * sizeof(double) > bytes.size() - offset) {
            throw CheckpointError("checkpoint: tensor '" + spec.name + "' truncated at byte " + std::to_string(offset));
        }
        std::vector<double> values(n);
        std::memcpy(values.data(), bytes.data() + offset, n * sizeof(double));
        offset += n * sizeof(double);
        c.params.insert(spec.name, Tensor(spec.shape, std::move(values)));
    }
    if (offset != bytes.size()) {
        throw CheckpointError("checkpoint: " + std::to_string(bytes.size() - offset) + " trailing bytes at byte " +
                              std::to_string(offset));
    }
    // Stored tensor list must agree with what the header implies.
    const auto& listed = c.header.value("tensors", nlohmann::json::array());
    if (listed.size() != expected.size()) throw CheckpointError("checkpoint: tensor list does not match config");
    for (std::size_t i = 0; i < expected.size(); ++i) {
        if (listed[i].value("name", "") != expected[i].name || listed[i].value("shape", Shape{}) != expected[i].shape) {
            throw CheckpointError("checkpoint: tensor list entry " + std::to_string(i) + " does not match config");
        }
    }
    return c;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    models::check_manifest(ckpt.config, ckpt.params);
    nlohmann::json header;
    header["config"] = ckpt.config;
    header["seed"] = ckpt.seed;
    header["metadata"] = ckpt.metadata;
    return serialize_container(std::move(header), models::manifest(ckpt.config), ckpt.params);
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Checkpoint ckpt;
    Container c = deserialize_container(bytes, [&](const nlohmann::json& h) {
        ckpt.config = h.at("config").get<models::ModelConfig>();
        ckpt.seed = h.at("seed").get<std::uint64_t>();
        ckpt.metadata = h.value("metadata", nlohmann::json::object());
        ckpt.config.validate();
        return models::manifest(ckpt.config);
    });
    ckpt.params = std::move(c.params);
    return ckpt;
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path);
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_bytes(path, serialize_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_bytes(path)); }

}  // namespace advlens
