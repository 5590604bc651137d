#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "advlens/models.hpp"

namespace advlens {

inline constexpr const char* kCheckpointMagic = "ADVLENS-CKPT-1";

/// Malformed or unreadable checkpoint bytes.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    models::ModelConfig config;
    models::ParameterSet params;
    std::uint64_t seed = 0;
    // Free-form op choices (training method, epsilon, ...).
    nlohmann::json metadata = nlohmann::json::object();
};

/// Layout: magic, uint64 LE manifest length, JSON manifest, then each
/// parameter as raw LE float64 in manifest order.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

/// The container underneath: any JSON header plus the tensors it implies.
/// `tensors` is added to the header on write. manifest_for derives the
/// expected tensor list from a parsed header and may throw to reject it.
std::vector<std::uint8_t> serialize_container(nlohmann::json header, const std::vector<models::ParameterSpec>& specs,
                                              const models::ParameterSet& params);
struct Container {
    nlohmann::json header;
    models::ParameterSet params;
};
Container deserialize_container(
    const std::vector<std::uint8_t>& bytes,
    const std::function<std::vector<models::ParameterSpec>(const nlohmann::json&)>& manifest_for);

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);
/// CheckpointError when unreadable.
std::vector<std::uint8_t> read_bytes(const std::string& path);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace advlens
