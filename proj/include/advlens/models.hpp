#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "advlens/tensor.hpp"

namespace advlens {

/// Any differentiable map from an image batch [B, C, H, W] to logits [B, K].
using Classifier = std::function<Tensor(const Tensor&)>;

namespace models {

enum class Family { vit, cnn, hybrid, t2t_vit };

std::string to_string(Family family);
Family family_from_string(const std::string& name);

struct ConvLayerSpec {
    std::size_t channels = 16;
    std::size_t kernel = 3;
    std::size_t stride = 1;
};

struct SoftSplitSpec {
    std::size_t kernel = 3;
    std::size_t stride = 2;
    std::size_t padding = 1;
};

struct ModelConfig {
    Family family = Family::vit;
    std::size_t image_height = 32;
    std::size_t image_width = 32;
    std::size_t channels = 3;
    std::size_t patch = 4;
    std::size_t layers = 2;
    std::size_t hidden = 64;
    std::size_t heads = 4;
    double mlp_ratio = 2.0;
    std::size_t classes = 10;
    // cnn: stem conv followed by one residual block per stage width; every
    // stage after the first halves the resolution.
    // hybrid: the conv stem whose feature map is patched into tokens.
    std::vector<ConvLayerSpec> conv_stem{{16, 3, 1}};
    std::vector<std::size_t> stage_widths{16, 32};
    // t2t_vit: soft-split stages; each is followed by one attention layer.
    std::vector<SoftSplitSpec> t2t_splits{{3, 2, 1}, {3, 2, 1}};
    std::size_t t2t_hidden = 32;
    std::size_t t2t_heads = 1;
    // Per-channel input normalization applied inside the model.
    std::vector<double> input_mean{0.5, 0.5, 0.5};
    std::vector<double> input_std{0.25, 0.25, 0.25};

    std::size_t mlp_hidden() const;
    // Number of patch tokens (excluding CLS) for vit/hybrid/t2t_vit.
    std::size_t token_count() const;
    // Spatial extent of the token grid.
    std::pair<std::size_t, std::size_t> token_grid() const;

    // Throws std::invalid_argument on inconsistent geometry.
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

struct ParameterSpec {
    std::string name;
    Shape shape;
};

/// Named, ordered weights of one network.
class ParameterSet {
public:
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    void insert(const std::string& name, Tensor value);
    std::size_t size() const { return params_.size(); }
    std::size_t numel() const;
    std::vector<std::string> names() const;

    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }

    // Deep copy; requires_grad on every copied leaf as given.
    ParameterSet clone(bool requires_grad = false) const;
    void set_requires_grad(bool value);
    void zero_grad();

    bool operator==(const ParameterSet& other) const;

private:
    std::map<std::string, Tensor> params_;
};

/// Expected parameter names and shapes for a configuration.
std::vector<ParameterSpec> manifest(const ModelConfig& cfg);

/// Throws unless params matches manifest(cfg) exactly.
void check_manifest(const ModelConfig& cfg, const ParameterSet& params);

/// Deterministic initialization: attention/MLP/head weights from a normal
/// with std 0.02 truncated at two sigma, conv weights He-scaled normal, norm
/// gains 1 and offsets 0, CLS and positional embeddings normal with std 0.02.
ParameterSet init_parameters(const ModelConfig& cfg, std::uint64_t seed);

// Building blocks. `prefix` selects the parameter group, e.g. "blocks.0".
Tensor patch_embed(const Tensor& x, const ParameterSet& params, const std::string& prefix, std::size_t patch);
Tensor multi_head_self_attention(const Tensor& tokens, const ParameterSet& params, const std::string& prefix,
                                 std::size_t heads);
Tensor transformer_block(const Tensor& tokens, const ParameterSet& params, const std::string& prefix, std::size_t heads);
Tensor t2t_soft_split(const Tensor& map, std::size_t kernel, std::size_t stride, std::size_t padding);

Tensor normalize_input(const Tensor& x, const ModelConfig& cfg);

Tensor vit_forward(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg);
Tensor cnn_forward(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg);
Tensor hybrid_forward(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg);
Tensor t2t_vit_forward(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg);
Tensor forward(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg);

/// First-block activations as channel maps [B, channels, h, w]: the first
/// residual stage for cnn, the first transformer block's patch tokens
/// (CLS dropped) on the token grid for the transformer families.
Tensor first_block_features(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg);

/// A configuration paired with its weights.
struct Network {
    ModelConfig config;
    ParameterSet params;

    Tensor operator()(const Tensor& x) const { return forward(x, params, config); }
    // Copy whose parameters never record gradients; safe to share across
    // threads during attacks and evaluation.
    Network frozen() const { return Network{config, params.clone(false)}; }
    Classifier classifier() const;
};

}  // namespace models
}  // namespace advlens
