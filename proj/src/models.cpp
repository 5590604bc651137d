#include "advlens/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "advlens/ops.hpp"
#include "advlens/rng.hpp"

namespace advlens::models {

namespace {

[[noreturn]] void config_error(const std::string& what) { throw std::invalid_argument("ModelConfig: " + what); }

std::size_t conv_out(std::size_t extent, std::size_t kernel, std::size_t stride, std::size_t padding) {
    return (extent + 2 * padding - kernel) / stride + 1;
}

std::uint64_t name_hash(const std::string& name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct StemGeometry {
    std::size_t channels, height, width;
};

StemGeometry stem_geometry(const ModelConfig& cfg) {
    StemGeometry g{cfg.channels, cfg.image_height, cfg.image_width};
    for (const auto& layer : cfg.conv_stem) {
        if (layer.kernel == 0 || layer.stride == 0 || layer.channels == 0) config_error("conv stem layers need positive sizes");
        const std::size_t pad = layer.kernel / 2;
        if (g.height + 2 * pad < layer.kernel || g.width + 2 * pad < layer.kernel) config_error("conv stem kernel exceeds map");
        g = {layer.channels, conv_out(g.height, layer.kernel, layer.stride, pad), conv_out(g.width, layer.kernel, layer.stride, pad)};
    }
    return g;
}

void add_linear(std::vector<ParameterSpec>& out, const std::string& prefix, std::size_t in, std::size_t outd) {
    out.push_back({prefix + ".weight", {in, outd}});
    out.push_back({prefix + ".bias", {outd}});
}

void add_conv(std::vector<ParameterSpec>& out, const std::string& prefix, std::size_t in, std::size_t outc, std::size_t k) {
    out.push_back({prefix + ".weight", {outc, in, k, k}});
    out.push_back({prefix + ".bias", {outc}});
}

void add_norm(std::vector<ParameterSpec>& out, const std::string& prefix, std::size_t d) {
    out.push_back({prefix + ".weight", {d}});
    out.push_back({prefix + ".bias", {d}});
}

void add_block(std::vector<ParameterSpec>& out, const std::string& prefix, std::size_t d, std::size_t hidden) {
    add_norm(out, prefix + ".norm1", d);
    add_linear(out, prefix + ".attn.q", d, d);
    add_linear(out, prefix + ".attn.k", d, d);
    add_linear(out, prefix + ".attn.v", d, d);
    add_linear(out, prefix + ".attn.proj", d, d);
    add_norm(out, prefix + ".norm2", d);
    add_linear(out, prefix + ".mlp.fc1", d, hidden);
    add_linear(out, prefix + ".mlp.fc2", hidden, d);
}

std::size_t ratio_hidden(std::size_t d, double ratio) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(d) * ratio)));
}

void add_encoder(std::vector<ParameterSpec>& out, const ModelConfig& cfg) {
    const std::size_t d = cfg.hidden;
    out.push_back({"cls_token", {1, 1, d}});
    out.push_back({"pos_embed", {1, cfg.token_count() + 1, d}});
    for (std::size_t i = 0; i < cfg.layers; ++i) add_block(out, "blocks." + std::to_string(i), d, cfg.mlp_hidden());
    add_norm(out, "norm", d);
    add_linear(out, "head", d, cfg.classes);
}

enum class InitKind { zero, one, trunc_normal, normal, he };

InitKind init_kind(const std::string& name, const Shape& shape) {
    const auto ends_with = [&](const std::string& suffix) {
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (name == "cls_token" || name == "pos_embed") return InitKind::normal;
    const bool is_norm = name.find("norm") != std::string::npos;
    if (ends_with(".bias")) return InitKind::zero;
    if (is_norm) return InitKind::one;
    if (shape.size() == 4) return InitKind::he;
    return InitKind::trunc_normal;
}

const Tensor& param(const ParameterSet& params, const std::string& name) { return params.at(name); }

Tensor conv_bias(const Tensor& bias) { return reshape(bias, {bias.numel(), 1, 1}); }

Tensor conv_layer(const Tensor& x, const ParameterSet& params, const std::string& prefix, std::size_t stride,
                  std::size_t padding) {
    return add(conv2d(x, param(params, prefix + ".weight"), stride, padding), conv_bias(param(params, prefix + ".bias")));
}

Tensor apply_stem(Tensor x, const ParameterSet& params, const ModelConfig& cfg) {
    for (std::size_t i = 0; i < cfg.conv_stem.size(); ++i) {
        const auto& layer = cfg.conv_stem[i];
        x = relu(conv_layer(x, params, "stem." + std::to_string(i), layer.stride, layer.kernel / 2));
    }
    return x;
}

Tensor residual_stage(const Tensor& x, const ParameterSet& params, std::size_t stage) {
    const std::string prefix = "stages." + std::to_string(stage);
    const std::size_t stride = stage == 0 ? 1 : 2;
    Tensor y = relu(conv_layer(x, params, prefix + ".conv1", stride, 1));
    y = conv_layer(y, params, prefix + ".conv2", 1, 1);
    const Tensor shortcut = params.contains(prefix + ".shortcut.weight") ? conv_layer(x, params, prefix + ".shortcut", stride, 0) : x;
    return relu(add(y, shortcut));
}

// Tokens [B, T, D] -> map [B, D, h, w].
Tensor tokens_to_map(const Tensor& tokens, std::size_t h, std::size_t w) {
    const std::size_t b = tokens.size(0), d = tokens.size(2);
    return reshape(transpose(tokens, 1, 2), {b, d, h, w});
}

struct T2TStage {
    std::size_t in_channels, out_dim, heads, grid_h, grid_w;
};

std::vector<T2TStage> t2t_stages(const ModelConfig& cfg) {
    std::vector<T2TStage> stages;
    std::size_t c = cfg.channels, h = cfg.image_height, w = cfg.image_width;
    for (std::size_t s = 0; s < cfg.t2t_splits.size(); ++s) {
        const auto& sp = cfg.t2t_splits[s];
        if (sp.kernel == 0 || sp.stride == 0) config_error("soft split needs positive kernel and stride");
        if (h + 2 * sp.padding < sp.kernel || w + 2 * sp.padding < sp.kernel) config_error("soft split kernel exceeds padded map");
        const bool last = s + 1 == cfg.t2t_splits.size();
        const T2TStage st{c, last ? cfg.hidden : cfg.t2t_hidden, last ? cfg.heads : cfg.t2t_heads,
                          conv_out(h, sp.kernel, sp.stride, sp.padding), conv_out(w, sp.kernel, sp.stride, sp.padding)};
        stages.push_back(st);
        c = st.out_dim;
        h = st.grid_h;
        w = st.grid_w;
    }
    return stages;
}

Tensor t2t_stage(const Tensor& map, const ParameterSet& params, const ModelConfig& cfg, std::size_t s) {
    const auto& sp = cfg.t2t_splits[s];
    const auto stages = t2t_stages(cfg);
    const std::string prefix = "t2t." + std::to_string(s);
    Tensor tokens = t2t_soft_split(map, sp.kernel, sp.stride, sp.padding);
    tokens = linear(tokens, param(params, prefix + ".proj.weight"), param(params, prefix + ".proj.bias"));
    return transformer_block(tokens, params, prefix + ".block", stages[s].heads);
}

// Patch tokens [B, N, D] for the transformer families, before CLS/pos.
Tensor embed_tokens(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg) {
    Tensor xn = normalize_input(x, cfg);
    switch (cfg.family) {
        case Family::vit:
            return patch_embed(xn, params, "patch_embed", cfg.patch);
        case Family::hybrid:
            return patch_embed(apply_stem(xn, params, cfg), params, "patch_embed", cfg.patch);
        case Family::t2t_vit: {
            const auto stages = t2t_stages(cfg);
            Tensor map = xn;
            Tensor tokens;
            for (std::size_t s = 0; s < stages.size(); ++s) {
                tokens = t2t_stage(map, params, cfg, s);
                if (s + 1 < stages.size()) map = tokens_to_map(tokens, stages[s].grid_h, stages[s].grid_w);
            }
            return tokens;
        }
        case Family::cnn:
            break;
    }
    throw std::invalid_argument("embed_tokens: cnn has no token embedding");
}

Tensor add_cls_and_pos(const Tensor& tokens, const ParameterSet& params) {
    const std::size_t b = tokens.size(0), d = tokens.size(2);
    const Tensor cls = broadcast_to(param(params, "cls_token"), {b, 1, d});
    return add(concat({cls, tokens}, 1), param(params, "pos_embed"));
}

Tensor encode(const Tensor& tokens, const ParameterSet& params, const ModelConfig& cfg) {
    Tensor h = add_cls_and_pos(tokens, params);
    for (std::size_t i = 0; i < cfg.layers; ++i) h = transformer_block(h, params, "blocks." + std::to_string(i), cfg.heads);
    h = layer_norm(h, param(params, "norm.weight"), param(params, "norm.bias"));
    const Tensor cls = reshape(slice(h, 1, 0, 1), {h.size(0), h.size(2)});
    return linear(cls, param(params, "head.weight"), param(params, "head.bias"));
}

void require_family(const ModelConfig& cfg, Family family, const char* op) {
    if (cfg.family != family) {
        throw std::invalid_argument(std::string(op) + ": config family is " + to_string(cfg.family));
    }
}

void require_input(const Tensor& x, const ModelConfig& cfg, const char* op) {
    const Shape want{cfg.channels, cfg.image_height, cfg.image_width};
    if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != want) {
        throw std::invalid_argument(std::string(op) + ": expected input B×" + std::to_string(cfg.channels) + "×" +
                                    std::to_string(cfg.image_height) + "×" + std::to_string(cfg.image_width) + ", got " +
                                    shape_str(x.shape()));
    }
}

}  // namespace

std::string to_string(Family family) {
    switch (family) {
        case Family::vit:
            return "vit";
        case Family::cnn:
            return "cnn";
        case Family::hybrid:
            return "hybrid";
        case Family::t2t_vit:
            return "t2t_vit";
    }
    return "unknown";
}

Family family_from_string(const std::string& name) {
    if (name == "vit") return Family::vit;
    if (name == "cnn") return Family::cnn;
    if (name == "hybrid") return Family::hybrid;
    if (name == "t2t_vit" || name == "t2t") return Family::t2t_vit;
    throw std::invalid_argument("unknown model family '" + name + "'");
}

std::size_t ModelConfig::mlp_hidden() const { return ratio_hidden(hidden, mlp_ratio); }

std::pair<std::size_t, std::size_t> ModelConfig::token_grid() const {
    switch (family) {
        case Family::vit:
            return {image_height / patch, image_width / patch};
        case Family::hybrid: {
            const auto g = stem_geometry(*this);
            return {g.height / patch, g.width / patch};
        }
        case Family::t2t_vit: {
            const auto stages = t2t_stages(*this);
            return {stages.back().grid_h, stages.back().grid_w};
        }
        case Family::cnn:
            break;
    }
    return {0, 0};
}

std::size_t ModelConfig::token_count() const {
    const auto [h, w] = token_grid();
    return h * w;
}

void ModelConfig::validate() const {
    if (channels == 0 || image_height == 0 || image_width == 0) config_error("image extents must be positive");
    if (classes < 2) config_error("need at least two classes");
    if (input_mean.size() != channels || input_std.size() != channels) {
        config_error("input_mean/input_std must have one entry per channel");
    }
    for (double s : input_std) {
        if (!(s > 0)) config_error("input_std entries must be positive");
    }
    if (family == Family::cnn) {
        if (conv_stem.empty()) config_error("cnn needs at least one stem layer");
        if (stage_widths.empty()) config_error("cnn needs at least one stage");
        const auto g = stem_geometry(*this);
        std::size_t h = g.height, w = g.width;
        for (std::size_t s = 1; s < stage_widths.size(); ++s) {
            h = conv_out(h, 3, 2, 1);
            w = conv_out(w, 3, 2, 1);
        }
        if (h == 0 || w == 0) config_error("cnn stages downsample below one pixel");
        return;
    }
    if (hidden == 0 || heads == 0) config_error("hidden size and heads must be positive");
    if (hidden % heads != 0) {
        config_error("hidden size " + std::to_string(hidden) + " not divisible by " + std::to_string(heads) + " heads");
    }
    if (mlp_ratio <= 0) config_error("mlp_ratio must be positive");
    switch (family) {
        case Family::vit:
            if (patch == 0 || image_height % patch != 0 || image_width % patch != 0) {
                config_error("image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                             " not divisible by patch " + std::to_string(patch));
            }
            break;
        case Family::hybrid: {
            if (conv_stem.empty()) config_error("hybrid needs at least one stem layer");
            const auto g = stem_geometry(*this);
            if (patch == 0 || g.height % patch != 0 || g.width % patch != 0) {
                config_error("stem output " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                             " not divisible by token patch " + std::to_string(patch));
            }
            break;
        }
        case Family::t2t_vit: {
            if (t2t_splits.empty()) config_error("t2t_vit needs at least one soft split");
            if (t2t_hidden == 0 || t2t_heads == 0 || t2t_hidden % t2t_heads != 0) {
                config_error("t2t_hidden must be positive and divisible by t2t_heads");
            }
            t2t_stages(*this);
            break;
        }
        case Family::cnn:
            break;
    }
    if (token_count() == 0) config_error("token count must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
    j = nlohmann::json{{"family", to_string(cfg.family)},
                       {"image_height", cfg.image_height},
                       {"image_width", cfg.image_width},
                       {"channels", cfg.channels},
                       {"patch", cfg.patch},
                       {"layers", cfg.layers},
                       {"hidden", cfg.hidden},
                       {"heads", cfg.heads},
                       {"mlp_ratio", cfg.mlp_ratio},
                       {"classes", cfg.classes},
                       {"stage_widths", cfg.stage_widths},
                       {"t2t_hidden", cfg.t2t_hidden},
                       {"t2t_heads", cfg.t2t_heads},
                       {"input_mean", cfg.input_mean},
                       {"input_std", cfg.input_std}};
    auto stem = nlohmann::json::array();
    for (const auto& l : cfg.conv_stem) stem.push_back({{"channels", l.channels}, {"kernel", l.kernel}, {"stride", l.stride}});
    j["conv_stem"] = stem;
    auto splits = nlohmann::json::array();
    for (const auto& s : cfg.t2t_splits) splits.push_back({{"kernel", s.kernel}, {"stride", s.stride}, {"padding", s.padding}});
    j["t2t_splits"] = splits;
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
    ModelConfig out;
    if (j.contains("family")) out.family = family_from_string(j.at("family").get<std::string>());
    const auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("image_height", out.image_height);
    get("image_width", out.image_width);
    get("channels", out.channels);
    get("patch", out.patch);
    get("layers", out.layers);
    get("hidden", out.hidden);
    get("heads", out.heads);
    get("mlp_ratio", out.mlp_ratio);
    get("classes", out.classes);
    get("stage_widths", out.stage_widths);
    get("t2t_hidden", out.t2t_hidden);
    get("t2t_heads", out.t2t_heads);
    if (j.contains("channels") && !j.contains("input_mean")) {
        out.input_mean.assign(out.channels, 0.5);
        out.input_std.assign(out.channels, 0.25);
    }
    get("input_mean", out.input_mean);
    get("input_std", out.input_std);
    if (j.contains("conv_stem")) {
        out.conv_stem.clear();
        for (const auto& l : j.at("conv_stem")) {
            ConvLayerSpec spec;
            spec.channels = l.value("channels", spec.channels);
            spec.kernel = l.value("kernel", spec.kernel);
            spec.stride = l.value("stride", spec.stride);
            out.conv_stem.push_back(spec);
        }
    }
    if (j.contains("t2t_splits")) {
        out.t2t_splits.clear();
        for (const auto& s : j.at("t2t_splits")) {
            SoftSplitSpec spec;
            spec.kernel = s.value("kernel", spec.kernel);
            spec.stride = s.value("stride", spec.stride);
            spec.padding = s.value("padding", spec.padding);
            out.t2t_splits.push_back(spec);
        }
    }
    cfg = std::move(out);
}

const Tensor& ParameterSet::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParameterSet: no parameter '" + name + "'");
    return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParameterSet: no parameter '" + name + "'");
    return it->second;
}

void ParameterSet::insert(const std::string& name, Tensor value) { params_[name] = std::move(value); }

std::size_t ParameterSet::numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
}

std::vector<std::string> ParameterSet::names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : params_) out.push_back(name);
    return out;
}

ParameterSet ParameterSet::clone(bool requires_grad) const {
    ParameterSet out;
    for (const auto& [name, t] : params_) {
        Tensor copy = t.detach();
        copy.requires_grad_(requires_grad);
        out.params_.emplace(name, std::move(copy));
    }
    return out;
}

void ParameterSet::set_requires_grad(bool value) {
    for (auto& [_, t] : params_) t.requires_grad_(value);
}

void ParameterSet::zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
}

bool ParameterSet::operator==(const ParameterSet& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (const auto& [name, t] : params_) {
        auto it = other.params_.find(name);
        if (it == other.params_.end() || it->second.shape() != t.shape()) return false;
        if (!std::equal(t.data().begin(), t.data().end(), it->second.data().begin())) return false;
    }
    return true;
}

std::vector<ParameterSpec> manifest(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<ParameterSpec> out;
    switch (cfg.family) {
        case Family::vit:
            add_conv(out, "patch_embed", cfg.channels, cfg.hidden, cfg.patch);
            add_encoder(out, cfg);
            break;
        case Family::hybrid: {
            std::size_t in = cfg.channels;
            for (std::size_t i = 0; i < cfg.conv_stem.size(); ++i) {
                add_conv(out, "stem." + std::to_string(i), in, cfg.conv_stem[i].channels, cfg.conv_stem[i].kernel);
                in = cfg.conv_stem[i].channels;
            }
            add_conv(out, "patch_embed", in, cfg.hidden, cfg.patch);
            add_encoder(out, cfg);
            break;
        }
        case Family::t2t_vit: {
            const auto stages = t2t_stages(cfg);
            for (std::size_t s = 0; s < stages.size(); ++s) {
                const std::string prefix = "t2t." + std::to_string(s);
                const std::size_t k = cfg.t2t_splits[s].kernel;
                add_linear(out, prefix + ".proj", stages[s].in_channels * k * k, stages[s].out_dim);
                add_block(out, prefix + ".block", stages[s].out_dim, ratio_hidden(stages[s].out_dim, cfg.mlp_ratio));
            }
            add_encoder(out, cfg);
            break;
        }
        case Family::cnn: {
            std::size_t in = cfg.channels;
            for (std::size_t i = 0; i < cfg.conv_stem.size(); ++i) {
                add_conv(out, "stem." + std::to_string(i), in, cfg.conv_stem[i].channels, cfg.conv_stem[i].kernel);
                in = cfg.conv_stem[i].channels;
            }
            for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
                const std::string prefix = "stages." + std::to_string(s);
                const std::size_t w = cfg.stage_widths[s];
                add_conv(out, prefix + ".conv1", in, w, 3);
                add_conv(out, prefix + ".conv2", w, w, 3);
                if (in != w || s > 0) add_conv(out, prefix + ".shortcut", in, w, 1);
                in = w;
            }
            add_linear(out, "head", in, cfg.classes);
            break;
        }
    }
    return out;
}

void check_manifest(const ModelConfig& cfg, const ParameterSet& params) {
    const auto specs = manifest(cfg);
    std::set<std::string> expected;
    for (const auto& spec : specs) {
        expected.insert(spec.name);
        if (!params.contains(spec.name)) throw std::invalid_argument("parameters missing '" + spec.name + "'");
        if (params.at(spec.name).shape() != spec.shape) {
            throw std::invalid_argument("parameter '" + spec.name + "' has shape " + shape_str(params.at(spec.name).shape()) +
                                        ", expected " + shape_str(spec.shape));
        }
    }
    for (const auto& name : params.names()) {
        if (!expected.count(name)) throw std::invalid_argument("unexpected parameter '" + name + "'");
    }
}

ParameterSet init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
    ParameterSet out;
    for (const auto& spec : manifest(cfg)) {
        Rng rng = make_rng(seed, {name_hash(spec.name)});
        std::vector<double> values(shape_numel(spec.shape), 0.0);
        switch (init_kind(spec.name, spec.shape)) {
            case InitKind::zero:
                break;
            case InitKind::one:
                std::fill(values.begin(), values.end(), 1.0);
                break;
            case InitKind::normal: {
                std::normal_distribution<double> nd(0.0, 0.02);
                for (auto& v : values) v = nd(rng);
                break;
            }
            case InitKind::trunc_normal: {
                std::normal_distribution<double> nd(0.0, 1.0);
                for (auto& v : values) {
                    double z;
                    do {
                        z = nd(rng);
                    } while (std::fabs(z) > 2.0);
                    v = 0.02 * z;
                }
                break;
            }
            case InitKind::he: {
                const double fan_in = static_cast<double>(spec.shape[1] * spec.shape[2] * spec.shape[3]);
                std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
                for (auto& v : values) v = nd(rng);
                break;
            }
        }
        out.insert(spec.name, Tensor(spec.shape, std::move(values)));
    }
    return out;
}

Tensor normalize_input(const Tensor& x, const ModelConfig& cfg) {
    const std::size_t c = cfg.channels;
    std::vector<double> shift(c), scale(c);
    bool identity = true;
    for (std::size_t i = 0; i < c; ++i) {
        shift[i] = -cfg.input_mean[i];
        scale[i] = 1.0 / cfg.input_std[i];
        identity = identity && shift[i] == 0.0 && scale[i] == 1.0;
    }
    if (identity) return x;
    return mul(add(x, Tensor({c, 1, 1}, shift)), Tensor({c, 1, 1}, scale));
}

Tensor patch_embed(const Tensor& x, const ParameterSet& params, const std::string& prefix, std::size_t patch) {
    if (x.rank() != 4) throw std::invalid_argument("patch_embed: expected B×C×H×W, got " + shape_str(x.shape()));
    if (patch == 0 || x.size(2) % patch != 0 || x.size(3) % patch != 0) {
        throw std::invalid_argument("patch_embed: map " + shape_str(x.shape()) + " not divisible by patch " + std::to_string(patch));
    }
    const Tensor map = conv_layer(x, params, prefix, patch, 0);
    const std::size_t b = map.size(0), d = map.size(1), n = map.size(2) * map.size(3);
    return transpose(reshape(map, {b, d, n}), 1, 2);
}

Tensor multi_head_self_attention(const Tensor& tokens, const ParameterSet& params, const std::string& prefix,
                                 std::size_t heads) {
    if (tokens.rank() != 3) throw std::invalid_argument("attention: expected B×T×D, got " + shape_str(tokens.shape()));
    const std::size_t b = tokens.size(0), t = tokens.size(1), d = tokens.size(2);
    if (heads == 0 || d % heads != 0) {
        throw std::invalid_argument("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    }
    const std::size_t dh = d / heads;
    const auto project = [&](const char* which) {
        const std::string p = prefix + ".attn." + which;
        const Tensor y = linear(tokens, param(params, p + ".weight"), param(params, p + ".bias"));
        return permute(reshape(y, {b, t, heads, dh}), {0, 2, 1, 3});
    };
    const Tensor q = project("q");
    const Tensor k = project("k");
    const Tensor v = project("v");
    const Tensor scores = mul_scalar(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(dh)));
    const Tensor mixed = matmul(softmax(scores, -1), v);
    const Tensor merged = reshape(permute(mixed, {0, 2, 1, 3}), {b, t, d});
    return linear(merged, param(params, prefix + ".attn.proj.weight"), param(params, prefix + ".attn.proj.bias"));
}

Tensor transformer_block(const Tensor& tokens, const ParameterSet& params, const std::string& prefix, std::size_t heads) {
    const Tensor n1 = layer_norm(tokens, param(params, prefix + ".norm1.weight"), param(params, prefix + ".norm1.bias"));
    const Tensor h = add(tokens, multi_head_self_attention(n1, params, prefix, heads));
    const Tensor n2 = layer_norm(h, param(params, prefix + ".norm2.weight"), param(params, prefix + ".norm2.bias"));
    const Tensor mid = gelu(linear(n2, param(params, prefix + ".mlp.fc1.weight"), param(params, prefix + ".mlp.fc1.bias")));
    return add(h, linear(mid, param(params, prefix + ".mlp.fc2.weight"), param(params, prefix + ".mlp.fc2.bias")));
}

Tensor t2t_soft_split(const Tensor& map, std::size_t kernel, std::size_t stride, std::size_t padding) {
    return unfold(map, kernel, stride, padding);
}

Tensor vit_forward(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg) {
    require_family(cfg, Family::vit, "vit_forward");
    require_input(x, cfg, "vit_forward");
    return encode(embed_tokens(x, params, cfg), params, cfg);
}

Tensor hybrid_forward(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg) {
    require_family(cfg, Family::hybrid, "hybrid_forward");
    require_input(x, cfg, "hybrid_forward");
    return encode(embed_tokens(x, params, cfg), params, cfg);
}

Tensor t2t_vit_forward(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg) {
    require_family(cfg, Family::t2t_vit, "t2t_vit_forward");
    require_input(x, cfg, "t2t_vit_forward");
    return encode(embed_tokens(x, params, cfg), params, cfg);
}

Tensor cnn_forward(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg) {
    require_family(cfg, Family::cnn, "cnn_forward");
    require_input(x, cfg, "cnn_forward");
    Tensor h = apply_stem(normalize_input(x, cfg), params, cfg);
    for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) h = residual_stage(h, params, s);
    const Tensor pooled = mean(mean(h, 3), 2);
    return linear(pooled, param(params, "head.weight"), param(params, "head.bias"));
}

Tensor forward(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg) {
    switch (cfg.family) {
        case Family::vit:
            return vit_forward(x, params, cfg);
        case Family::cnn:
            return cnn_forward(x, params, cfg);
        case Family::hybrid:
            return hybrid_forward(x, params, cfg);
        case Family::t2t_vit:
            return t2t_vit_forward(x, params, cfg);
    }
    throw std::invalid_argument("forward: unknown family");
}

Tensor first_block_features(const Tensor& x, const ParameterSet& params, const ModelConfig& cfg) {
    require_input(x, cfg, "first_block_features");
    if (cfg.family == Family::cnn) {
        return residual_stage(apply_stem(normalize_input(x, cfg), params, cfg), params, 0);
    }
    if (cfg.family == Family::t2t_vit) {
        const auto stages = t2t_stages(cfg);
        const Tensor tokens = t2t_stage(normalize_input(x, cfg), params, cfg, 0);
        return tokens_to_map(tokens, stages[0].grid_h, stages[0].grid_w);
    }
    Tensor h = add_cls_and_pos(embed_tokens(x, params, cfg), params);
    if (cfg.layers > 0) h = transformer_block(h, params, "blocks.0", cfg.heads);
    const auto [gh, gw] = cfg.token_grid();
    return tokens_to_map(slice(h, 1, 1, h.size(1)), gh, gw);
}

Classifier Network::classifier() const {
    auto net = std::make_shared<const Network>(*this);
    return [net](const Tensor& x) { return (*net)(x); };
}

}  // namespace advlens::models
