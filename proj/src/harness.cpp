#include "advlens/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <fmt/format.h>

#include "advlens/checkpoint.hpp"
#include "advlens/frequency.hpp"
#include "advlens/ops.hpp"
#include "advlens/pgm.hpp"
#include "advlens/rng.hpp"

namespace advlens::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) { return fmt::format("{}", v); }

// Records every emitted file with its checksum.
class Writer {
public:
    explicit Writer(std::string dir) : dir_(std::move(dir)) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw ConfigError("cannot create output directory " + dir_ + ": " + ec.message());
    }

    std::string path(const std::string& rel) const { return (fs::path(dir_) / rel).string(); }

    void text(const std::string& rel, const std::string& content) {
        std::ofstream out(path(rel), std::ios::binary);
        out << content;
        if (!out) throw std::runtime_error("cannot write " + path(rel));
        out.close();
        record(rel);
    }

    // For files written by other code.
    void record(const std::string& rel) {
        const std::string p = path(rel);
        entries.push_back({rel, data::sha256_file(p), static_cast<std::uint64_t>(fs::file_size(p))});
    }

    std::vector<ManifestEntry> entries;

private:
    std::string dir_;
};

bool safe_name(const std::string& s) {
    if (s.empty()) return false;
    return std::all_of(s.begin(), s.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'; });
}

json attack_to_json(const attacks::AttackConfig& a) {
    json j;
    j["epsilon"] = a.epsilon;
    j["n_iter"] = a.n_iter;
    j["step_size"] = a.step_size ? json(*a.step_size) : json(nullptr);
    j["random_start"] = a.random_start;
    j["restarts"] = a.n_restarts;
    j["filter_mode"] = frequency::to_string(a.filter_mode);
    j["low_corner"] = a.low_corner;
    j["high_corner"] = a.high_corner;
    j["clamp"] = a.clamp_to_valid_range;
    j["post_filter_clip"] = a.post_filter_clip;
    return j;
}

models::Network load_model(const ModelRef& ref) {
    if (!ref.checkpoint.empty()) {
        if (!fs::exists(ref.checkpoint)) throw ConfigError("model '" + ref.name + "': checkpoint " + ref.checkpoint + " not found");
        Checkpoint c = load_checkpoint(ref.checkpoint);
        return {c.config, std::move(c.params)};
    }
    return {*ref.config, models::init_parameters(*ref.config, ref.init_seed)};
}

void check_compatible(const models::ModelConfig& m, const data::Dataset& d, const std::string& who) {
    const auto& s = d.images.shape();
    if (m.channels != s[1] || m.image_height != s[2] || m.image_width != s[3] || m.classes != d.classes) {
        throw ConfigError(fmt::format("{} expects {}x{}x{} images and {} classes; dataset has {} and {} classes", who, m.channels,
                                      m.image_height, m.image_width, m.classes, shape_str(s), d.classes));
    }
}

data::Dataset load_data(const json& ref) {
    if (ref.is_null()) throw ConfigError("no dataset configured");
    data::Dataset d;
    try {
        d = data::load_dataset(ref);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("dataset reference: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("dataset reference: ") + e.what());
    }
    try {
        d.validate();
    } catch (const std::invalid_argument& e) {
        throw data::DataError(e.what(), 0);
    }
    return d;
}

data::Dataset eval_subset(const data::Dataset& d, std::size_t n, std::uint64_t seed, std::vector<std::size_t>& ids) {
    if (n > d.size()) throw ConfigError(fmt::format("samples {} exceeds dataset size {}", n, d.size()));
    ids = data::subset_indices(d.size(), n, seed);
    return n == 0 || n == d.size() ? d : data::take(d, ids);
}

json dataset_json(const data::Dataset& d) {
    return {{"provenance", data::to_string(d.provenance)}, {"split", d.split}, {"size", d.size()},
            {"shape", d.images.shape()}, {"classes", d.classes}, {"checksum", d.checksum}};
}

std::string eps_label(double e) { return num(e); }

}  // namespace

std::string to_string(Kind kind) {
    switch (kind) {
        case Kind::train:
            return "train";
        case Kind::advtrain:
            return "advtrain";
        case Kind::attack:
            return "attack";
        case Kind::transfer:
            return "transfer";
        case Kind::freq_study:
            return "freq_study";
        case Kind::certify:
            return "certify";
        case Kind::sweep:
            return "sweep";
        case Kind::feature_dump:
            return "feature_dump";
    }
    return "unknown";
}

Kind kind_from_string(const std::string& name) {
    if (name == "train") return Kind::train;
    if (name == "advtrain") return Kind::advtrain;
    if (name == "attack") return Kind::attack;
    if (name == "transfer") return Kind::transfer;
    if (name == "freq_study" || name == "freq-study") return Kind::freq_study;
    if (name == "certify") return Kind::certify;
    if (name == "sweep") return Kind::sweep;
    if (name == "feature_dump" || name == "features") return Kind::feature_dump;
    throw ConfigError("unknown experiment kind '" + name + "'");
}

void ExperimentConfig::validate() const {
    const bool trains = kind == Kind::train || kind == Kind::advtrain;
    if (dataset.is_null()) throw ConfigError("config: 'dataset' is required");
    try {
        if (trains) {
            model.validate();
            train.validate();
            if (kind == Kind::train && train.method != advtrain::Method::natural) {
                throw ConfigError("config: the train kind only runs natural training; use advtrain");
            }
        } else {
            if (models.empty()) throw ConfigError("config: 'models' must name at least one model");
            std::set<std::string> seen;
            for (const auto& m : models) {
                if (!safe_name(m.name)) throw ConfigError("config: model name '" + m.name + "' must be [A-Za-z0-9_-]+");
                if (!seen.insert(m.name).second) throw ConfigError("config: duplicate model name '" + m.name + "'");
                if (m.checkpoint.empty() && !m.config) throw ConfigError("config: model '" + m.name + "' needs a checkpoint or config");
                if (!m.checkpoint.empty() && !fs::exists(m.checkpoint)) {
                    throw ConfigError("config: model '" + m.name + "': checkpoint " + m.checkpoint + " not found");
                }
                if (m.config) m.config->validate();
            }
            attack.validate();
            for (double e : epsilons)
                if (!(e >= 0) || !std::isfinite(e)) throw ConfigError("config: epsilons must be finite and >= 0");
        }
        if (kind == Kind::certify) {
            smoothing.validate();
            if (!std::is_sorted(radii.begin(), radii.end())) throw ConfigError("config: radii must be ascending");
            if (denoiser.enabled) denoiser.config.validate();
            if (denoiser.enabled && !denoiser.checkpoint.empty() && !fs::exists(denoiser.checkpoint)) {
                throw ConfigError("config: denoiser checkpoint " + denoiser.checkpoint + " not found");
            }
        }
        if (kind == Kind::sweep) {
            if (sweep_steps.empty() || !std::is_sorted(sweep_steps.begin(), sweep_steps.end()) ||
                std::adjacent_find(sweep_steps.begin(), sweep_steps.end()) != sweep_steps.end() || sweep_steps.front() == 0) {
                throw ConfigError("config: sweep steps must be positive and strictly ascending");
            }
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    try {
        if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
        c.kind = kind_from_string(j.at("kind").get<std::string>());
        c.seed = j.value("seed", c.seed);
        c.samples = j.value("samples", c.samples);
        c.out = j.value("out", c.out);
        c.dataset = j.value("dataset", json());
        c.train_dataset = j.value("train_dataset", json());
        c.eval_dataset = j.value("eval_dataset", json());
        if (j.contains("model")) c.model = j.at("model").get<models::ModelConfig>();
        for (const auto& m : j.value("models", json::array())) {
            ModelRef r;
            r.name = m.at("name").get<std::string>();
            r.checkpoint = m.value("checkpoint", "");
            if (m.contains("config")) r.config = m.at("config").get<models::ModelConfig>();
            r.init_seed = m.value("init_seed", c.seed);
            c.models.push_back(std::move(r));
        }

        c.attack.n_iter = 40;
        if (j.contains("attack")) {
            const json& a = j.at("attack");
            c.attack.epsilon = a.value("epsilon", c.attack.epsilon);
            c.attack.n_iter = a.value("n_iter", c.attack.n_iter);
            if (a.contains("step_size") && !a.at("step_size").is_null()) c.attack.step_size = a.at("step_size").get<double>();
            c.attack.random_start = a.value("random_start", c.attack.random_start);
            c.attack.n_restarts = a.value("restarts", c.attack.n_restarts);
            c.attack.filter_mode = frequency::mask_mode_from_string(a.value("filter_mode", std::string("full")));
            c.attack.low_corner = a.value("low_corner", c.attack.low_corner);
            c.attack.high_corner = a.value("high_corner", c.attack.high_corner);
            c.attack.clamp_to_valid_range = a.value("clamp", c.attack.clamp_to_valid_range);
            c.attack.post_filter_clip = a.value("post_filter_clip", c.attack.post_filter_clip);
            c.epsilons = a.value("epsilons", c.epsilons);
            c.strongest = a.value("strongest", c.strongest);
            c.transfer_fgsm = a.value("transfer_fgsm", c.transfer_fgsm);
        }
        if (c.epsilons.empty()) c.epsilons = {c.attack.epsilon};
        c.attack.seed = c.seed;

        if (j.contains("train")) {
            const json& t = j.at("train");
            auto& tr = c.train;
            tr.method = advtrain::method_from_string(t.value("method", std::string("natural")));
            tr.epsilon = t.value("epsilon", tr.epsilon);
            tr.inner_steps = t.value("inner_steps", tr.inner_steps);
            if (t.contains("inner_step_size") && !t.at("inner_step_size").is_null()) {
                tr.inner_step_size = t.at("inner_step_size").get<double>();
            }
            tr.beta = t.value("beta", tr.beta);
            tr.epochs = t.value("epochs", tr.epochs);
            tr.batch_size = t.value("batch_size", tr.batch_size);
            tr.lr = t.value("lr", tr.lr);
            tr.decay_epochs = t.value("decay_epochs", tr.decay_epochs);
            tr.decay_factor = t.value("decay_factor", tr.decay_factor);
            tr.momentum = t.value("momentum", tr.momentum);
            if (t.contains("weight_decay") && !t.at("weight_decay").is_null()) tr.weight_decay = t.at("weight_decay").get<double>();
            tr.horizontal_flip = t.value("horizontal_flip", tr.horizontal_flip);
            c.train_samples = t.value("samples", c.train_samples);
            c.eval_steps = t.value("eval_steps", c.eval_steps);
        }
        c.train.seed = c.seed;

        if (j.contains("smoothing")) {
            const json& s = j.at("smoothing");
            auto& sm = c.smoothing;
            sm.sigma = s.value("sigma", sm.sigma);
            sm.n0 = s.value("n0", sm.n0);
            sm.n = s.value("n", sm.n);
            sm.alpha = s.value("alpha", sm.alpha);
            sm.batch_size = s.value("batch_size", sm.batch_size);
            sm.exact_radius = s.value("exact_radius", sm.exact_radius);
            c.radii = s.value("radii", c.radii);
            c.noisy_draws = s.value("noisy_draws", c.noisy_draws);
        }
        c.smoothing.seed = c.seed;

        if (j.contains("denoiser") && !j.at("denoiser").is_null()) {
            const json& d = j.at("denoiser");
            auto& dn = c.denoiser;
            dn.enabled = d.value("enabled", true);
            dn.checkpoint = d.value("checkpoint", "");
            dn.config.layers = d.value("layers", dn.config.layers);
            dn.config.width = d.value("width", dn.config.width);
            dn.config.kernel = d.value("kernel", dn.config.kernel);
            dn.config.residual = d.value("residual", dn.config.residual);
            if (d.contains("train")) {
                const json& t = d.at("train");
                dn.train.epochs = t.value("epochs", dn.train.epochs);
                dn.train.batch_size = t.value("batch_size", dn.train.batch_size);
                dn.train.lr = t.value("lr", dn.train.lr);
                dn.train_samples = t.value("samples", dn.train_samples);
            }
        }
        c.denoiser.train.sigma = c.smoothing.sigma;
        c.denoiser.train.seed = c.seed;

        if (j.contains("sweep")) {
            c.sweep_radii = j.at("sweep").value("radii", c.sweep_radii);
            c.sweep_steps = j.at("sweep").value("steps", c.sweep_steps);
        }
        if (c.sweep_radii.empty()) c.sweep_radii = c.epsilons;
        if (j.contains("features")) {
            c.feature_index = j.at("features").value("index", c.feature_index);
            c.feature_channels = j.at("features").value("max_channels", c.feature_channels);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["kind"] = to_string(c.kind);
    j["seed"] = c.seed;
    j["samples"] = c.samples;
    j["dataset"] = c.dataset;
    if (!c.train_dataset.is_null()) j["train_dataset"] = c.train_dataset;
    if (!c.eval_dataset.is_null()) j["eval_dataset"] = c.eval_dataset;
    if (c.kind == Kind::train || c.kind == Kind::advtrain) {
        j["model"] = c.model;
        const auto& t = c.train;
        j["train"] = {{"method", advtrain::to_string(t.method)},
                      {"epsilon", t.epsilon},
                      {"inner_steps", t.inner_steps},
                      {"inner_step_size", t.inner_alpha()},
                      {"beta", t.beta},
                      {"epochs", t.epochs},
                      {"batch_size", t.batch_size},
                      {"lr", t.lr},
                      {"decay_epochs", t.decay_epochs},
                      {"decay_factor", t.decay_factor},
                      {"momentum", t.momentum},
                      {"weight_decay", t.weight_decay_for(c.model.family)},
                      {"horizontal_flip", t.horizontal_flip},
                      {"samples", c.train_samples},
                      {"eval_steps", c.eval_steps}};
        return j;
    }
    json models = json::array();
    for (const auto& m : c.models) {
        json r = {{"name", m.name}};
        if (!m.checkpoint.empty()) {
            r["checkpoint"] = m.checkpoint;
        } else {
            r["config"] = *m.config;
            r["init_seed"] = m.init_seed;
        }
        models.push_back(r);
    }
    j["models"] = models;
    json a = attack_to_json(c.attack);
    a["epsilons"] = c.epsilons;
    a["strongest"] = c.strongest;
    a["transfer_fgsm"] = c.transfer_fgsm;
    j["attack"] = a;
    if (c.kind == Kind::certify) {
        const auto& s = c.smoothing;
        j["smoothing"] = {{"sigma", s.sigma}, {"n0", s.n0},         {"n", s.n},
                          {"alpha", s.alpha}, {"batch_size", s.batch_size}, {"exact_radius", s.exact_radius},
                          {"radii", c.radii}, {"noisy_draws", c.noisy_draws}};
        if (c.denoiser.enabled) {
            const auto& d = c.denoiser;
            j["denoiser"] = {{"enabled", true},
                             {"checkpoint", d.checkpoint},
                             {"layers", d.config.layers},
                             {"width", d.config.width},
                             {"kernel", d.config.kernel},
                             {"residual", d.config.residual},
                             {"train", {{"epochs", d.train.epochs}, {"batch_size", d.train.batch_size}, {"lr", d.train.lr}, {"samples", d.train_samples}}}};
        }
    }
    if (c.kind == Kind::sweep) j["sweep"] = {{"radii", c.sweep_radii}, {"steps", c.sweep_steps}};
    if (c.kind == Kind::feature_dump) j["features"] = {{"index", c.feature_index}, {"max_channels", c.feature_channels}};
    return j;
}

json read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
}

std::string model_by_epsilon_csv(const std::vector<std::string>& names, const std::vector<double>& epsilons,
                                 const std::vector<std::vector<double>>& values) {
    std::string out = "model";
    for (double e : epsilons) out += "," + eps_label(e);
    out += "\n";
    for (std::size_t m = 0; m < names.size(); ++m) {
        out += names[m];
        for (double v : values.at(m)) out += "," + num(v);
        out += "\n";
    }
    return out;
}

std::vector<FreqRow> freq_study(const std::vector<NamedModel>& models, const Tensor& x, std::span<const int> labels,
                                const attacks::AttackConfig& base, const std::vector<double>& epsilons) {
    if (models.empty()) throw std::invalid_argument("freq_study: need at least one model");
    std::vector<FreqRow> rows;
    attacks::AttackConfig lo_cfg = base, hi_cfg = base;
    lo_cfg.filter_mode = frequency::MaskMode::low;
    hi_cfg.filter_mode = frequency::MaskMode::high;
    const auto low = attacks::mask_for(lo_cfg, x.size(2), x.size(3));
    const auto high = attacks::mask_for(hi_cfg, x.size(2), x.size(3));
    for (const auto& m : models) {
        const Classifier f = m.network.classifier();
        for (double e : epsilons) {
            attacks::AttackConfig cfg = base;
            cfg.epsilon = e;
            cfg.filter_mode = frequency::MaskMode::full;
            // One PGD run shared by the three filters.
            const attacks::AttackResult full = attacks::pgd(f, x, labels, cfg);
            FreqRow row{m.name, e, full.success_rate(), 0.0, 0.0};
            row.low = attacks::apply_frequency_filter(f, x, labels, cfg, low, full).success_rate();
            row.high = attacks::apply_frequency_filter(f, x, labels, cfg, high, full).success_rate();
            rows.push_back(row);
        }
    }
    return rows;
}

std::string freq_study_csv(const std::vector<FreqRow>& rows) {
    std::string out = "model,epsilon,asr_full,asr_low,asr_high\n";
    for (const auto& r : rows) out += fmt::format("{},{},{},{},{}\n", r.model, num(r.epsilon), num(r.full), num(r.low), num(r.high));
    return out;
}

std::vector<std::string> dump_feature_maps(const models::Network& model, const Tensor& image, const std::string& out_dir,
                                           std::size_t max_channels) {
    Tensor x = image;
    if (x.rank() == 3) x = reshape(x, {1, x.size(0), x.size(1), x.size(2)});
    x = slice(x, 0, 0, 1);
    Tensor maps;
    {
        NoGradScope no_grad;
        maps = models::first_block_features(x, model.params, model.config);
    }
    fs::create_directories(out_dir);
    const std::size_t ch = std::min(maps.size(1), max_channels), h = maps.size(2), w = maps.size(3);
    const auto v = maps.data();
    std::vector<std::string> names;
    for (std::size_t c = 0; c < ch; ++c) {
        const std::string name = fmt::format("channel_{:02d}.pgm", c);
        write_pgm((fs::path(out_dir) / name).string(), normalize_to_gray(v.data() + c * h * w, h, w));
        names.push_back(name);
    }
    return names;
}

std::string loss_trajectory_report(const Classifier& model, const Tensor& x, std::span<const int> labels,
                                   const attacks::AttackConfig& cfg, const std::optional<attacks::WarmStart>& warm) {
    if (cfg.n_iter < 2) throw std::invalid_argument("loss_trajectory_report: n_iter must be >= 2");
    return attacks::trajectory_csv(attacks::pgd(model, x, labels, cfg, 0, warm));
}

std::vector<std::string> verify_report(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "report.json");
    if (!in) return {"report.json"};
    const json report = json::parse(in);
    std::vector<std::string> bad;
    for (const auto& e : report.at("manifest")) {
        const std::string file = e.at("file").get<std::string>();
        const fs::path p = fs::path(dir) / file;
        if (!fs::exists(p) || data::sha256_file(p.string()) != e.at("sha256").get<std::string>() ||
            fs::file_size(p) != e.at("bytes").get<std::uint64_t>()) {
            bad.push_back(file);
        }
    }
    return bad;
}

namespace {

void run_training(const ExperimentConfig& cfg, Writer& w, json& results, json& meta) {
    const data::Dataset full = load_data(cfg.dataset);
    check_compatible(cfg.model, full, "model");
    if (cfg.train_samples > full.size()) throw ConfigError("train samples exceed dataset size");
    const data::Dataset train = data::subset(full, cfg.train_samples, derive_seed(cfg.seed, {0x7EA1ULL}));
    meta["train_dataset"] = dataset_json(train);

    const auto result = advtrain::train(cfg.model, train.images, train.labels, cfg.train);
    w.text("history.csv", advtrain::history_csv(result.history));
    Checkpoint ck{cfg.model, result.params, cfg.seed,
                  {{"method", advtrain::to_string(cfg.train.method)},
                   {"epsilon", cfg.train.epsilon},
                   {"epochs", cfg.train.epochs},
                   {"train_samples", train.size()},
                   {"dataset_checksum", train.checksum}}};
    save_checkpoint(w.path("model.ckpt"), ck);
    w.record("model.ckpt");

    const data::Dataset held = cfg.eval_dataset.is_null() ? full : load_data(cfg.eval_dataset);
    check_compatible(cfg.model, held, "model");
    std::vector<std::size_t> ids;
    const data::Dataset ev = eval_subset(held, cfg.samples, cfg.seed, ids);
    meta["dataset"] = dataset_json(ev);
    const models::Network net{cfg.model, result.params};
    const Classifier f = net.classifier();
    const double eps = cfg.kind == Kind::advtrain ? cfg.train.epsilon : 0.0;
    advtrain::RobustEval eval;
    if (cfg.kind == Kind::advtrain) {
        eval = advtrain::evaluate_robust_accuracy(f, ev.images, ev.labels, eps, cfg.eval_steps, cfg.seed);
    } else {
        const auto e = attacks::evaluate(f, ev.images, ev.labels);
        std::size_t ok = 0;
        for (std::size_t i = 0; i < ev.size(); ++i) ok += e.pred[i] == ev.labels[i];
        eval.clean_acc = static_cast<double>(ok) / static_cast<double>(ev.size());
    }
    const std::string method = advtrain::to_string(cfg.train.method);
    if (cfg.kind == Kind::advtrain) {
        w.text("eval.csv", fmt::format("method,epsilon,clean_acc,pgd{}_acc\n{},{},{},{}\n", cfg.eval_steps, method, num(eps),
                                       num(eval.clean_acc), num(eval.robust_acc)));
        results["robust_accuracy"] = eval.robust_acc;
    } else {
        w.text("eval.csv", fmt::format("method,clean_acc\n{},{}\n", method, num(eval.clean_acc)));
    }
    results["clean_accuracy"] = eval.clean_acc;
    results["final_train_loss"] = result.history.empty() ? 0.0 : result.history.back().train_loss;
    results["checkpoint"] = "model.ckpt";
}

}  // namespace

Report run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    Writer w(cfg.out);
    json meta;
    meta["artifact"] = "advlens";
    meta["version"] = kArtifactVersion;
    meta["kind"] = to_string(cfg.kind);
    meta["config"] = config_to_json(cfg);
    meta["op_choices"] = {{"gelu", "erf"},
                          {"dct", "orthonormal DCT-II, separable"},
                          {"attack_space", "[0,1] pixels, normalization inside the model"},
                          {"pgd_return", "best iterate by (misclassified, loss)"},
                          {"trades_inner_start", "x + 0.001 N(0,1)"}};
    json results;

    if (cfg.kind == Kind::train || cfg.kind == Kind::advtrain) {
        run_training(cfg, w, results, meta);
    } else {
        const data::Dataset full = load_data(cfg.dataset);
        std::vector<NamedModel> nets;
        for (const auto& ref : cfg.models) {
            nets.push_back({ref.name, load_model(ref)});
            check_compatible(nets.back().network.config, full, "model '" + ref.name + "'");
        }
        std::vector<std::size_t> ids;
        const data::Dataset ev = cfg.kind == Kind::feature_dump ? full : eval_subset(full, cfg.samples, cfg.seed, ids);
        meta["dataset"] = dataset_json(ev);
        std::vector<std::string> names;
        for (const auto& n : nets) names.push_back(n.name);

        switch (cfg.kind) {
            case Kind::attack: {
                std::vector<std::vector<double>> asr(nets.size()), rob(nets.size());
                meta["op_choices"]["evaluator"] =
                    cfg.strongest ? std::string(attacks::kStrongestAttackLabel) : fmt::format("PGD-{}", cfg.attack.n_iter);
                for (std::size_t m = 0; m < nets.size(); ++m) {
                    const Classifier f = nets[m].network.classifier();
                    for (std::size_t k = 0; k < cfg.epsilons.size(); ++k) {
                        attacks::AttackConfig a = cfg.attack;
                        a.epsilon = cfg.epsilons[k];
                        const auto r = cfg.strongest ? attacks::strongest_attack(f, ev.images, ev.labels, a.epsilon, cfg.seed)
                                                     : attacks::run_attack(f, ev.images, ev.labels, a);
                        asr[m].push_back(r.success_rate());
                        rob[m].push_back(r.robust_accuracy());
                        results["clean_accuracy"][names[m]] = r.clean_accuracy();
                        w.text(fmt::format("attack_{}_eps{}.csv", names[m], k), attacks::attack_csv(r, ids));
                        if (k + 1 == cfg.epsilons.size() && !cfg.strongest && a.n_iter >= 2) {
                            w.text(fmt::format("trajectory_{}.csv", names[m]), attacks::trajectory_csv(r));
                        }
                    }
                    for (std::size_t k = 0; k < cfg.epsilons.size(); ++k) {
                        results["asr"][names[m]][eps_label(cfg.epsilons[k])] = asr[m][k];
                        results["robust_accuracy"][names[m]][eps_label(cfg.epsilons[k])] = rob[m][k];
                    }
                }
                w.text("asr.csv", model_by_epsilon_csv(names, cfg.epsilons, asr));
                w.text("robust_accuracy.csv", model_by_epsilon_csv(names, cfg.epsilons, rob));
                break;
            }
            case Kind::transfer: {
                std::vector<Classifier> fs_;
                for (const auto& n : nets) fs_.push_back(n.network.classifier());
                meta["op_choices"]["transfer_attack"] = cfg.transfer_fgsm ? "FGSM" : fmt::format("PGD-{}", cfg.attack.n_iter);
                for (std::size_t k = 0; k < cfg.epsilons.size(); ++k) {
                    attacks::AttackConfig a = cfg.attack;
                    a.epsilon = cfg.epsilons[k];
                    const auto mat = attacks::transfer_attack_matrix(fs_, ev.images, ev.labels, a, cfg.transfer_fgsm);
                    std::string csv = "source";
                    for (const auto& n : names) csv += "," + n;
                    csv += "\n";
                    for (std::size_t i = 0; i < names.size(); ++i) {
                        csv += names[i];
                        for (double v : mat[i]) csv += "," + num(v);
                        csv += "\n";
                    }
                    w.text(fmt::format("transfer_eps{}.csv", k), csv);
                    results["transfer"][eps_label(cfg.epsilons[k])] = mat;
                }
                results["models"] = names;
                break;
            }
            case Kind::freq_study: {
                const auto rows = freq_study(nets, ev.images, ev.labels, cfg.attack, cfg.epsilons);
                w.text("freq_study.csv", freq_study_csv(rows));
                const std::size_t H = ev.images.size(2), W = ev.images.size(3);
                attacks::AttackConfig lo = cfg.attack, hi = cfg.attack;
                lo.filter_mode = frequency::MaskMode::low;
                hi.filter_mode = frequency::MaskMode::high;
                frequency::write_mask_pgm(w.path("mask_low.pgm"), attacks::mask_for(lo, H, W));
                w.record("mask_low.pgm");
                frequency::write_mask_pgm(w.path("mask_high.pgm"), attacks::mask_for(hi, H, W));
                w.record("mask_high.pgm");
                std::size_t ordered = 0;
                for (const auto& r : rows) {
                    ordered += r.full >= r.low && r.full >= r.high;
                    results["asr"][r.model][eps_label(r.epsilon)] = {{"full", r.full}, {"low", r.low}, {"high", r.high}};
                }
                results["cells"] = rows.size();
                results["cells_full_dominates"] = ordered;
                break;
            }
            case Kind::certify: {
                const Classifier base = nets.front().network.classifier();
                std::optional<smoothing::Denoiser> den;
                if (cfg.denoiser.enabled) {
                    if (!cfg.denoiser.checkpoint.empty()) {
                        den = smoothing::load_denoiser(cfg.denoiser.checkpoint);
                    } else {
                        const data::Dataset tr_full = cfg.train_dataset.is_null() ? full : load_data(cfg.train_dataset);
                        check_compatible(nets.front().network.config, tr_full, "denoiser training data");
                        if (cfg.denoiser.train_samples > tr_full.size()) throw ConfigError("denoiser samples exceed dataset size");
                        const data::Dataset tr =
                            data::subset(tr_full, cfg.denoiser.train_samples, derive_seed(cfg.seed, {0xDE01ULL}));
                        den = smoothing::init_denoiser(cfg.denoiser.config, tr.images.size(1), cfg.seed);
                        const auto hist = smoothing::train_denoiser(base, *den, tr.images, cfg.denoiser.train);
                        std::string csv = "epoch,stability_loss\n";
                        for (std::size_t e = 0; e < hist.size(); ++e) csv += fmt::format("{},{}\n", e, num(hist[e]));
                        w.text("denoiser_history.csv", csv);
                        smoothing::save_denoiser(w.path("denoiser.ckpt"), *den, cfg.seed);
                        w.record("denoiser.ckpt");
                    }
                    if (den->channels != ev.images.size(1)) throw ConfigError("denoiser channels do not match the dataset");
                }
                const smoothing::Denoiser* dp = den ? &*den : nullptr;
                const auto report = smoothing::certified_accuracy_curve(base, dp, ev.images, ev.labels, cfg.smoothing, cfg.radii, ids);
                w.text("certification.csv", smoothing::certification_csv(report.results, ev.labels, ids));
                w.text("certified_accuracy.csv", smoothing::curve_csv(report.radii, report.certified_accuracy));
                results["certified_accuracy"] = report.certified_accuracy;
                results["radii"] = report.radii;
                results["smoothed_accuracy"] = smoothing::smoothed_accuracy(base, dp, ev.images, ev.labels, cfg.smoothing, ids);
                results["noisy_accuracy_base"] = smoothing::noisy_accuracy(base, nullptr, ev.images, ev.labels, cfg.smoothing.sigma,
                                                                           cfg.noisy_draws, cfg.seed, cfg.smoothing.batch_size);
                if (dp) {
                    results["noisy_accuracy_denoised"] = smoothing::noisy_accuracy(
                        base, dp, ev.images, ev.labels, cfg.smoothing.sigma, cfg.noisy_draws, cfg.seed, cfg.smoothing.batch_size);
                }
                const auto clean = attacks::evaluate(base, ev.images, ev.labels);
                std::size_t ok = 0;
                for (std::size_t i = 0; i < ev.size(); ++i) ok += clean.pred[i] == ev.labels[i];
                results["clean_accuracy"] = static_cast<double>(ok) / static_cast<double>(ev.size());
                results["denoiser"] = dp != nullptr;
                break;
            }
            case Kind::sweep: {
                for (std::size_t m = 0; m < nets.size(); ++m) {
                    const auto grid = attacks::radius_step_sweep(nets[m].network.classifier(), ev.images, ev.labels,
                                                                 cfg.sweep_radii, cfg.sweep_steps, cfg.attack);
                    std::string csv = "epsilon";
                    for (auto s : cfg.sweep_steps) csv += fmt::format(",steps_{}", s);
                    csv += "\n";
                    for (std::size_t r = 0; r < cfg.sweep_radii.size(); ++r) {
                        csv += num(cfg.sweep_radii[r]);
                        for (double v : grid[r]) csv += "," + num(v);
                        csv += "\n";
                    }
                    w.text(fmt::format("sweep_{}.csv", names[m]), csv);
                    results["robust_accuracy"][names[m]] = grid;
                }
                break;
            }
            case Kind::feature_dump: {
                if (cfg.feature_index >= full.size()) throw ConfigError("features.index is past the end of the dataset");
                for (const auto& n : nets) {
                    const std::string sub = "features_" + n.name;
                    const Tensor img = slice(full.images, 0, cfg.feature_index, cfg.feature_index + 1);
                    const auto files = dump_feature_maps(n.network, img, w.path(sub), cfg.feature_channels);
                    for (const auto& f : files) w.record(sub + "/" + f);
                    results["feature_maps"][n.name] = files.size();
                }
                results["image_index"] = cfg.feature_index;
                results["image_label"] = full.labels[cfg.feature_index];
                break;
            }
            default:
                break;
        }
    }

    Report rep;
    rep.dir = cfg.out;
    rep.metadata = meta;
    rep.results = results;
    rep.manifest = w.entries;
    json out = meta;
    out["results"] = results;
    json manifest = json::array();
    for (const auto& e : w.entries) manifest.push_back({{"file", e.file}, {"sha256", e.sha256}, {"bytes", e.bytes}});
    out["manifest"] = manifest;
    std::ofstream f(w.path("report.json"), std::ios::binary);
    f << out.dump(2) << "\n";
    if (!f) throw std::runtime_error("cannot write report.json");
    return rep;
}

}  // namespace advlens::harness
