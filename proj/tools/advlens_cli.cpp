#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "advlens/checkpoint.hpp"
#include "advlens/dataset.hpp"
#include "advlens/harness.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kDataError = 3;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> samples;
};

int run(const std::string& kind, const Common& c) {
    using namespace advlens;
    try {
        nlohmann::json j = c.config.empty() ? nlohmann::json::object() : harness::read_config_file(c.config);
        if (!j.is_object()) throw harness::ConfigError("config file must hold a JSON object");
        // The subcommand names the kind; a conflicting file value is an error.
        const auto requested = harness::kind_from_string(kind);
        if (j.contains("kind") && j["kind"].is_string() && harness::kind_from_string(j["kind"].get<std::string>()) != requested) {
            throw harness::ConfigError("config kind '" + j["kind"].get<std::string>() + "' does not match subcommand '" + kind + "'");
        }
        j["kind"] = harness::to_string(requested);
        if (c.seed) j["seed"] = *c.seed;
        if (c.out) j["out"] = *c.out;
        if (c.samples) j["samples"] = *c.samples;
        const auto cfg = harness::config_from_json(j);
        const auto report = harness::run_experiment(cfg);
        std::cout << report.results.dump(2) << "\n";
        std::cerr << "advlens: wrote " << report.manifest.size() << " files and report.json to " << report.dir << "\n";
        return kOk;
    } catch (const harness::ConfigError& e) {
        std::cerr << "advlens: config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const data::DataError& e) {
        std::cerr << "advlens: data error: " << e.what() << "\n";
        return kDataError;
    } catch (const CheckpointError& e) {
        std::cerr << "advlens: data error: " << e.what() << "\n";
        return kDataError;
    } catch (const std::exception& e) {
        std::cerr << "advlens: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"advlens: adversarial robustness experiments on small vision models"};
    app.require_subcommand(1);
    Common common;
    std::string chosen;
    const std::pair<const char*, const char*> commands[] = {
        {"train", "natural training; writes model.ckpt"},
        {"advtrain", "PGD or TRADES adversarial training with PGD evaluation"},
        {"attack", "white-box PGD attack success table"},
        {"transfer", "source x target transfer matrix"},
        {"freq-study", "low/high/full-pass filtered PGD"},
        {"certify", "randomized smoothing certification, optionally denoised"},
        {"sweep", "robust accuracy over radius and step count"},
        {"features", "first-block feature maps as PGM"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", common.config, "experiment JSON")->check(CLI::ExistingFile);
        sub->add_option("--seed", common.seed, "seed for every random stream");
        sub->add_option("--out", common.out, "output directory");
        sub->add_option("--samples", common.samples, "evaluation subset size (0 = all)");
        sub->callback([&chosen, n = std::string(name)] { chosen = n; });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }
    return run(chosen, common);
}
