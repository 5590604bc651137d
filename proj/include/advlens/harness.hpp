#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "advlens/advtrain.hpp"
#include "advlens/attacks.hpp"
#include "advlens/dataset.hpp"
#include "advlens/models.hpp"
#include "advlens/smoothing.hpp"

namespace advlens::harness {

inline constexpr const char* kArtifactVersion = "0.1.0";

/// Invalid or inconsistent experiment configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Kind { train, advtrain, attack, transfer, freq_study, certify, sweep, feature_dump };
std::string to_string(Kind kind);
/// Accepts the CLI spellings too (freq-study, features).
Kind kind_from_string(const std::string& name);

/// A model to evaluate: a checkpoint, or an architecture initialized from
/// init_seed (useful for smoke runs).
struct ModelRef {
    std::string name;
    std::string checkpoint;
    std::optional<models::ModelConfig> config;
    std::uint64_t init_seed = 0;
};

struct DenoiserSetup {
    bool enabled = false;
    std::string checkpoint;  // load instead of training when set
    smoothing::DenoiserConfig config;
    smoothing::DenoiserTrainConfig train;
    std::size_t train_samples = 0;  // 0 means the whole training set
};

struct ExperimentConfig {
    Kind kind = Kind::attack;
    std::uint64_t seed = 0;
    std::size_t samples = 200;  // evaluation subset; 0 means everything
    std::string out = "advlens_out";

    nlohmann::json dataset;             // evaluation data, or training data for train kinds
    nlohmann::json train_dataset;       // denoiser training (certify); defaults to dataset
    nlohmann::json eval_dataset;        // held-out data for train kinds; defaults to dataset
    std::vector<ModelRef> models;       // evaluation kinds
    models::ModelConfig model;          // architecture for train kinds

    attacks::AttackConfig attack;  // n_iter defaults to 40 here
    std::vector<double> epsilons;  // attack / freq_study / transfer; defaults to {attack.epsilon}
    bool strongest = false;        // attack kind: PGD-40x5+FGSM instead of plain PGD
    bool transfer_fgsm = true;

    advtrain::TrainConfig train;
    std::size_t train_samples = 0;
    std::size_t eval_steps = 10;

    smoothing::SmoothingConfig smoothing;
    std::vector<double> radii{0.0, 0.125, 0.25, 0.5, 0.75, 1.0};
    DenoiserSetup denoiser;
    std::size_t noisy_draws = 20;

    std::vector<double> sweep_radii;
    std::vector<std::size_t> sweep_steps{1, 5, 10, 20, 40};

    std::size_t feature_index = 0;
    std::size_t feature_channels = 64;

    void validate() const;  // ConfigError
};

/// Parses the documented JSON schema; ConfigError on anything malformed.
/// Seeds of the sub-configs follow the top-level seed.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
/// Parses a JSON config file; ConfigError when unreadable or malformed.
nlohmann::json read_config_file(const std::string& path);

struct ManifestEntry {
    std::string file;  // relative to the output directory
    std::string sha256;
    std::uint64_t bytes = 0;
};

struct Report {
    std::string dir;
    nlohmann::json metadata;
    nlohmann::json results;
    std::vector<ManifestEntry> manifest;
};

/// Runs one experiment end to end and writes report.json into cfg.out.
/// Throws ConfigError, data::DataError or CheckpointError.
Report run_experiment(const ExperimentConfig& cfg);

/// Files under dir whose manifest checksum no longer matches.
std::vector<std::string> verify_report(const std::string& dir);

struct NamedModel {
    std::string name;
    models::Network network;
};

/// One row per (model, ε): ASR with the PGD perturbation kept whole,
/// low-pass filtered and high-pass filtered.
struct FreqRow {
    std::string model;
    double epsilon = 0.0;
    double full = 0.0;
    double low = 0.0;
    double high = 0.0;
};
std::vector<FreqRow> freq_study(const std::vector<NamedModel>& models, const Tensor& x, std::span<const int> labels,
                                const attacks::AttackConfig& base, const std::vector<double>& epsilons);
std::string freq_study_csv(const std::vector<FreqRow>& rows);

/// First-block channels of images[0] as PGMs channel_XX.pgm, at most
/// max_channels. Returns the file names written.
std::vector<std::string> dump_feature_maps(const models::Network& model, const Tensor& image, const std::string& out_dir,
                                           std::size_t max_channels = 64);

/// Mean best-so-far loss per PGD step (columns step, mean_loss).
std::string loss_trajectory_report(const Classifier& model, const Tensor& x, std::span<const int> labels,
                                   const attacks::AttackConfig& cfg,
                                   const std::optional<attacks::WarmStart>& warm = std::nullopt);

/// Rows are models, columns the ε values.
std::string model_by_epsilon_csv(const std::vector<std::string>& names, const std::vector<double>& epsilons,
                                 const std::vector<std::vector<double>>& values);

}  // namespace advlens::harness
