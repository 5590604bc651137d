#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advlens/models.hpp"
#include "advlens/tensor.hpp"

namespace advlens::smoothing {

struct SmoothingConfig {
    double sigma = 0.25;   // noise std in [0,1] pixel units
    std::size_t n0 = 32;   // selection samples
    std::size_t n = 1000;  // estimation samples
    double alpha = 0.001;  // 1 − confidence
    std::size_t batch_size = 100;
    std::uint64_t seed = 0;
    // Also upper-bound p_B instead of taking 1 − p_A.
    bool exact_radius = false;

    void validate() const;  // std::invalid_argument
};

struct DenoiserConfig {
    std::size_t layers = 5;
    std::size_t width = 32;
    std::size_t kernel = 3;
    bool residual = true;  // network predicts the noise, which is subtracted

    void validate() const;
};

/// DnCNN-style conv stack. The last conv starts at zero, so a fresh residual
/// denoiser is the identity map.
struct Denoiser {
    DenoiserConfig config;
    std::size_t channels = 3;
    models::ParameterSet params;

    Tensor operator()(const Tensor& x) const;
};

std::vector<models::ParameterSpec> denoiser_manifest(const DenoiserConfig& cfg, std::size_t channels);
Denoiser init_denoiser(const DenoiserConfig& cfg, std::size_t channels, std::uint64_t seed);

/// base ∘ denoiser as one classifier; base alone when denoiser is null.
Classifier denoised_classifier(const Classifier& base, const Denoiser* denoiser);

struct DenoiserTrainConfig {
    double sigma = 0.25;
    std::size_t epochs = 5;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

/// Mean over images of CE(base(D(x + δ)), argmax base(x)) with δ drawn from
/// noise_seed and the image index only.
double stability_loss(const Classifier& base, const Denoiser& denoiser, const Tensor& images, double sigma,
                      std::uint64_t noise_seed);

/// Adam on the stability objective; base must not require gradients.
/// Returns the mean training loss per epoch.
std::vector<double> train_denoiser(const Classifier& base, Denoiser& denoiser, const Tensor& images,
                                   const DenoiserTrainConfig& cfg);

/// Gaussian noise for (input_id, stream, sample): the same draw regardless of
/// batching or thread count.
std::vector<double> noise_sample(std::uint64_t seed, std::uint64_t input_id, std::uint64_t stream, std::uint64_t sample,
                                 std::size_t count, double sigma);

/// Class counts of model(x + δ) over `samples` draws. x is one image [C,H,W]
/// or [1,C,H,W].
std::vector<std::size_t> sample_counts(const Classifier& model, const Tensor& x, std::size_t samples, double sigma,
                                       std::size_t batch_size, std::uint64_t seed, std::uint64_t input_id,
                                       std::uint64_t stream);

struct Prediction {
    int predicted = -1;
    bool abstain = true;
};

/// Majority of n0 draws selects c_A; n fresh draws must reject p = 1/2 for
/// c_A with a two-sided binomial test at level alpha, otherwise abstain.
/// Ties go to the lowest class index.
Prediction smoothed_predict(const Classifier& base, const Denoiser* denoiser, const Tensor& x, const SmoothingConfig& cfg,
                            std::uint64_t input_id = 0);

struct CertificationResult {
    int predicted = -1;
    double pa_lower = 0.0;
    double pb_upper = 1.0;
    double radius = 0.0;  // NaN when abstaining
    bool abstain = true;
};

/// σ/2 (Φ⁻¹(p_A) − Φ⁻¹(p_B)).
double certified_radius(double sigma, double pa, double pb);

CertificationResult certify(const Classifier& base, const Denoiser* denoiser, const Tensor& x, const SmoothingConfig& cfg,
                            std::uint64_t input_id = 0);

struct CertificationReport {
    std::vector<CertificationResult> results;
    std::vector<double> radii;
    std::vector<double> certified_accuracy;
};

/// Certified accuracy at r: fraction of examples predicted correctly without
/// abstaining and with radius >= r. Radii must be ascending.
CertificationReport certified_accuracy_curve(const Classifier& base, const Denoiser* denoiser, const Tensor& images,
                                             std::span<const int> labels, const SmoothingConfig& cfg,
                                             const std::vector<double>& radii,
                                             std::span<const std::size_t> ids = {});
std::vector<double> curve_from_results(const std::vector<CertificationResult>& results, std::span<const int> labels,
                                       const std::vector<double>& radii);

/// Columns: example_id, label, predicted, pA_bound, radius, abstain.
std::string certification_csv(const std::vector<CertificationResult>& results, std::span<const int> labels,
                              std::span<const std::size_t> ids = {});
/// Columns: radius, certified_accuracy.
std::string curve_csv(const std::vector<double>& radii, const std::vector<double>& accuracy);

/// Fraction of (image, draw) pairs that base ∘ denoiser labels correctly
/// under a single Gaussian draw each.
double noisy_accuracy(const Classifier& base, const Denoiser* denoiser, const Tensor& images, std::span<const int> labels,
                      double sigma, std::size_t draws, std::uint64_t seed, std::size_t batch_size = 100);
/// Fraction of images smoothed_predict labels correctly without abstaining.
double smoothed_accuracy(const Classifier& base, const Denoiser* denoiser, const Tensor& images, std::span<const int> labels,
                         const SmoothingConfig& cfg, std::span<const std::size_t> ids = {});

/// ADVLENS-CKPT-1 container with kind "denoiser"; CheckpointError on load.
void save_denoiser(const std::string& path, const Denoiser& denoiser, std::uint64_t seed);
Denoiser load_denoiser(const std::string& path);

}  // namespace advlens::smoothing
