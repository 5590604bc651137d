#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advlens/frequency.hpp"
#include "advlens/models.hpp"
#include "advlens/tensor.hpp"

namespace advlens::attacks {

struct AttackConfig {
    double epsilon = 8.0 / 255.0;  // ℓ∞ radius in [0,1] pixel units
    std::size_t n_iter = 10;
    std::optional<double> step_size;  // default 2.5·ε/n_iter
    bool random_start = true;
    std::size_t n_restarts = 1;
    frequency::MaskMode filter_mode = frequency::MaskMode::full;
    std::size_t low_corner = 0;   // 0 picks the scaled default
    std::size_t high_corner = 0;  // 0 picks the scaled default
    bool clamp_to_valid_range = true;
    // Re-project the filtered perturbation into the ε-ball and [0,1].
    bool post_filter_clip = false;
    std::uint64_t seed = 0;

    double alpha() const;
    void validate() const;  // std::invalid_argument
};

/// Per-example outcome of an untargeted attack.
struct AttackResult {
    Tensor adversarial;
    std::vector<int> labels;
    std::vector<int> clean_pred;
    std::vector<int> adv_pred;
    std::vector<std::uint8_t> success;  // adv_pred != clean_pred
    std::vector<double> linf;
    // [example][step]; step 0 is the clean loss, step t the best loss seen
    // so far: the clean loss, iterates 1..t of every restart and any
    // warm-start incumbent. The returned iterate is chosen among the latter
    // two only.
    std::vector<std::vector<double>> loss_trajectory;

    std::size_t size() const { return labels.size(); }
    double success_rate() const;
    double clean_accuracy() const;
    double robust_accuracy() const;
    std::vector<double> mean_trajectory() const;
};

/// Continue an earlier attack: start from `start` (no random start) and keep
/// `incumbent` as a candidate for the returned iterate.
struct WarmStart {
    Tensor start;
    Tensor incumbent;
};

/// Predictions and per-example cross-entropy, no tape.
struct Evaluation {
    std::vector<int> pred;
    std::vector<double> loss;
};
Evaluation evaluate(const Classifier& model, const Tensor& x, std::span<const int> labels);

// `first_id` offsets example indices used for per-example seeds, so a batch
// split across calls reproduces the unsplit result.
AttackResult fgsm(const Classifier& model, const Tensor& x0, std::span<const int> labels, const AttackConfig& cfg,
                  std::size_t first_id = 0);
AttackResult pgd(const Classifier& model, const Tensor& x0, std::span<const int> labels, const AttackConfig& cfg,
                 std::size_t first_id = 0, const std::optional<WarmStart>& warm = std::nullopt);

/// PGD, then x0 + IDCT(DCT(x_pgd − x0) ⊙ M) per channel. Success and ℓ∞ are
/// re-measured on the filtered images; the loss trajectory is PGD's.
AttackResult frequency_filtered_attack(const Classifier& model, const Tensor& x0, std::span<const int> labels,
                                       const AttackConfig& cfg, const frequency::FrequencyMask& mask,
                                       std::size_t first_id = 0);
/// The filtering half of the above, applied to an existing pgd result.
AttackResult apply_frequency_filter(const Classifier& model, const Tensor& x0, std::span<const int> labels,
                                    const AttackConfig& cfg, const frequency::FrequencyMask& mask, AttackResult pgd_result);
/// Mask from cfg.filter_mode and corners; plain pgd when the mode is full.
AttackResult run_attack(const Classifier& model, const Tensor& x0, std::span<const int> labels, const AttackConfig& cfg,
                        std::size_t first_id = 0);
frequency::FrequencyMask mask_for(const AttackConfig& cfg, std::size_t height, std::size_t width);

/// Fraction of indices whose prediction changed. Throws on length mismatch.
double attack_success_rate(std::span<const int> clean_preds, std::span<const int> adv_preds);
/// Fraction correct both before and after the attack.
double robust_accuracy(std::span<const int> clean_preds, std::span<const int> adv_preds, std::span<const int> labels);

/// Entry (i, j): examples crafted on source i, prediction change on target j
/// measured against j's clean predictions. FGSM by default.
std::vector<std::vector<double>> transfer_attack_matrix(const std::vector<Classifier>& models, const Tensor& x,
                                                        std::span<const int> labels, const AttackConfig& cfg,
                                                        bool use_fgsm = true);

/// Robust accuracy per (ε, steps). Each higher step count continues from the
/// previous cell's best iterate, which stays a candidate, so rows are
/// non-increasing in steps.
std::vector<std::vector<double>> radius_step_sweep(const Classifier& model, const Tensor& x, std::span<const int> labels,
                                                   const std::vector<double>& radii,
                                                   const std::vector<std::size_t>& step_counts, const AttackConfig& base);

/// Desk replacement for an ensemble evaluator: PGD-40 with 5 restarts plus
/// FGSM, keeping whichever flips the prediction.
inline constexpr const char* kStrongestAttackLabel = "PGD-40x5+FGSM (AutoAttack substitute)";
AttackResult strongest_attack(const Classifier& model, const Tensor& x0, std::span<const int> labels, double epsilon,
                              std::uint64_t seed, std::size_t first_id = 0);

/// Columns: example_id, clean_pred, adv_pred, label, linf_dist, success.
std::string attack_csv(const AttackResult& result, std::span<const std::size_t> ids = {});
/// Columns: step, mean_loss.
std::string trajectory_csv(const AttackResult& result);

}  // namespace advlens::attacks
