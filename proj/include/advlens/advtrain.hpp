#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advlens/models.hpp"
#include "advlens/tensor.hpp"

namespace advlens::advtrain {

enum class Method { natural, pgd_at, trades };

std::string to_string(Method method);
Method method_from_string(const std::string& name);

struct TrainConfig {
    Method method = Method::natural;
    double epsilon = 8.0 / 255.0;
    std::size_t inner_steps = 7;
    std::optional<double> inner_step_size;  // default 2.5·ε/steps
    double beta = 6.0;                      // TRADES
    std::size_t epochs = 20;
    std::size_t batch_size = 128;
    double lr = 0.1;
    std::vector<std::size_t> decay_epochs{15, 18};
    double decay_factor = 0.1;
    double momentum = 0.9;
    std::optional<double> weight_decay;  // default 5e-4 for cnn, 2e-4 otherwise
    bool horizontal_flip = false;
    std::uint64_t seed = 0;

    double inner_alpha() const;
    // Piecewise constant: lr times decay_factor per decay epoch reached.
    double lr_at(std::size_t epoch) const;
    double weight_decay_for(models::Family family) const;
    void validate() const;  // std::invalid_argument
};

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double clean_acc = 0.0;
    // Accuracy on the inputs the update was computed on (the clean batch for
    // natural training).
    double robust_acc = 0.0;
};

struct TrainResult {
    models::ParameterSet params;
    std::vector<EpochStats> history;
};

/// Any method; params start from init when given, else init_parameters(seed).
TrainResult train(const models::ModelConfig& model, const Tensor& images, std::span<const int> labels,
                  const TrainConfig& cfg, const std::optional<models::ParameterSet>& init = std::nullopt);
TrainResult natural_train(const models::ModelConfig& model, const Tensor& images, std::span<const int> labels,
                          const TrainConfig& cfg);
TrainResult pgd_adversarial_train(const models::ModelConfig& model, const Tensor& images, std::span<const int> labels,
                                  const TrainConfig& cfg);
TrainResult trades_train(const models::ModelConfig& model, const Tensor& images, std::span<const int> labels,
                         const TrainConfig& cfg);

/// Batch mean of KL(softmax(p_logits) ‖ softmax(q_logits)).
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits);
/// CE(clean, y) + β·KL(softmax clean ‖ softmax adv).
Tensor trades_loss(const Tensor& clean_logits, const Tensor& adv_logits, std::span<const int> labels, double beta);

/// TRADES inner maximization of the KL term from x + 0.001·N(0, 1).
Tensor trades_inner_max(const Classifier& model, const Tensor& x, double epsilon, std::size_t steps, double alpha,
                        std::uint64_t seed, std::size_t first_id = 0);

struct RobustEval {
    double clean_acc = 0.0;
    double robust_acc = 0.0;
};

/// Clean accuracy and accuracy under a random-start PGD of `steps` steps.
RobustEval evaluate_robust_accuracy(const Classifier& model, const Tensor& images, std::span<const int> labels,
                                    double epsilon, std::size_t steps = 10, std::uint64_t seed = 0);

/// Columns: epoch, train_loss, clean_acc, robust_acc.
std::string history_csv(const std::vector<EpochStats>& history);

}  // namespace advlens::advtrain
