#include "advlens/advtrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

#include "advlens/attacks.hpp"
#include "advlens/ops.hpp"
#include "advlens/optim.hpp"
#include "advlens/parallel.hpp"
#include "advlens/rng.hpp"

namespace advlens::advtrain {

namespace {

constexpr std::uint64_t kOrderKey = 0x0DE5ULL;
constexpr std::uint64_t kFlipKey = 0xF11FULL;
constexpr std::uint64_t kInnerKey = 0x1EEDULL;

std::size_t correct(const Tensor& logits, std::span<const int> labels) {
    const auto pred = argmax_rows(logits);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += pred[i] == labels[i];
    return ok;
}

// Gathers examples order[lo..hi), mirroring the last axis where flipped.
Tensor gather(const Tensor& images, const std::vector<std::size_t>& order, std::size_t lo, std::size_t hi,
              const std::vector<std::uint8_t>& flip) {
    const std::size_t d = images.numel() / images.size(0);
    const std::size_t w = images.size(-1);
    const auto src = images.data();
    std::vector<double> out((hi - lo) * d);
    for (std::size_t i = lo; i < hi; ++i) {
        const double* in = src.data() + order[i] * d;
        double* dst = out.data() + (i - lo) * d;
        if (flip[i]) {
            for (std::size_t r = 0; r < d / w; ++r)
                for (std::size_t c = 0; c < w; ++c) dst[r * w + c] = in[r * w + (w - 1 - c)];
        } else {
            std::copy(in, in + d, dst);
        }
    }
    Shape s = images.shape();
    s[0] = hi - lo;
    return Tensor(s, std::move(out));
}

std::string num(double v) { return fmt::format("{}", v); }

}  // namespace

std::string to_string(Method method) {
    switch (method) {
        case Method::natural:
            return "natural";
        case Method::pgd_at:
            return "pgd_at";
        case Method::trades:
            return "trades";
    }
    return "unknown";
}

Method method_from_string(const std::string& name) {
    if (name == "natural") return Method::natural;
    if (name == "pgd_at" || name == "pgd") return Method::pgd_at;
    if (name == "trades") return Method::trades;
    throw std::invalid_argument("unknown training method '" + name + "'");
}

double TrainConfig::inner_alpha() const {
    if (inner_step_size) return *inner_step_size;
    return 2.5 * epsilon / static_cast<double>(std::max<std::size_t>(inner_steps, 1));
}

double TrainConfig::lr_at(std::size_t epoch) const {
    double lr_now = lr;
    for (std::size_t e : decay_epochs)
        if (epoch >= e) lr_now *= decay_factor;
    return lr_now;
}

double TrainConfig::weight_decay_for(models::Family family) const {
    if (weight_decay) return *weight_decay;
    return family == models::Family::cnn ? 5e-4 : 2e-4;
}

void TrainConfig::validate() const {
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw std::invalid_argument("train: epsilon must be >= 0");
    if (method == Method::trades && !(beta > 0)) throw std::invalid_argument("train: TRADES beta must be > 0");
    if (method != Method::natural && inner_steps < 1) throw std::invalid_argument("train: inner_steps must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("train: lr must be > 0");
    if (momentum < 0 || momentum >= 1) throw std::invalid_argument("train: momentum must lie in [0, 1)");
}

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
    const Tensor lp = log_softmax(p_logits, 1);
    const Tensor lq = log_softmax(q_logits, 1);
    return mean(sum(mul(exp(lp), sub(lp, lq)), 1));
}

Tensor trades_loss(const Tensor& clean_logits, const Tensor& adv_logits, std::span<const int> labels, double beta) {
    return add(cross_entropy(clean_logits, labels), mul_scalar(kl_divergence(clean_logits, adv_logits), beta));
}

Tensor trades_inner_max(const Classifier& model, const Tensor& x, double epsilon, std::size_t steps, double alpha,
                        std::uint64_t seed, std::size_t first_id) {
    const std::size_t n = x.size(0), d = x.numel() / n;
    const auto base = x.data();
    std::vector<double> out(x.numel());
    for_each_chunk(n, 16, [&](std::size_t lo, std::size_t hi) {
        Shape s = x.shape();
        s[0] = hi - lo;
        const std::vector<double> x0(base.begin() + lo * d, base.begin() + hi * d);
        Tensor clean_logits;
        {
            NoGradScope no_grad;
            clean_logits = model(Tensor(s, x0));
        }
        std::vector<double> xa(x0);
        if (epsilon > 0) {
            std::normal_distribution<double> nd(0.0, 1.0);
            for (std::size_t i = 0; i < hi - lo; ++i) {
                Rng rng = make_rng(seed, {first_id + lo + i, kInnerKey});
                for (std::size_t k = 0; k < d; ++k) {
                    double& v = xa[i * d + k];
                    v = std::clamp(v + 0.001 * nd(rng), x0[i * d + k] - epsilon, x0[i * d + k] + epsilon);
                    v = std::clamp(v, 0.0, 1.0);
                }
            }
        }
        for (std::size_t t = 0; t < steps && epsilon > 0; ++t) {
            Tensor xv(s, xa, true);
            Tape tape;
            const Tensor lp = log_softmax(clean_logits, 1);
            const Tensor kl = sum(mul(exp(lp), sub(lp, log_softmax(model(xv), 1))));
            if (!kl.requires_grad()) break;
            tape.backward(kl);
            const auto g = xv.grad();
            for (std::size_t k = 0; k < xa.size(); ++k) {
                const double step = g[k] > 0 ? alpha : (g[k] < 0 ? -alpha : 0.0);
                double v = std::clamp(xa[k] + step, x0[k] - epsilon, x0[k] + epsilon);
                xa[k] = std::clamp(v, 0.0, 1.0);
            }
        }
        std::copy(xa.begin(), xa.end(), out.begin() + lo * d);
    });
    return Tensor(x.shape(), std::move(out));
}

TrainResult train(const models::ModelConfig& model, const Tensor& images, std::span<const int> labels,
                  const TrainConfig& cfg, const std::optional<models::ParameterSet>& init) {
    cfg.validate();
    model.validate();
    if (images.rank() != 4 || images.size(0) != labels.size() || labels.empty()) {
        throw std::invalid_argument("train: images " + shape_str(images.shape()) + " vs " + std::to_string(labels.size()) +
                                    " labels");
    }
    TrainResult result;
    result.params = init ? init->clone(true) : models::init_parameters(model, cfg.seed);
    models::check_manifest(model, result.params);
    result.params.set_requires_grad(true);
    optim::Sgd sgd(cfg.momentum, cfg.weight_decay_for(model.family));

    const std::size_t n = labels.size();
    attacks::AttackConfig inner;
    inner.epsilon = cfg.epsilon;
    inner.n_iter = std::max<std::size_t>(cfg.inner_steps, 1);
    inner.step_size = cfg.inner_alpha();
    inner.random_start = true;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng order_rng = make_rng(cfg.seed, {epoch, kOrderKey});
        std::shuffle(order.begin(), order.end(), order_rng);
        std::vector<std::uint8_t> flip(n, 0);
        if (cfg.horizontal_flip) {
            for (std::size_t i = 0; i < n; ++i) flip[i] = make_rng(cfg.seed, {epoch, i, kFlipKey})() & 1U;
        }
        const double lr = cfg.lr_at(epoch);
        double loss_sum = 0.0;
        std::size_t clean_ok = 0, used_ok = 0;

        for (std::size_t lo = 0, batch = 0; lo < n; lo += cfg.batch_size, ++batch) {
            const std::size_t hi = std::min(n, lo + cfg.batch_size);
            const Tensor x = gather(images, order, lo, hi, flip);
            std::vector<int> y(hi - lo);
            for (std::size_t i = lo; i < hi; ++i) y[i - lo] = labels[order[i]];
            const std::uint64_t batch_seed = derive_seed(cfg.seed, {epoch, batch, kInnerKey});

            Tensor x_used = x;
            if (cfg.method != Method::natural) {
                const models::Network frozen{model, result.params.clone(false)};
                const auto f = frozen.classifier();
                if (cfg.method == Method::pgd_at) {
                    inner.seed = batch_seed;
                    x_used = attacks::pgd(f, x, y, inner).adversarial;
                } else {
                    x_used = trades_inner_max(f, x, cfg.epsilon, cfg.inner_steps, cfg.inner_alpha(), batch_seed);
                }
            }

            result.params.zero_grad();
            {
                Tape tape;
                Tensor loss;
                if (cfg.method == Method::trades) {
                    const Tensor clean_logits = models::forward(x, result.params, model);
                    const Tensor adv_logits = models::forward(x_used, result.params, model);
                    loss = trades_loss(clean_logits, adv_logits, y, cfg.beta);
                    clean_ok += correct(clean_logits, y);
                    used_ok += correct(adv_logits, y);
                } else {
                    const Tensor logits = models::forward(x_used, result.params, model);
                    loss = cross_entropy(logits, y);
                    used_ok += correct(logits, y);
                    if (cfg.method == Method::natural) {
                        clean_ok += correct(logits, y);
                    } else {
                        NoGradScope no_grad;
                        clean_ok += correct(models::forward(x, result.params, model), y);
                    }
                }
                tape.backward(loss);
                loss_sum += loss.item() * static_cast<double>(hi - lo);
            }
            sgd.step(result.params, lr);
        }
        result.history.push_back({epoch, loss_sum / static_cast<double>(n), static_cast<double>(clean_ok) / static_cast<double>(n),
                                  static_cast<double>(used_ok) / static_cast<double>(n)});
    }
    result.params.set_requires_grad(false);
    result.params.zero_grad();
    return result;
}

TrainResult natural_train(const models::ModelConfig& model, const Tensor& images, std::span<const int> labels,
                          const TrainConfig& cfg) {
    if (cfg.method != Method::natural) throw std::invalid_argument("natural_train: config method is " + to_string(cfg.method));
    return train(model, images, labels, cfg);
}

TrainResult pgd_adversarial_train(const models::ModelConfig& model, const Tensor& images, std::span<const int> labels,
                                  const TrainConfig& cfg) {
    if (cfg.method != Method::pgd_at) {
        throw std::invalid_argument("pgd_adversarial_train: config method is " + to_string(cfg.method));
    }
    return train(model, images, labels, cfg);
}

TrainResult trades_train(const models::ModelConfig& model, const Tensor& images, std::span<const int> labels,
                         const TrainConfig& cfg) {
    if (cfg.method != Method::trades) throw std::invalid_argument("trades_train: config method is " + to_string(cfg.method));
    return train(model, images, labels, cfg);
}

RobustEval evaluate_robust_accuracy(const Classifier& model, const Tensor& images, std::span<const int> labels,
                                    double epsilon, std::size_t steps, std::uint64_t seed) {
    attacks::AttackConfig cfg;
    cfg.epsilon = epsilon;
    cfg.n_iter = steps;
    cfg.seed = seed;
    const auto r = attacks::pgd(model, images, labels, cfg);
    return {r.clean_accuracy(), r.robust_accuracy()};
}

std::string history_csv(const std::vector<EpochStats>& history) {
    std::string out = "epoch,train_loss,clean_acc,robust_acc\n";
    for (const auto& h : history) {
        out += fmt::format("{},{},{},{}\n", h.epoch, num(h.train_loss), num(h.clean_acc), num(h.robust_acc));
    }
    return out;
}

}  // namespace advlens::advtrain
