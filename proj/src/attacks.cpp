#include "advlens/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

#include "advlens/ops.hpp"
#include "advlens/parallel.hpp"
#include "advlens/rng.hpp"

namespace advlens::attacks {

namespace {

// Examples per independent attack unit. Per-example results do not depend
// on it; it only sets the granularity of parallel work.
constexpr std::size_t kChunk = 16;

struct Key {
    bool wrong = false;
    double loss = -std::numeric_limits<double>::infinity();
    bool beats(const Key& other) const { return wrong != other.wrong ? wrong : loss > other.loss; }
};

std::size_t per_example(const Tensor& x) {
    if (x.rank() < 2 || x.size(0) == 0) throw std::invalid_argument("attack: expected a non-empty batch, got " + shape_str(x.shape()));
    return x.numel() / x.size(0);
}

Shape batch_shape(const Tensor& x, std::size_t n) {
    Shape s = x.shape();
    s[0] = n;
    return s;
}

Tensor take_rows(const Tensor& x, std::size_t lo, std::size_t hi) {
    const std::size_t d = per_example(x);
    const auto src = x.data();
    return Tensor(batch_shape(x, hi - lo), std::vector<double>(src.begin() + lo * d, src.begin() + hi * d));
}

void check_labels(const Tensor& x, std::span<const int> labels) {
    if (labels.size() != x.size(0)) {
        throw std::invalid_argument("attack: " + std::to_string(labels.size()) + " labels for batch " + shape_str(x.shape()));
    }
}

struct Pass {
    std::vector<int> pred;
    std::vector<double> loss;
    std::vector<double> grad;
};

Pass forward_with_grad(const Classifier& model, const Tensor& x, std::span<const int> labels) {
    Tensor xv(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
    Tape tape;
    const Tensor logits = model(xv);
    const Tensor per = cross_entropy(logits, labels, Reduction::none);
    const Tensor total = sum(per);
    Pass out{argmax_rows(logits), std::vector<double>(per.data().begin(), per.data().end()), {}};
    if (total.requires_grad()) {
        tape.backward(total);
        out.grad.assign(xv.grad().begin(), xv.grad().end());
    } else {
        out.grad.assign(x.numel(), 0.0);
    }
    return out;
}

Evaluation evaluate_chunk(const Classifier& model, const Tensor& x, std::span<const int> labels) {
    NoGradScope no_grad;
    const Tensor logits = model(x);
    const Tensor per = cross_entropy(logits, labels, Reduction::none);
    return {argmax_rows(logits), std::vector<double>(per.data().begin(), per.data().end())};
}

double linf_distance(const double* a, const double* b, std::size_t d) {
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

void finalize(AttackResult& r, const Tensor& x0) {
    const std::size_t n = r.labels.size(), d = per_example(x0);
    r.success.assign(n, 0);
    r.linf.assign(n, 0.0);
    const auto a = r.adversarial.data();
    const auto b = x0.data();
    for (std::size_t i = 0; i < n; ++i) {
        r.success[i] = r.adv_pred[i] != r.clean_pred[i];
        r.linf[i] = linf_distance(a.data() + i * d, b.data() + i * d, d);
    }
}

// PGD on examples [lo, hi) of the full batch; writes into out.
void pgd_chunk(const Classifier& model, const Tensor& x0_all, std::span<const int> labels_all, const AttackConfig& cfg,
               std::size_t first_id, const std::optional<WarmStart>& warm, std::size_t lo, std::size_t hi,
               std::vector<double>& adv, AttackResult& out) {
    const std::size_t n = hi - lo, d = per_example(x0_all);
    const Tensor x0 = take_rows(x0_all, lo, hi);
    const std::span<const int> labels = labels_all.subspan(lo, n);
    const auto base = x0.data();
    const double eps = cfg.epsilon, alpha = cfg.alpha();

    const Evaluation clean = evaluate_chunk(model, x0, labels);
    std::vector<Key> best(n);
    std::vector<int> best_pred(n, 0);
    std::vector<double> best_x(base.begin(), base.end());
    std::vector<double> floor_loss(n, -std::numeric_limits<double>::infinity());
    std::vector<std::vector<double>> step_max(cfg.n_iter + 1, std::vector<double>(n, -std::numeric_limits<double>::infinity()));

    const auto consider = [&](const std::vector<double>& x, std::size_t i, int pred, double loss) {
        const Key key{pred != labels[i], loss};
        if (key.beats(best[i])) {
            best[i] = key;
            best_pred[i] = pred;
            std::copy(x.begin() + i * d, x.begin() + (i + 1) * d, best_x.begin() + i * d);
        }
    };

    if (warm) {
        const Tensor inc = take_rows(warm->incumbent, lo, hi);
        const Evaluation e = evaluate_chunk(model, inc, labels);
        const std::vector<double> xi(inc.data().begin(), inc.data().end());
        for (std::size_t i = 0; i < n; ++i) {
            consider(xi, i, e.pred[i], e.loss[i]);
            floor_loss[i] = e.loss[i];
        }
    }

    const std::size_t restarts = warm ? 1 : cfg.n_restarts;
    for (std::size_t r = 0; r < restarts; ++r) {
        std::vector<double> x;
        if (warm) {
            const Tensor s = take_rows(warm->start, lo, hi);
            x.assign(s.data().begin(), s.data().end());
        } else {
            x.assign(base.begin(), base.end());
            if (cfg.random_start && eps > 0) {
                std::uniform_real_distribution<double> u(-eps, eps);
                for (std::size_t i = 0; i < n; ++i) {
                    Rng rng = make_rng(cfg.seed, {first_id + lo + i, r, 0x5157ULL});
                    for (std::size_t k = 0; k < d; ++k) x[i * d + k] += u(rng);
                }
            }
            if (cfg.clamp_to_valid_range) {
                for (auto& v : x) v = std::clamp(v, 0.0, 1.0);
            }
        }
        for (std::size_t t = 0; t <= cfg.n_iter; ++t) {
            const Tensor xt(x0.shape(), x);
            Pass pass;
            if (t < cfg.n_iter) {
                pass = forward_with_grad(model, xt, labels);
            } else {
                Evaluation e = evaluate_chunk(model, xt, labels);
                pass.pred = std::move(e.pred);
                pass.loss = std::move(e.loss);
            }
            if (t >= 1) {
                for (std::size_t i = 0; i < n; ++i) {
                    consider(x, i, pass.pred[i], pass.loss[i]);
                    step_max[t][i] = std::max(step_max[t][i], pass.loss[i]);
                }
            }
            if (t == cfg.n_iter) break;
            for (std::size_t k = 0; k < x.size(); ++k) {
                const double g = pass.grad[k];
                const double s = g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0);
                double v = x[k] + alpha * s;
                v = std::min(std::max(v, base[k] - eps), base[k] + eps);
                if (cfg.clamp_to_valid_range) v = std::clamp(v, 0.0, 1.0);
                x[k] = v;
            }
        }
    }

    std::copy(best_x.begin(), best_x.end(), adv.begin() + lo * d);
    for (std::size_t i = 0; i < n; ++i) {
        out.clean_pred[lo + i] = clean.pred[i];
        out.adv_pred[lo + i] = best_pred[i];
        auto& traj = out.loss_trajectory[lo + i];
        traj.assign(cfg.n_iter + 1, 0.0);
        traj[0] = clean.loss[i];
        double running = std::max(floor_loss[i], clean.loss[i]);  // step 0 counts as seen
        for (std::size_t t = 1; t <= cfg.n_iter; ++t) {
            running = std::max(running, step_max[t][i]);
            traj[t] = running;
        }
    }
}

std::string num(double v) { return fmt::format("{}", v); }

}  // namespace

double AttackConfig::alpha() const {
    if (step_size) return *step_size;
    return 2.5 * epsilon / static_cast<double>(std::max<std::size_t>(n_iter, 1));
}

void AttackConfig::validate() const {
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw std::invalid_argument("attack: epsilon must be finite and >= 0");
    if (n_iter < 1) throw std::invalid_argument("attack: n_iter must be >= 1");
    if (n_restarts < 1) throw std::invalid_argument("attack: n_restarts must be >= 1");
    if (step_size && (!std::isfinite(*step_size) || *step_size < 0)) throw std::invalid_argument("attack: step size must be >= 0");
    if (n_iter > 1 && epsilon > 0 && !(alpha() > 0)) throw std::invalid_argument("attack: step size must be > 0 when n_iter > 1");
}

double AttackResult::success_rate() const { return attack_success_rate(clean_pred, adv_pred); }

double AttackResult::clean_accuracy() const {
    if (labels.empty()) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += clean_pred[i] == labels[i];
    return static_cast<double>(ok) / static_cast<double>(labels.size());
}

double AttackResult::robust_accuracy() const { return attacks::robust_accuracy(clean_pred, adv_pred, labels); }

std::vector<double> AttackResult::mean_trajectory() const {
    if (loss_trajectory.empty()) return {};
    std::vector<double> mean(loss_trajectory.front().size(), 0.0);
    for (const auto& traj : loss_trajectory)
        for (std::size_t t = 0; t < mean.size(); ++t) mean[t] += traj[t];
    for (auto& v : mean) v /= static_cast<double>(loss_trajectory.size());
    return mean;
}

Evaluation evaluate(const Classifier& model, const Tensor& x, std::span<const int> labels) {
    check_labels(x, labels);
    const std::size_t n = x.size(0);
    Evaluation out{std::vector<int>(n), std::vector<double>(n)};
    for_each_chunk(n, kChunk, [&](std::size_t lo, std::size_t hi) {
        const Evaluation e = evaluate_chunk(model, take_rows(x, lo, hi), labels.subspan(lo, hi - lo));
        std::copy(e.pred.begin(), e.pred.end(), out.pred.begin() + lo);
        std::copy(e.loss.begin(), e.loss.end(), out.loss.begin() + lo);
    });
    return out;
}

AttackResult pgd(const Classifier& model, const Tensor& x0, std::span<const int> labels, const AttackConfig& cfg,
                 std::size_t first_id, const std::optional<WarmStart>& warm) {
    cfg.validate();
    check_labels(x0, labels);
    if (warm && (warm->start.shape() != x0.shape() || warm->incumbent.shape() != x0.shape())) {
        throw std::invalid_argument("pgd: warm start must match the batch shape " + shape_str(x0.shape()));
    }
    const std::size_t n = x0.size(0);
    AttackResult out;
    out.labels.assign(labels.begin(), labels.end());
    out.clean_pred.assign(n, 0);
    out.adv_pred.assign(n, 0);
    out.loss_trajectory.assign(n, {});
    std::vector<double> adv(x0.numel());
    for_each_chunk(n, kChunk, [&](std::size_t lo, std::size_t hi) {
        pgd_chunk(model, x0, labels, cfg, first_id, warm, lo, hi, adv, out);
    });
    out.adversarial = Tensor(x0.shape(), std::move(adv));
    finalize(out, x0);
    return out;
}

AttackResult fgsm(const Classifier& model, const Tensor& x0, std::span<const int> labels, const AttackConfig& cfg,
                  std::size_t first_id) {
    AttackConfig one = cfg;
    one.n_iter = 1;
    one.step_size = cfg.epsilon;
    one.random_start = false;
    one.n_restarts = 1;
    return pgd(model, x0, labels, one, first_id);
}

frequency::FrequencyMask mask_for(const AttackConfig& cfg, std::size_t height, std::size_t width) {
    using frequency::MaskMode;
    switch (cfg.filter_mode) {
        case MaskMode::low:
            return frequency::make_mask(height, width, MaskMode::low,
                                        cfg.low_corner ? cfg.low_corner : frequency::default_corner(height, width, MaskMode::low));
        case MaskMode::high:
            return frequency::make_mask(height, width, MaskMode::high,
                                        cfg.high_corner ? cfg.high_corner : frequency::default_corner(height, width, MaskMode::high));
        case MaskMode::full:
            return frequency::make_mask(height, width, MaskMode::full);
        case MaskMode::custom:
            break;
    }
    throw std::invalid_argument("attack: custom filter masks must be passed explicitly");
}

AttackResult apply_frequency_filter(const Classifier& model, const Tensor& x0, std::span<const int> labels,
                                    const AttackConfig& cfg, const frequency::FrequencyMask& mask, AttackResult r) {
    if (x0.rank() != 4 || x0.size(2) != mask.height || x0.size(3) != mask.width) {
        throw std::invalid_argument("frequency filter: mask " + std::to_string(mask.height) + "x" +
                                    std::to_string(mask.width) + " does not match images " + shape_str(x0.shape()));
    }
    if (mask.count() == mask.height * mask.width) return r;  // identity filter, keep x_pgd bit-exact

    const auto base = x0.data();
    const Tensor delta = sub(r.adversarial, x0);
    const Tensor kept = frequency::filter(delta, mask);
    std::vector<double> x(x0.numel());
    for (std::size_t k = 0; k < x.size(); ++k) {
        double v = base[k] + kept[k];
        if (cfg.post_filter_clip) {
            v = std::min(std::max(v, base[k] - cfg.epsilon), base[k] + cfg.epsilon);
            if (cfg.clamp_to_valid_range) v = std::clamp(v, 0.0, 1.0);
        }
        x[k] = v;
    }
    r.adversarial = Tensor(x0.shape(), std::move(x));
    r.adv_pred = evaluate(model, r.adversarial, labels).pred;
    finalize(r, x0);
    return r;
}

AttackResult frequency_filtered_attack(const Classifier& model, const Tensor& x0, std::span<const int> labels,
                                       const AttackConfig& cfg, const frequency::FrequencyMask& mask, std::size_t first_id) {
    if (x0.rank() != 4 || x0.size(2) != mask.height || x0.size(3) != mask.width) {
        throw std::invalid_argument("frequency_filtered_attack: mask " + std::to_string(mask.height) + "x" +
                                    std::to_string(mask.width) + " does not match images " + shape_str(x0.shape()));
    }
    return apply_frequency_filter(model, x0, labels, cfg, mask, pgd(model, x0, labels, cfg, first_id));
}

AttackResult run_attack(const Classifier& model, const Tensor& x0, std::span<const int> labels, const AttackConfig& cfg,
                        std::size_t first_id) {
    if (cfg.filter_mode == frequency::MaskMode::full) return pgd(model, x0, labels, cfg, first_id);
    if (x0.rank() != 4) throw std::invalid_argument("run_attack: expected B×C×H×W images, got " + shape_str(x0.shape()));
    return frequency_filtered_attack(model, x0, labels, cfg, mask_for(cfg, x0.size(2), x0.size(3)), first_id);
}

double attack_success_rate(std::span<const int> clean_preds, std::span<const int> adv_preds) {
    if (clean_preds.size() != adv_preds.size()) {
        throw std::invalid_argument("attack_success_rate: " + std::to_string(clean_preds.size()) + " clean vs " +
                                    std::to_string(adv_preds.size()) + " adversarial predictions");
    }
    if (clean_preds.empty()) return 0.0;
    std::size_t flipped = 0;
    for (std::size_t i = 0; i < clean_preds.size(); ++i) flipped += clean_preds[i] != adv_preds[i];
    return static_cast<double>(flipped) / static_cast<double>(clean_preds.size());
}

double robust_accuracy(std::span<const int> clean_preds, std::span<const int> adv_preds, std::span<const int> labels) {
    if (clean_preds.size() != adv_preds.size() || clean_preds.size() != labels.size()) {
        throw std::invalid_argument("robust_accuracy: length mismatch");
    }
    if (labels.empty()) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += clean_preds[i] == labels[i] && adv_preds[i] == labels[i];
    return static_cast<double>(ok) / static_cast<double>(labels.size());
}

std::vector<std::vector<double>> transfer_attack_matrix(const std::vector<Classifier>& models, const Tensor& x,
                                                        std::span<const int> labels, const AttackConfig& cfg, bool use_fgsm) {
    if (models.empty()) throw std::invalid_argument("transfer_attack_matrix: need at least one model");
    std::vector<std::vector<int>> clean(models.size());
    for (std::size_t j = 0; j < models.size(); ++j) clean[j] = evaluate(models[j], x, labels).pred;
    std::vector<std::vector<double>> matrix(models.size(), std::vector<double>(models.size(), 0.0));
    for (std::size_t i = 0; i < models.size(); ++i) {
        const AttackResult r = use_fgsm ? fgsm(models[i], x, labels, cfg) : pgd(models[i], x, labels, cfg);
        for (std::size_t j = 0; j < models.size(); ++j) {
            const auto adv = i == j ? r.adv_pred : evaluate(models[j], r.adversarial, labels).pred;
            matrix[i][j] = attack_success_rate(clean[j], adv);
        }
    }
    return matrix;
}

std::vector<std::vector<double>> radius_step_sweep(const Classifier& model, const Tensor& x, std::span<const int> labels,
                                                   const std::vector<double>& radii,
                                                   const std::vector<std::size_t>& step_counts, const AttackConfig& base) {
    if (radii.empty() || step_counts.empty()) throw std::invalid_argument("radius_step_sweep: empty grid");
    for (std::size_t s = 0; s < step_counts.size(); ++s) {
        if (step_counts[s] < 1 || (s > 0 && step_counts[s] <= step_counts[s - 1])) {
            throw std::invalid_argument("radius_step_sweep: step counts must be positive and strictly increasing");
        }
    }
    std::vector<std::vector<double>> grid(radii.size(), std::vector<double>(step_counts.size(), 0.0));
    for (std::size_t e = 0; e < radii.size(); ++e) {
        std::optional<WarmStart> warm;
        std::size_t done = 0;
        for (std::size_t s = 0; s < step_counts.size(); ++s) {
            AttackConfig c = base;
            c.epsilon = radii[e];
            c.n_iter = step_counts[s] - done;
            c.step_size = base.step_size ? *base.step_size : 2.5 * radii[e] / static_cast<double>(step_counts[s]);
            const AttackResult r = pgd(model, x, labels, c, 0, warm);
            grid[e][s] = r.robust_accuracy();
            warm = WarmStart{r.adversarial, r.adversarial};
            done = step_counts[s];
        }
    }
    return grid;
}

AttackResult strongest_attack(const Classifier& model, const Tensor& x0, std::span<const int> labels, double epsilon,
                              std::uint64_t seed, std::size_t first_id) {
    AttackConfig cfg;
    cfg.epsilon = epsilon;
    cfg.n_iter = 40;
    cfg.n_restarts = 5;
    cfg.seed = seed;
    AttackResult best = pgd(model, x0, labels, cfg, first_id);
    const AttackResult one = fgsm(model, x0, labels, cfg, first_id);
    const std::size_t d = per_example(x0);
    std::vector<double> adv(best.adversarial.data().begin(), best.adversarial.data().end());
    const auto alt = one.adversarial.data();
    for (std::size_t i = 0; i < best.size(); ++i) {
        const auto rank = [&](const AttackResult& r) { return 2 * (r.adv_pred[i] != labels[i]) + (r.adv_pred[i] != r.clean_pred[i]); };
        if (rank(one) > rank(best)) {
            best.adv_pred[i] = one.adv_pred[i];
            std::copy(alt.begin() + i * d, alt.begin() + (i + 1) * d, adv.begin() + i * d);
        }
    }
    best.adversarial = Tensor(x0.shape(), std::move(adv));
    finalize(best, x0);
    return best;
}

std::string attack_csv(const AttackResult& result, std::span<const std::size_t> ids) {
    if (!ids.empty() && ids.size() != result.size()) throw std::invalid_argument("attack_csv: id count mismatch");
    std::string out = "example_id,clean_pred,adv_pred,label,linf_dist,success\n";
    for (std::size_t i = 0; i < result.size(); ++i) {
        out += fmt::format("{},{},{},{},{},{}\n", ids.empty() ? i : ids[i], result.clean_pred[i], result.adv_pred[i],
                           result.labels[i], num(result.linf[i]), int(result.success[i]));
    }
    return out;
}

std::string trajectory_csv(const AttackResult& result) {
    std::string out = "step,mean_loss\n";
    const auto mean = result.mean_trajectory();
    for (std::size_t t = 0; t < mean.size(); ++t) out += fmt::format("{},{}\n", t, num(mean[t]));
    return out;
}

}  // namespace advlens::attacks
