#include "advlens/smoothing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

#include "advlens/checkpoint.hpp"
#include "advlens/ops.hpp"
#include "advlens/optim.hpp"
#include "advlens/parallel.hpp"
#include "advlens/rng.hpp"
#include "advlens/stats.hpp"

namespace advlens::smoothing {

namespace {

constexpr std::uint64_t kSelectStream = 0;
constexpr std::uint64_t kEstimateStream = 1;
constexpr std::uint64_t kTrainStream = 2;
constexpr std::uint64_t kStabilityStream = 3;
constexpr std::uint64_t kEvalStream = 4;

std::uint64_t name_key(const std::string& name) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : name) h = (h ^ c) * 1099511628211ULL;
    return h;
}

Shape single_image_shape(const Tensor& x) {
    if (x.rank() == 3) return x.shape();
    if (x.rank() == 4 && x.size(0) == 1) return Shape(x.shape().begin() + 1, x.shape().end());
    throw std::invalid_argument("smoothing: expected one image C×H×W or 1×C×H×W, got " + shape_str(x.shape()));
}

std::size_t argmax_lowest(const std::vector<std::size_t>& counts) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < counts.size(); ++c)
        if (counts[c] > counts[best]) best = c;
    return best;
}

Tensor rows(const Tensor& x, const std::vector<std::size_t>& index, std::size_t lo, std::size_t hi) {
    const std::size_t d = x.numel() / x.size(0);
    std::vector<double> out;
    out.reserve((hi - lo) * d);
    const auto src = x.data();
    for (std::size_t i = lo; i < hi; ++i) out.insert(out.end(), src.begin() + index[i] * d, src.begin() + (index[i] + 1) * d);
    Shape s = x.shape();
    s[0] = hi - lo;
    return Tensor(s, std::move(out));
}

std::string num(double v) { return fmt::format("{}", v); }

}  // namespace

void SmoothingConfig::validate() const {
    if (!(sigma > 0)) throw std::invalid_argument("smoothing: sigma must be > 0");
    if (n0 < 1) throw std::invalid_argument("smoothing: n0 must be >= 1");
    if (n < n0) throw std::invalid_argument("smoothing: n must be >= n0");
    if (!(alpha > 0 && alpha < 1)) throw std::invalid_argument("smoothing: alpha must lie in (0, 1)");
    if (batch_size < 1) throw std::invalid_argument("smoothing: batch_size must be >= 1");
}

void DenoiserConfig::validate() const {
    if (layers < 1) throw std::invalid_argument("denoiser: need at least one layer");
    if (width < 1 || kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("denoiser: width >= 1 and odd kernel required");
}

std::vector<models::ParameterSpec> denoiser_manifest(const DenoiserConfig& cfg, std::size_t channels) {
    cfg.validate();
    std::vector<models::ParameterSpec> out;
    std::size_t in = channels;
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        const std::size_t outc = i + 1 == cfg.layers ? channels : cfg.width;
        const std::string p = "denoiser." + std::to_string(i);
        out.push_back({p + ".weight", {outc, in, cfg.kernel, cfg.kernel}});
        out.push_back({p + ".bias", {outc}});
        in = outc;
    }
    return out;
}

Denoiser init_denoiser(const DenoiserConfig& cfg, std::size_t channels, std::uint64_t seed) {
    Denoiser d{cfg, channels, {}};
    const std::string last = "denoiser." + std::to_string(cfg.layers - 1) + ".";
    for (const auto& spec : denoiser_manifest(cfg, channels)) {
        std::vector<double> v(shape_numel(spec.shape), 0.0);
        const bool is_weight = spec.shape.size() == 4;
        if (is_weight && spec.name.rfind(last, 0) != 0) {
            Rng rng = make_rng(seed, {name_key(spec.name)});
            const double fan_in = static_cast<double>(spec.shape[1] * spec.shape[2] * spec.shape[3]);
            std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
            for (auto& x : v) x = nd(rng);
        }
        d.params.insert(spec.name, Tensor(spec.shape, std::move(v)));
    }
    return d;
}

Tensor Denoiser::operator()(const Tensor& x) const {
    Tensor h = x;
    const std::size_t pad = config.kernel / 2;
    for (std::size_t i = 0; i < config.layers; ++i) {
        const std::string p = "denoiser." + std::to_string(i);
        const Tensor& b = params.at(p + ".bias");
        h = add(conv2d(h, params.at(p + ".weight"), 1, pad), reshape(b, {b.numel(), 1, 1}));
        if (i + 1 < config.layers) h = relu(h);
    }
    return config.residual ? sub(x, h) : h;
}

Classifier denoised_classifier(const Classifier& base, const Denoiser* denoiser) {
    if (!denoiser) return base;
    return [base, d = *denoiser](const Tensor& x) { return base(d(x)); };
}

std::vector<double> noise_sample(std::uint64_t seed, std::uint64_t input_id, std::uint64_t stream, std::uint64_t sample,
                                 std::size_t count, double sigma) {
    Rng rng = make_rng(seed, {input_id, stream, sample});
    std::normal_distribution<double> nd(0.0, sigma);
    std::vector<double> out(count);
    for (auto& v : out) v = nd(rng);
    return out;
}

double stability_loss(const Classifier& base, const Denoiser& denoiser, const Tensor& images, double sigma,
                      std::uint64_t noise_seed) {
    const std::size_t n = images.size(0), d = images.numel() / n;
    std::vector<double> per(n);
    for_each_chunk(n, 16, [&](std::size_t lo, std::size_t hi) {
        NoGradScope no_grad;
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), 0);
        const Tensor clean = rows(images, all, lo, hi);
        const auto targets = argmax_rows(base(clean));
        std::vector<double> noisy(clean.data().begin(), clean.data().end());
        for (std::size_t i = lo; i < hi; ++i) {
            const auto delta = noise_sample(noise_seed, i, kStabilityStream, 0, d, sigma);
            for (std::size_t k = 0; k < d; ++k) noisy[(i - lo) * d + k] += delta[k];
        }
        const Tensor ce = cross_entropy(base(denoiser(Tensor(clean.shape(), noisy))), targets, Reduction::none);
        std::copy(ce.data().begin(), ce.data().end(), per.begin() + lo);
    });
    double total = 0.0;
    for (double v : per) total += v;
    return total / static_cast<double>(n);
}

std::vector<double> train_denoiser(const Classifier& base, Denoiser& denoiser, const Tensor& images,
                                   const DenoiserTrainConfig& cfg) {
    if (images.rank() != 4 || images.size(0) == 0) throw std::invalid_argument("train_denoiser: expected N×C×H×W images");
    if (cfg.batch_size < 1) throw std::invalid_argument("train_denoiser: batch_size must be >= 1");
    const std::size_t n = images.size(0), d = images.numel() / n;
    std::vector<int> targets;
    {
        NoGradScope no_grad;
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), 0);
        for (std::size_t lo = 0; lo < n; lo += 64) {
            const auto t = argmax_rows(base(rows(images, all, lo, std::min(n, lo + 64))));
            targets.insert(targets.end(), t.begin(), t.end());
        }
    }
    denoiser.params.set_requires_grad(true);
    optim::Adam adam(cfg.lr);
    std::vector<double> history;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng = make_rng(cfg.seed, {epoch, 0x5AFFULL});
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        for (std::size_t lo = 0; lo < n; lo += cfg.batch_size) {
            const std::size_t hi = std::min(n, lo + cfg.batch_size);
            const Tensor clean = rows(images, order, lo, hi);
            std::vector<double> noisy(clean.data().begin(), clean.data().end());
            std::vector<int> y(hi - lo);
            for (std::size_t i = lo; i < hi; ++i) {
                const auto delta = noise_sample(cfg.seed, order[i], kTrainStream, epoch, d, cfg.sigma);
                for (std::size_t k = 0; k < d; ++k) noisy[(i - lo) * d + k] += delta[k];
                y[i - lo] = targets[order[i]];
            }
            denoiser.params.zero_grad();
            {
                Tape tape;
                const Tensor loss = cross_entropy(base(denoiser(Tensor(clean.shape(), noisy))), y);
                tape.backward(loss);
                epoch_loss += loss.item() * static_cast<double>(hi - lo);
            }
            adam.step(denoiser.params);
        }
        history.push_back(epoch_loss / static_cast<double>(n));
    }
    denoiser.params.set_requires_grad(false);
    denoiser.params.zero_grad();
    return history;
}

std::vector<std::size_t> sample_counts(const Classifier& model, const Tensor& x, std::size_t samples, double sigma,
                                       std::size_t batch_size, std::uint64_t seed, std::uint64_t input_id,
                                       std::uint64_t stream) {
    const Shape img = single_image_shape(x);
    const std::size_t d = shape_numel(img);
    const auto base = x.data();
    std::vector<int> preds(samples, 0);
    for_each_chunk(samples, std::max<std::size_t>(batch_size, 1), [&](std::size_t lo, std::size_t hi) {
        NoGradScope no_grad;
        std::vector<double> batch;
        batch.reserve((hi - lo) * d);
        for (std::size_t s = lo; s < hi; ++s) {
            const auto delta = noise_sample(seed, input_id, stream, s, d, sigma);
            for (std::size_t k = 0; k < d; ++k) batch.push_back(base[k] + delta[k]);
        }
        Shape bs{hi - lo};
        bs.insert(bs.end(), img.begin(), img.end());
        const auto p = argmax_rows(model(Tensor(bs, std::move(batch))));
        std::copy(p.begin(), p.end(), preds.begin() + lo);
    });
    std::vector<std::size_t> counts;
    for (int p : preds) {
        if (static_cast<std::size_t>(p) >= counts.size()) counts.resize(p + 1, 0);
        ++counts[p];
    }
    return counts;
}

Prediction smoothed_predict(const Classifier& base, const Denoiser* denoiser, const Tensor& x, const SmoothingConfig& cfg,
                            std::uint64_t input_id) {
    cfg.validate();
    const Classifier model = denoised_classifier(base, denoiser);
    const auto selection = sample_counts(model, x, cfg.n0, cfg.sigma, cfg.batch_size, cfg.seed, input_id, kSelectStream);
    const std::size_t ca = argmax_lowest(selection);
    const auto counts = sample_counts(model, x, cfg.n, cfg.sigma, cfg.batch_size, cfg.seed, input_id, kEstimateStream);
    const std::size_t na = ca < counts.size() ? counts[ca] : 0;
    const double p_value = stats::binomial_test_two_sided(na, cfg.n, 0.5);
    if (p_value <= cfg.alpha && 2 * na > cfg.n) return {static_cast<int>(ca), false};
    return {static_cast<int>(ca), true};
}

double certified_radius(double sigma, double pa, double pb) {
    return sigma / 2.0 * (stats::norm_ppf(pa) - stats::norm_ppf(pb));
}

CertificationResult certify(const Classifier& base, const Denoiser* denoiser, const Tensor& x, const SmoothingConfig& cfg,
                            std::uint64_t input_id) {
    cfg.validate();
    const Classifier model = denoised_classifier(base, denoiser);
    const auto selection = sample_counts(model, x, cfg.n0, cfg.sigma, cfg.batch_size, cfg.seed, input_id, kSelectStream);
    const std::size_t ca = argmax_lowest(selection);
    const auto counts = sample_counts(model, x, cfg.n, cfg.sigma, cfg.batch_size, cfg.seed, input_id, kEstimateStream);
    const std::size_t na = ca < counts.size() ? counts[ca] : 0;

    CertificationResult r;
    r.predicted = static_cast<int>(ca);
    r.pa_lower = stats::clopper_pearson_lower(na, cfg.n, cfg.alpha);
    if (cfg.exact_radius) {
        std::size_t nb = 0;
        for (std::size_t c = 0; c < counts.size(); ++c)
            if (c != ca) nb = std::max(nb, counts[c]);
        r.pb_upper = stats::clopper_pearson_upper(nb, cfg.n, cfg.alpha);
        r.abstain = !(r.pa_lower > r.pb_upper);
        r.radius = r.abstain ? std::numeric_limits<double>::quiet_NaN() : certified_radius(cfg.sigma, r.pa_lower, r.pb_upper);
    } else {
        r.pb_upper = 1.0 - r.pa_lower;
        r.abstain = !(r.pa_lower > 0.5);
        r.radius = r.abstain ? std::numeric_limits<double>::quiet_NaN() : cfg.sigma * stats::norm_ppf(r.pa_lower);
    }
    return r;
}

std::vector<double> curve_from_results(const std::vector<CertificationResult>& results, std::span<const int> labels,
                                       const std::vector<double>& radii) {
    if (results.size() != labels.size()) throw std::invalid_argument("certified accuracy: length mismatch");
    if (!std::is_sorted(radii.begin(), radii.end())) throw std::invalid_argument("certified accuracy: radii must be ascending");
    std::vector<double> curve(radii.size(), 0.0);
    if (results.empty()) return curve;
    for (std::size_t k = 0; k < radii.size(); ++k) {
        std::size_t ok = 0;
        for (std::size_t i = 0; i < results.size(); ++i) {
            const auto& r = results[i];
            ok += !r.abstain && r.predicted == labels[i] && r.radius >= radii[k];
        }
        curve[k] = static_cast<double>(ok) / static_cast<double>(results.size());
    }
    return curve;
}

CertificationReport certified_accuracy_curve(const Classifier& base, const Denoiser* denoiser, const Tensor& images,
                                             std::span<const int> labels, const SmoothingConfig& cfg,
                                             const std::vector<double>& radii, std::span<const std::size_t> ids) {
    cfg.validate();
    if (images.rank() != 4 || images.size(0) != labels.size()) {
        throw std::invalid_argument("certified_accuracy_curve: images " + shape_str(images.shape()) + " vs " +
                                    std::to_string(labels.size()) + " labels");
    }
    if (!ids.empty() && ids.size() != labels.size()) throw std::invalid_argument("certified_accuracy_curve: id count mismatch");
    const std::size_t n = labels.size(), d = images.numel() / std::max<std::size_t>(n, 1);
    CertificationReport report;
    report.results.resize(n);
    report.radii = radii;
    for_each_chunk(n, 1, [&](std::size_t lo, std::size_t) {
        const Shape img(images.shape().begin() + 1, images.shape().end());
        const Tensor x(img, std::vector<double>(images.data().begin() + lo * d, images.data().begin() + (lo + 1) * d));
        report.results[lo] = certify(base, denoiser, x, cfg, ids.empty() ? lo : ids[lo]);
    });
    report.certified_accuracy = curve_from_results(report.results, labels, radii);
    return report;
}

std::string certification_csv(const std::vector<CertificationResult>& results, std::span<const int> labels,
                              std::span<const std::size_t> ids) {
    std::string out = "example_id,label,predicted,pA_bound,radius,abstain\n";
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        out += fmt::format("{},{},{},{},{},{}\n", ids.empty() ? i : ids[i], labels[i], r.predicted, num(r.pa_lower),
                           r.abstain ? std::string() : num(r.radius), int(r.abstain));
    }
    return out;
}

std::string curve_csv(const std::vector<double>& radii, const std::vector<double>& accuracy) {
    std::string out = "radius,certified_accuracy\n";
    for (std::size_t k = 0; k < radii.size(); ++k) out += fmt::format("{},{}\n", num(radii[k]), num(accuracy[k]));
    return out;
}

double noisy_accuracy(const Classifier& base, const Denoiser* denoiser, const Tensor& images, std::span<const int> labels,
                      double sigma, std::size_t draws, std::uint64_t seed, std::size_t batch_size) {
    if (images.rank() != 4 || images.size(0) != labels.size() || labels.empty() || draws == 0) {
        throw std::invalid_argument("noisy_accuracy: need matching non-empty images and labels and draws >= 1");
    }
    const Classifier model = denoised_classifier(base, denoiser);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto counts =
            sample_counts(model, slice(images, 0, i, i + 1), draws, sigma, batch_size, seed, i, kEvalStream);
        if (static_cast<std::size_t>(labels[i]) < counts.size()) ok += counts[labels[i]];
    }
    return static_cast<double>(ok) / static_cast<double>(labels.size() * draws);
}

double smoothed_accuracy(const Classifier& base, const Denoiser* denoiser, const Tensor& images, std::span<const int> labels,
                         const SmoothingConfig& cfg, std::span<const std::size_t> ids) {
    if (images.rank() != 4 || images.size(0) != labels.size() || labels.empty()) {
        throw std::invalid_argument("smoothed_accuracy: images " + shape_str(images.shape()) + " vs " +
                                    std::to_string(labels.size()) + " labels");
    }
    if (!ids.empty() && ids.size() != labels.size()) throw std::invalid_argument("smoothed_accuracy: ids length mismatch");
    std::vector<std::uint8_t> right(labels.size(), 0);
    for_each_chunk(labels.size(), 1, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const auto p = smoothed_predict(base, denoiser, slice(images, 0, i, i + 1), cfg, ids.empty() ? i : ids[i]);
            right[i] = !p.abstain && p.predicted == labels[i];
        }
    });
    return static_cast<double>(std::count(right.begin(), right.end(), 1)) / static_cast<double>(labels.size());
}

void save_denoiser(const std::string& path, const Denoiser& denoiser, std::uint64_t seed) {
    nlohmann::json header;
    header["kind"] = "denoiser";
    header["denoiser"] = {{"layers", denoiser.config.layers},
                          {"width", denoiser.config.width},
                          {"kernel", denoiser.config.kernel},
                          {"residual", denoiser.config.residual}};
    header["channels"] = denoiser.channels;
    header["seed"] = seed;
    write_bytes(path, serialize_container(std::move(header), denoiser_manifest(denoiser.config, denoiser.channels),
                                          denoiser.params));
}

Denoiser load_denoiser(const std::string& path) {
    Denoiser d;
    Container c = deserialize_container(read_bytes(path), [&](const nlohmann::json& h) {
        if (h.at("kind").get<std::string>() != "denoiser") throw std::invalid_argument("not a denoiser checkpoint");
        const auto& j = h.at("denoiser");
        d.config.layers = j.at("layers").get<std::size_t>();
        d.config.width = j.at("width").get<std::size_t>();
        d.config.kernel = j.at("kernel").get<std::size_t>();
        d.config.residual = j.at("residual").get<bool>();
        d.config.validate();
        d.channels = h.at("channels").get<std::size_t>();
        return denoiser_manifest(d.config, d.channels);
    });
    d.params = std::move(c.params);
    return d;
}

}  // namespace advlens::smoothing
