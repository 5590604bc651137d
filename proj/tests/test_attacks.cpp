#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "advlens/attacks.hpp"
#include "advlens/ops.hpp"
#include "advlens/rng.hpp"
#include "doctest.h"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace advlens;
using namespace advlens::attacks;

namespace {

Tensor uniform(Shape shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

Classifier linear_model(const Tensor& w, const Tensor& b) {
    return [w, b](const Tensor& x) { return linear(reshape(x, {x.size(0), x.numel() / x.size(0)}), w, b); };
}

models::Network small_vit(std::uint64_t seed) {
    models::ModelConfig cfg;
    cfg.image_height = cfg.image_width = 8;
    cfg.channels = 1;
    cfg.input_mean = {0.5};
    cfg.input_std = {0.25};
    cfg.layers = 1;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.classes = 4;
    cfg.patch = 4;
    models::Network net{cfg, models::init_parameters(cfg, seed)};
    // Scale up from init so predictions are not all one class.
    for (auto& [name, t] : net.params) {
        auto v = t.mutable_data();
        for (auto& x : v) x *= 20.0;
    }
    return net;
}

std::vector<int> labels_for(std::size_t n, int k) {
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % k);
    return y;
}

bool same(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

bool same(const AttackResult& a, const AttackResult& b) {
    return same(a.adversarial, b.adversarial) && a.adv_pred == b.adv_pred && a.clean_pred == b.clean_pred &&
           a.success == b.success && a.linf == b.linf && a.loss_trajectory == b.loss_trajectory;
}

}  // namespace

TEST_CASE("config validation") {
    AttackConfig c;
    c.epsilon = -0.1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = AttackConfig{};
    c.n_iter = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = AttackConfig{};
    c.step_size = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = AttackConfig{};
    c.epsilon = 0.04;
    c.n_iter = 10;
    CHECK(c.alpha() == doctest::Approx(0.01));
}

TEST_CASE("fgsm examples") {
    const auto net = small_vit(1).frozen();
    const auto model = net.classifier();
    const Tensor x = uniform({6, 1, 8, 8}, 3);
    const auto y = labels_for(6, 4);
    AttackConfig cfg;
    cfg.epsilon = 0.0;
    const AttackResult r = fgsm(model, x, y, cfg);
    CHECK(same(r.adversarial, x));
    for (std::size_t i = 0; i < y.size(); ++i) {
        CHECK_FALSE(r.success[i]);
        CHECK((r.adv_pred[i] != y[i]) == (r.clean_pred[i] != y[i]));
    }

    // Constant logits: zero gradient leaves the input alone.
    const Classifier flat = [](const Tensor& in) { return mul_scalar(sum(reshape(in, {in.size(0), in.numel() / in.size(0)}), 1, true), 0.0); };
    cfg.epsilon = 0.1;
    const Classifier two = [flat](const Tensor& in) { return concat({flat(in), flat(in)}, 1); };
    CHECK(same(fgsm(two, x, std::vector<int>(6, 0), cfg).adversarial, x));

    // logits [w·x, 0] with label 1: loss log(1 + e^{wx}) rises with x.
    const Classifier scalar = [](const Tensor& in) {
        const Tensor flat_in = reshape(in, {in.size(0), 1});
        return concat({mul_scalar(flat_in, 2.0), mul_scalar(flat_in, 0.0)}, 1);
    };
    const Tensor xs({3, 1, 1, 1}, {0.2, 0.95, 1.0});
    const AttackResult s = fgsm(scalar, xs, std::vector<int>{1, 1, 1}, cfg);
    CHECK(s.adversarial[0] == doctest::Approx(0.3));
    CHECK(s.adversarial[1] == 1.0);
    CHECK(s.adversarial[2] == 1.0);
}

TEST_CASE("pgd containment and single-step collapse") {
    const auto model = small_vit(2).frozen().classifier();
    const Tensor x = uniform({20, 1, 8, 8}, 5);
    const auto y = labels_for(20, 4);
    AttackConfig cfg;
    cfg.epsilon = 0.05;
    cfg.n_iter = 7;
    cfg.n_restarts = 2;
    cfg.seed = 11;
    const AttackResult r = pgd(model, x, y, cfg);
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(r.linf[i] <= cfg.epsilon + 1e-9);
    for (double v : r.adversarial.data()) CHECK((v >= 0.0 && v <= 1.0));
    for (const auto& traj : r.loss_trajectory) {
        REQUIRE(traj.size() == 8);
        for (std::size_t t = 1; t < traj.size(); ++t) CHECK(traj[t] >= traj[t - 1]);
    }
    const auto clean = evaluate(model, x, y);
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(r.loss_trajectory[i][0] == clean.loss[i]);
    CHECK(r.robust_accuracy() <= r.clean_accuracy());

    AttackConfig one = cfg;
    one.n_iter = 1;
    one.step_size = 0.07;
    one.random_start = false;
    one.n_restarts = 1;
    AttackConfig f = cfg;
    f.step_size = 0.0;  // ignored by fgsm
    CHECK(same(pgd(model, x, y, one), fgsm(model, x, y, f)));
}

TEST_CASE("pgd on a linear model reaches the analytic worst case") {
    Rng rng(4);
    const std::size_t d = 12;
    const Tensor w = uniform({d, 2}, 8, -1, 1);
    const Tensor b = uniform({2}, 9, -0.1, 0.1);
    const auto model = linear_model(w, b);
    const Tensor x = uniform({5, 1, 3, 4}, 10);
    const std::vector<int> y{0, 1, 1, 0, 1};
    AttackConfig cfg;
    cfg.epsilon = 0.1;
    cfg.n_iter = 40;
    cfg.random_start = false;
    cfg.clamp_to_valid_range = false;
    const AttackResult r = pgd(model, x, y, cfg);

    std::vector<double> worst(x.numel());
    for (std::size_t i = 0; i < 5; ++i) {
        const int other = 1 - y[i];
        for (std::size_t k = 0; k < d; ++k) {
            const double dir = w[k * 2 + other] - w[k * 2 + y[i]];
            worst[i * d + k] = x[i * d + k] + cfg.epsilon * (dir > 0 ? 1.0 : -1.0);
        }
    }
    const auto want = evaluate(model, Tensor(x.shape(), worst), y);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::fabs(r.loss_trajectory[i].back() - want.loss[i]) <= 1e-6);
}

TEST_CASE("determinism across threads and splits") {
    const auto model = small_vit(3).frozen().classifier();
    const Tensor x = uniform({40, 1, 8, 8}, 6);
    const auto y = labels_for(40, 4);
    AttackConfig cfg;
    cfg.epsilon = 0.03;
    cfg.n_iter = 4;
    cfg.seed = 99;
#ifdef _OPENMP
    omp_set_num_threads(1);
#endif
    const AttackResult serial = pgd(model, x, y, cfg);
#ifdef _OPENMP
    omp_set_num_threads(4);
#endif
    const AttackResult parallel = pgd(model, x, y, cfg);
    CHECK(same(serial, parallel));
    CHECK(same(pgd(model, x, y, cfg), parallel));

    // The second half attacked alone, with its ids, matches.
    std::vector<double> tail(x.data().begin() + 20 * 64, x.data().end());
    const AttackResult half = pgd(model, Tensor({20, 1, 8, 8}, tail), std::span<const int>(y).subspan(20), cfg, 20);
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(half.adv_pred[i] == serial.adv_pred[20 + i]);
        CHECK(half.loss_trajectory[i] == serial.loss_trajectory[20 + i]);
    }
}

TEST_CASE("frequency filtered attack") {
    const auto model = small_vit(4).frozen().classifier();
    const Tensor x = uniform({8, 1, 8, 8}, 7);
    const auto y = labels_for(8, 4);
    AttackConfig cfg;
    cfg.epsilon = 0.05;
    cfg.n_iter = 5;
    cfg.seed = 3;
    const AttackResult plain = pgd(model, x, y, cfg);
    const AttackResult full = frequency_filtered_attack(model, x, y, cfg, frequency::make_mask(8, 8, frequency::MaskMode::full));
    CHECK(same(plain, full));
    const AttackResult none = frequency_filtered_attack(model, x, y, cfg, frequency::make_mask(8, 8, frequency::MaskMode::low, 0));
    for (std::size_t k = 0; k < x.numel(); ++k) CHECK(std::fabs(none.adversarial[k] - x[k]) <= 1e-12);
    for (auto s : none.success) CHECK_FALSE(s);

    const auto low = frequency::make_mask(8, 8, frequency::MaskMode::low);
    const auto high = frequency::make_mask(8, 8, frequency::MaskMode::high);
    std::vector<std::uint8_t> mid(64);
    for (std::size_t i = 0; i < 64; ++i) mid[i] = !(low.bits[i] || high.bits[i]);
    const auto a = frequency_filtered_attack(model, x, y, cfg, low);
    const auto b = frequency_filtered_attack(model, x, y, cfg, high);
    const auto c = frequency_filtered_attack(model, x, y, cfg, frequency::custom_mask(8, 8, mid));
    for (std::size_t k = 0; k < x.numel(); ++k) {
        const double parts = (a.adversarial[k] - x[k]) + (b.adversarial[k] - x[k]) + (c.adversarial[k] - x[k]);
        CHECK(std::fabs(parts - (plain.adversarial[k] - x[k])) <= 1e-9);
    }

    AttackConfig via = cfg;
    via.filter_mode = frequency::MaskMode::low;
    CHECK(same(run_attack(model, x, y, via), a));
    via.post_filter_clip = true;
    for (double v : run_attack(model, x, y, via).linf) CHECK(v <= cfg.epsilon + 1e-12);
    CHECK_THROWS_AS(frequency_filtered_attack(model, x, y, cfg, frequency::make_mask(4, 4, frequency::MaskMode::full)),
                    std::invalid_argument);
}

TEST_CASE("attack success rate") {
    CHECK(attack_success_rate(std::vector<int>{1, 2, 3}, std::vector<int>{1, 0, 3}) == doctest::Approx(1.0 / 3));
    CHECK(attack_success_rate(std::vector<int>{1, 2}, std::vector<int>{1, 2}) == 0.0);
    CHECK(attack_success_rate(std::vector<int>{1, 2}, std::vector<int>{0, 0}) == 1.0);
    CHECK_THROWS_AS(attack_success_rate(std::vector<int>{1}, std::vector<int>{1, 2}), std::invalid_argument);
    CHECK(robust_accuracy(std::vector<int>{0, 1, 2}, std::vector<int>{0, 2, 2}, std::vector<int>{0, 1, 1}) ==
          doctest::Approx(1.0 / 3));
}

TEST_CASE("transfer matrix") {
    const auto m1 = small_vit(5).frozen().classifier();
    const auto m2 = small_vit(6).frozen().classifier();
    const Tensor x = uniform({12, 1, 8, 8}, 8);
    const auto y = labels_for(12, 4);
    AttackConfig cfg;
    cfg.epsilon = 0.1;
    const auto single = transfer_attack_matrix({m1}, x, y, cfg);
    CHECK(single.size() == 1);
    CHECK(single[0][0] == fgsm(m1, x, y, cfg).success_rate());

    const auto pair = transfer_attack_matrix({m1, m1}, x, y, cfg);
    CHECK(pair[0][0] == pair[0][1]);
    CHECK(pair[0][1] == pair[1][0]);
    CHECK(pair[1][1] == pair[0][0]);

    cfg.epsilon = 0.0;
    for (const auto& row : transfer_attack_matrix({m1, m2, m1}, x, y, cfg))
        for (double v : row) CHECK(v == 0.0);
}

TEST_CASE("radius-step sweep") {
    const auto model = small_vit(7).frozen().classifier();
    const Tensor x = uniform({16, 1, 8, 8}, 9);
    const auto y = labels_for(16, 4);
    AttackConfig cfg;
    cfg.seed = 5;
    const auto grid = radius_step_sweep(model, x, y, {0.0, 0.02, 0.08}, {1, 3, 9}, cfg);
    const auto clean = evaluate(model, x, y);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < y.size(); ++i) ok += clean.pred[i] == y[i];
    for (double v : grid[0]) CHECK(v == doctest::Approx(static_cast<double>(ok) / 16));
    for (const auto& row : grid)
        for (std::size_t s = 1; s < row.size(); ++s) CHECK(row[s] <= row[s - 1]);
    CHECK_THROWS_AS(radius_step_sweep(model, x, y, {0.1}, {3, 2}, cfg), std::invalid_argument);
}

TEST_CASE("strongest attack and csv") {
    const auto model = small_vit(8).frozen().classifier();
    const Tensor x = uniform({8, 1, 8, 8}, 10);
    const auto y = labels_for(8, 4);
    const AttackResult s = strongest_attack(model, x, y, 0.05, 1);
    AttackConfig cfg;
    cfg.epsilon = 0.05;
    cfg.n_iter = 40;
    cfg.n_restarts = 5;
    cfg.seed = 1;
    CHECK(s.robust_accuracy() <= pgd(model, x, y, cfg).robust_accuracy());
    CHECK(s.robust_accuracy() <= fgsm(model, x, y, cfg).robust_accuracy());
    for (double v : s.linf) CHECK(v <= 0.05 + 1e-9);

    const std::string csv = attack_csv(s);
    CHECK(csv.rfind("example_id,clean_pred,adv_pred,label,linf_dist,success\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
    const std::string traj = trajectory_csv(s);
    CHECK(std::count(traj.begin(), traj.end(), '\n') == 42);
}
