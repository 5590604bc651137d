#include <cmath>
#include <random>
#include <vector>

#include "advlens/advtrain.hpp"
#include "advlens/ops.hpp"
#include "advlens/optim.hpp"
#include "advlens/rng.hpp"
#include "doctest.h"

using namespace advlens;
using namespace advlens::advtrain;

namespace {

models::ModelConfig tiny_cnn() {
    models::ModelConfig cfg;
    cfg.family = models::Family::cnn;
    cfg.image_height = cfg.image_width = 8;
    cfg.channels = 1;
    cfg.input_mean = {0.5};
    cfg.input_std = {0.25};
    cfg.conv_stem = {{4, 3, 1}};
    cfg.stage_widths = {4, 8};
    cfg.classes = 2;
    return cfg;
}

// Bright vs dark 8x8 images.
void toy(std::size_t n, Tensor& images, std::vector<int>& labels) {
    Rng rng(11);
    std::normal_distribution<double> nd(0, 0.05);
    std::vector<double> v(n * 64);
    labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(i % 2);
        for (std::size_t k = 0; k < 64; ++k) v[i * 64 + k] = std::clamp(0.5 + (labels[i] ? 0.2 : -0.2) + nd(rng), 0.0, 1.0);
    }
    images = Tensor({n, 1, 8, 8}, std::move(v));
}

TrainConfig quick(Method m) {
    TrainConfig c;
    c.method = m;
    c.epochs = 3;
    c.batch_size = 8;
    c.lr = 0.05;
    c.decay_epochs = {2};
    c.epsilon = 0.05;
    c.inner_steps = 3;
    c.seed = 5;
    return c;
}

}  // namespace

TEST_CASE("config and schedule") {
    TrainConfig c;
    CHECK(c.inner_alpha() == doctest::Approx(2.5 * (8.0 / 255.0) / 7.0));
    CHECK(c.lr_at(0) == 0.1);
    CHECK(c.lr_at(14) == 0.1);
    CHECK(c.lr_at(15) == doctest::Approx(0.01));
    CHECK(c.lr_at(18) == doctest::Approx(0.001));
    CHECK(c.weight_decay_for(models::Family::cnn) == 5e-4);
    CHECK(c.weight_decay_for(models::Family::vit) == 2e-4);
    CHECK(method_from_string("trades") == Method::trades);
    CHECK_THROWS_AS(method_from_string("fancy"), std::invalid_argument);
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.method = Method::trades;
    c.beta = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("weight decay exclusions") {
    CHECK(optim::decays("blocks.0.attn.q.weight"));
    CHECK(optim::decays("head.bias"));
    CHECK_FALSE(optim::decays("blocks.0.norm1.weight"));
    CHECK_FALSE(optim::decays("norm.bias"));
    CHECK_FALSE(optim::decays("cls_token"));
    CHECK_FALSE(optim::decays("pos_embed"));
}

TEST_CASE("KL divergence") {
    Rng rng(3);
    std::normal_distribution<double> nd(0, 2);
    std::vector<double> a(40), b(40);
    for (auto& v : a) v = nd(rng);
    for (auto& v : b) v = nd(rng);
    const Tensor p({4, 10}, a), q({4, 10}, b);
    CHECK(kl_divergence(p, q).item() > 0);
    CHECK(kl_divergence(p, p).item() == doctest::Approx(0.0));
    // Invariant to a per-row logit shift.
    CHECK(kl_divergence(add_scalar(p, 3.0), q).item() == doctest::Approx(kl_divergence(p, q).item()).epsilon(1e-12));
}

TEST_CASE("TRADES gradient tends to the natural gradient as beta vanishes") {
    const auto model = tiny_cnn();
    Tensor images;
    std::vector<int> labels;
    toy(6, images, labels);
    auto params = models::init_parameters(model, 2);
    params.set_requires_grad(true);
    Tensor shifted = add_scalar(images, 0.03);

    auto grads = [&](bool trades) {
        params.zero_grad();
        Tape tape;
        const Tensor clean = models::forward(images, params, model);
        const Tensor loss = trades ? trades_loss(clean, models::forward(shifted, params, model), labels, 1e-12)
                                   : cross_entropy(clean, labels);
        tape.backward(loss);
        std::vector<double> g;
        for (const auto& [name, t] : params) g.insert(g.end(), t.grad().begin(), t.grad().end());
        return g;
    };
    const auto natural = grads(false);
    const auto tr = grads(true);
    REQUIRE(natural.size() == tr.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < natural.size(); ++i) worst = std::max(worst, std::fabs(natural[i] - tr[i]));
    CHECK(worst < 1e-9);
}

TEST_CASE("epsilon zero adversarial training is natural training") {
    const auto model = tiny_cnn();
    Tensor images;
    std::vector<int> labels;
    toy(20, images, labels);
    TrainConfig nat = quick(Method::natural);
    TrainConfig adv = quick(Method::pgd_at);
    nat.epsilon = adv.epsilon = 0.0;
    const auto a = natural_train(model, images, labels, nat);
    const auto b = pgd_adversarial_train(model, images, labels, adv);
    CHECK(a.params == b.params);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t e = 0; e < a.history.size(); ++e) {
        CHECK(a.history[e].train_loss == b.history[e].train_loss);
        CHECK(a.history[e].clean_acc == b.history[e].clean_acc);
    }
    CHECK_THROWS_AS(natural_train(model, images, labels, adv), std::invalid_argument);
}

TEST_CASE("training runs are deterministic and learn the toy task") {
    const auto model = tiny_cnn();
    Tensor images;
    std::vector<int> labels;
    toy(32, images, labels);
    for (Method m : {Method::natural, Method::pgd_at, Method::trades}) {
        CAPTURE(to_string(m));
        TrainConfig c = quick(m);
        c.epochs = 6;
        c.decay_epochs = {5};
        const auto a = train(model, images, labels, c);
        const auto b = train(model, images, labels, c);
        CHECK(a.params == b.params);
        CHECK(a.history.size() == 6);
        CHECK(a.history.back().train_loss < a.history.front().train_loss);
        const models::Network net{model, a.params};
        const auto eval = evaluate_robust_accuracy(net.classifier(), images, labels, 0.05, 10, 1);
        CHECK(eval.clean_acc >= 0.9);
        CHECK(eval.robust_acc <= eval.clean_acc);
    }
}

TEST_CASE("TRADES inner max stays in the ball and raises the KL term") {
    const auto model = tiny_cnn();
    Tensor images;
    std::vector<int> labels;
    toy(5, images, labels);
    const models::Network net{model, models::init_parameters(model, 8)};
    const auto f = net.classifier();
    const double eps = 0.05;
    const Tensor adv = trades_inner_max(f, images, eps, 5, 0.02, 4);
    for (std::size_t k = 0; k < adv.numel(); ++k) {
        CHECK(std::fabs(adv.data()[k] - images.data()[k]) <= eps + 1e-15);
        CHECK(adv.data()[k] >= 0.0);
        CHECK(adv.data()[k] <= 1.0);
    }
    CHECK(kl_divergence(f(images), f(adv)).item() > 0.0);
    const Tensor same = trades_inner_max(f, images, eps, 5, 0.02, 4);
    CHECK(std::equal(adv.data().begin(), adv.data().end(), same.data().begin()));
    const Tensor zero = trades_inner_max(f, images, 0.0, 5, 0.02, 4);
    CHECK(std::equal(zero.data().begin(), zero.data().end(), images.data().begin()));
}

TEST_CASE("history csv") {
    const std::vector<EpochStats> h{{0, 0.5, 0.75, 0.25}, {1, 0.25, 1.0, 0.5}};
    CHECK(history_csv(h) == "epoch,train_loss,clean_acc,robust_acc\n0,0.5,0.75,0.25\n1,0.25,1,0.5\n");
}
