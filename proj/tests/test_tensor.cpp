#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "advlens/gradcheck.hpp"
#include "advlens/kernels.hpp"
#include "advlens/ops.hpp"
#include "advlens/rng.hpp"
#include "doctest.h"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace advlens;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

void check_close(std::span<const double> got, const std::vector<double>& want, double tol) {
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::fabs(got[i] - want[i]) <= tol * std::max(1.0, std::fabs(want[i])));
}

}  // namespace

TEST_CASE("elementwise primitives") {
    const Tensor a({2}, {1, 2});
    const Tensor b({2}, {3, 4});
    check_close(add(a, b).data(), {4, 6}, 0);
    check_close(sign(Tensor({3}, {-0.5, 0.0, 2.0})).data(), {-1, 0, 1}, 0);
    check_close(clamp(Tensor({3}, {-0.2, 0.5, 1.3}), 0, 1).data(), {0, 0.5, 1}, 0);
    check_close(abs(Tensor({2}, {-3, 2})).data(), {3, 2}, 0);
}

TEST_CASE("broadcasting follows trailing axes") {
    const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor bias({3}, {10, 20, 30});
    check_close(add(a, bias).data(), {11, 22, 33, 14, 25, 36}, 0);
    const Tensor col({2, 1}, {1, 2});
    check_close(mul(a, col).data(), {1, 2, 3, 8, 10, 12}, 0);
    CHECK_THROWS_WITH_AS(add(a, Tensor({2}, {1, 2})), doctest::Contains("add"), std::invalid_argument);
}

TEST_CASE("broadcast gradients reduce over expanded axes") {
    Tape tape;
    Tensor a = Tensor({2, 3}, {1, 2, 3, 4, 5, 6}).requires_grad_();
    Tensor bias = Tensor({3}, {0, 0, 0}).requires_grad_();
    backward(sum(add(a, bias)));
    check_close(bias.grad(), {2, 2, 2}, 0);
    check_close(a.grad(), {1, 1, 1, 1, 1, 1}, 0);
}

TEST_CASE("matmul") {
    const Tensor eye({2, 2}, {1, 0, 0, 1});
    const Tensor m({2, 2}, {1, 2, 3, 4});
    check_close(matmul(eye, m).data(), {1, 2, 3, 4}, 0);
    check_close(matmul(m, Tensor({2, 2}, {5, 6, 7, 8})).data(), {19, 22, 43, 50}, 0);
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), std::invalid_argument);

    SUBCASE("batched with broadcast leading axes") {
        Rng rng(3);
        const Tensor a = random_tensor({2, 3, 4}, rng);
        const Tensor b = random_tensor({1, 4, 5}, rng);
        const Tensor c = matmul(a, b);
        CHECK(c.shape() == Shape{2, 3, 5});
        for (std::size_t bi = 0; bi < 2; ++bi)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 5; ++j) {
                    double acc = 0;
                    for (std::size_t k = 0; k < 4; ++k) acc += a[(bi * 3 + i) * 4 + k] * b[k * 5 + j];
                    CHECK(c[(bi * 3 + i) * 5 + j] == doctest::Approx(acc).epsilon(1e-14));
                }
    }
}

TEST_CASE("conv2d") {
    check_close(conv2d(Tensor({1, 1, 1, 1}, {3}), Tensor({1, 1, 1, 1}, {2}), 1, 0).data(), {6}, 0);
    const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    check_close(conv2d(x, Tensor::ones({1, 1, 2, 2}), 2, 0).data(), {10}, 0);
    const Tensor img = Tensor::zeros({1, 3, 32, 32});
    CHECK(conv2d(img, Tensor::zeros({8, 3, 4, 4}), 4, 0).shape() == Shape{1, 8, 8, 8});
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0), std::invalid_argument);

    SUBCASE("matches direct cross-correlation with padding") {
        Rng rng(11);
        const Tensor in = random_tensor({2, 2, 5, 4}, rng);
        const Tensor w = random_tensor({3, 2, 3, 3}, rng);
        const Tensor out = conv2d(in, w, 2, 1);
        REQUIRE(out.shape() == Shape{2, 3, 3, 2});
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t o = 0; o < 3; ++o)
                for (std::size_t y = 0; y < 3; ++y)
                    for (std::size_t xo = 0; xo < 2; ++xo) {
                        double acc = 0;
                        for (std::size_t c = 0; c < 2; ++c)
                            for (std::size_t ki = 0; ki < 3; ++ki)
                                for (std::size_t kj = 0; kj < 3; ++kj) {
                                    const long iy = static_cast<long>(y * 2 + ki) - 1;
                                    const long ix = static_cast<long>(xo * 2 + kj) - 1;
                                    if (iy < 0 || ix < 0 || iy >= 5 || ix >= 4) continue;
                                    acc += in[((b * 2 + c) * 5 + iy) * 4 + ix] * w[((o * 2 + c) * 3 + ki) * 3 + kj];
                                }
                        CHECK(out[((b * 3 + o) * 3 + y) * 2 + xo] == doctest::Approx(acc).epsilon(1e-13));
                    }
    }
}

TEST_CASE("softmax") {
    check_close(softmax(Tensor({3}, {0, 0, 0}), -1).data(), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
    check_close(softmax(Tensor({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}), 0).data(), {1.0 / 6, 2.0 / 6, 3.0 / 6},
                1e-14);
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({4, 7}, rng, -30, 30);
        const Tensor y = softmax(x, 1);
        const Tensor shifted = softmax(add_scalar(x, 123.25), 1);
        for (std::size_t r = 0; r < 4; ++r) {
            double total = 0;
            for (std::size_t j = 0; j < 7; ++j) {
                total += y[r * 7 + j];
                CHECK(y[r * 7 + j] > 0);
                CHECK(std::fabs(y[r * 7 + j] - shifted[r * 7 + j]) <= 1e-13 * y[r * 7 + j] + 1e-300);
            }
            CHECK(std::fabs(total - 1.0) < 1e-10);
        }
    }
}

TEST_CASE("layer_norm") {
    const Tensor one = Tensor::ones({2});
    const Tensor zero = Tensor::zeros({2});
    check_close(layer_norm(Tensor({1, 2}, {5, 5}), one, zero).data(), {0, 0}, 0);
    check_close(layer_norm(Tensor({1, 2}, {1, -1}), one, zero, 1e-14).data(), {1, -1}, 1e-12);
    const Tensor beta({2}, {0.3, -0.7});
    check_close(layer_norm(Tensor({2, 2}, {3, 9, -1, 4}), zero, beta).data(), {0.3, -0.7, 0.3, -0.7}, 0);
}

TEST_CASE("cross_entropy") {
    const std::vector<int> zeros(3, 0);
    CHECK(cross_entropy(Tensor::zeros({3, 10}), zeros).item() == doctest::Approx(std::log(10.0)).epsilon(1e-15));
    const std::vector<int> label0{0};
    // -log sigmoid(20) = log1p(exp(-20))
    CHECK(cross_entropy(Tensor({1, 2}, {10, -10}), label0).item() ==
          doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));
    const std::vector<int> bad{10};
    CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 10}), bad), std::out_of_range);
}

TEST_CASE("backward basics") {
    SUBCASE("product rule") {
        Tape tape;
        Tensor x = Tensor::scalar(2).requires_grad_();
        Tensor y = Tensor::scalar(3).requires_grad_();
        backward(mul(x, y));
        CHECK(x.grad()[0] == 3);
        CHECK(y.grad()[0] == 2);
    }
    SUBCASE("relu gate") {
        Tape tape;
        Tensor x = Tensor({2}, {-1, 2}).requires_grad_();
        backward(sum(relu(x)));
        check_close(x.grad(), {0, 1}, 0);
    }
    SUBCASE("repeated calls accumulate") {
        Tape tape;
        Tensor x = Tensor({2}, {1, 2}).requires_grad_();
        Tensor loss = sum(mul(x, x));
        backward(loss);
        backward(loss);
        check_close(x.grad(), {4, 8}, 0);
    }
    SUBCASE("non-scalar loss fails") {
        Tape tape;
        Tensor x = Tensor({2}, {1, 2}).requires_grad_();
        CHECK_THROWS_AS(backward(mul(x, x)), std::invalid_argument);
    }
    SUBCASE("no gradient flows into frozen tensors") {
        Tape tape;
        Tensor x = Tensor({2}, {1, 2}).requires_grad_();
        Tensor w({2}, {3, 4});
        backward(sum(mul(x, w)));
        CHECK_FALSE(w.has_grad());
    }
    SUBCASE("sign and argmax pass zero gradient") {
        Tape tape;
        Tensor x = Tensor({3}, {-1, 0.5, 2}).requires_grad_();
        backward(add(sum(sign(x)), sum(max(x, 0).values)));
        check_close(x.grad(), {0, 0, 1}, 0);
    }
    SUBCASE("live tensors reject mutation") {
        Tape tape;
        Tensor x = Tensor({2}, {1, 2}).requires_grad_();
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(x.mutable_data(), std::logic_error);
    }
}

TEST_CASE("finite difference checker") {
    const auto sq = [](const Tensor& x) { return sum(mul(x, x)); };
    const auto res = finite_difference_check(sq, Tensor({2}, {1, 2}));
    CHECK(res.max_rel_error < 1e-6);
    CHECK(res.checked == 2);

    const auto constant = [](const Tensor&) { return Tensor::scalar(4.0); };
    CHECK(finite_difference_check(constant, Tensor({2}, {1, 2})).max_rel_error == 0.0);

    // abs has a kink at 0; the coordinate sitting on it is excluded.
    const auto kinked = [](const Tensor& x) { return sum(abs(x)); };
    const auto kres = finite_difference_check(kinked, Tensor({3}, {0.0, 1.0, -2.0}));
    CHECK(kres.excluded == 1);
    CHECK(kres.max_rel_error < 1e-8);
}

TEST_CASE("composite MLP gradient matches finite differences") {
    Rng rng(42);
    const Tensor w1 = random_tensor({5, 8}, rng);
    const Tensor b1 = random_tensor({8}, rng);
    const Tensor w2 = random_tensor({8, 3}, rng);
    const std::vector<int> labels{0, 2, 1, 1};
    const auto f = [&](const Tensor& x) {
        return cross_entropy(linear(tanh(linear(x, w1, b1)), w2, Tensor::zeros({3})), labels);
    };
    const auto res = finite_difference_check(f, random_tensor({4, 5}, rng));
    CHECK(res.max_rel_error < 1e-4);
    CHECK(res.excluded == 0);
}

TEST_CASE("every differentiable primitive passes finite differences on random inputs") {
    using Fn = std::function<Tensor(const Tensor&)>;
    Rng rng(7);
    const Tensor other = random_tensor({3, 4}, rng, 0.5, 1.5);
    const Tensor row = random_tensor({4}, rng);
    const Tensor weights = random_tensor({3, 4}, rng);
    const Tensor gamma = random_tensor({4}, rng);
    const Tensor beta = random_tensor({4}, rng);
    const Tensor mat = random_tensor({4, 2}, rng);
    const Tensor kern = random_tensor({2, 1, 2, 2}, rng);
    const std::vector<int> labels{1, 0, 3};
    const auto weighted = [&](const Tensor& y) { return sum(mul(y, weights)); };
    const std::vector<std::pair<const char*, Fn>> cases{
        {"add", [&](const Tensor& x) { return weighted(add(x, row)); }},
        {"sub", [&](const Tensor& x) { return weighted(sub(row, x)); }},
        {"mul", [&](const Tensor& x) { return weighted(mul(x, other)); }},
        {"div", [&](const Tensor& x) { return weighted(div(x, other)) + sum(div(row, add_scalar(mul(x, x), 1.0))); }},
        {"neg", [&](const Tensor& x) { return weighted(neg(x)); }},
        {"exp", [&](const Tensor& x) { return weighted(exp(x)); }},
        {"log", [&](const Tensor& x) { return weighted(log(add_scalar(mul(x, x), 0.5))); }},
        {"sqrt", [&](const Tensor& x) { return weighted(sqrt(add_scalar(mul(x, x), 0.5))); }},
        {"tanh", [&](const Tensor& x) { return weighted(tanh(x)); }},
        {"gelu", [&](const Tensor& x) { return weighted(gelu(x)); }},
        {"relu", [&](const Tensor& x) { return weighted(relu(x)); }},
        {"sigmoid", [&](const Tensor& x) { return weighted(sigmoid(x)); }},
        {"pow", [&](const Tensor& x) { return weighted(pow(add_scalar(x, 2.0), 2.5)); }},
        {"abs", [&](const Tensor& x) { return weighted(abs(x)); }},
        {"clamp", [&](const Tensor& x) { return weighted(clamp(x, -0.5, 0.5)); }},
        {"sum_axis", [&](const Tensor& x) { return sum(mul(sum(x, 0), row)); }},
        {"mean_axis", [&](const Tensor& x) { return sum(mul(mean(x, 1, true), exp(x))); }},
        {"max_axis", [&](const Tensor& x) { return sum(mul(max(x, 0).values, row)); }},
        {"reshape", [&](const Tensor& x) { return sum(mul(reshape(x, {4, 3}), transpose(weights, 0, 1))); }},
        {"transpose", [&](const Tensor& x) { return sum(mul(transpose(x, 0, 1), transpose(weights, 0, 1))); }},
        {"concat", [&](const Tensor& x) { return sum(mul(concat({x, mul(x, x)}, 0), concat({weights, other}, 0))); }},
        {"slice", [&](const Tensor& x) { return sum(mul(slice(x, 1, 1, 3), slice(weights, 1, 0, 2))); }},
        {"broadcast_to", [&](const Tensor& x) { return sum(mul(broadcast_to(slice(x, 0, 0, 1), {3, 4}), weights)); }},
        {"matmul", [&](const Tensor& x) { return sum(mul(matmul(x, mat), matmul(x, mat))); }},
        {"conv2d", [&](const Tensor& x) { return sum(mul(conv2d(reshape(x, {1, 1, 3, 4}), kern, 1, 1), conv2d(reshape(x, {1, 1, 3, 4}), kern, 1, 1))); }},
        {"unfold", [&](const Tensor& x) { return sum(mul(unfold(reshape(x, {1, 1, 3, 4}), 2, 1, 0), unfold(reshape(other, {1, 1, 3, 4}), 2, 1, 0))); }},
        {"softmax", [&](const Tensor& x) { return weighted(softmax(x, 1)); }},
        {"log_softmax", [&](const Tensor& x) { return weighted(log_softmax(x, 0)); }},
        {"layer_norm", [&](const Tensor& x) { return weighted(layer_norm(x, gamma, beta)); }},
        {"cross_entropy", [&](const Tensor& x) { return cross_entropy(mul_scalar(x, 3.0), labels); }},
    };
    for (const auto& [name, fn] : cases) {
        CAPTURE(name);
        for (int trial = 0; trial < 5; ++trial) {
            const auto res = finite_difference_check(fn, random_tensor({3, 4}, rng));
            CHECK(res.max_rel_error < 1e-4);
            CHECK(res.checked > 0);
        }
    }
}

TEST_CASE("reshape and transpose round trips are exact") {
    Rng rng(9);
    const Tensor x = random_tensor({2, 3, 4}, rng);
    const Tensor back = reshape(reshape(x, {6, 4}), {2, 3, 4});
    const Tensor tt = transpose(transpose(x, 0, 2), 0, 2);
    const Tensor pp = permute(permute(x, {2, 0, 1}), {1, 2, 0});
    for (std::size_t i = 0; i < x.numel(); ++i) {
        CHECK(back[i] == x[i]);
        CHECK(tt[i] == x[i]);
        CHECK(pp[i] == x[i]);
    }
}

TEST_CASE("backward is deterministic") {
    Rng rng(13);
    const Tensor w = random_tensor({6, 6}, rng);
    const Tensor x0 = random_tensor({4, 6}, rng);
    const auto run = [&] {
        Tape tape;
        Tensor x = x0.detach().requires_grad_();
        backward(sum(gelu(matmul(softmax(matmul(x, w), 1), w))));
        return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    CHECK(run() == run());
}

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
    Rng rng(21);
    for (auto [m, n, k] : {std::tuple{37, 29, 41}, std::tuple{64, 65, 16}, std::tuple{1, 50, 7}}) {
        for (bool ta : {false, true}) {
            for (bool tb : {false, true}) {
                const kernels::GemmShape s{static_cast<std::size_t>(m), static_cast<std::size_t>(n),
                                           static_cast<std::size_t>(k), ta, tb};
                const Tensor a = random_tensor({s.m * s.k}, rng);
                const Tensor b = random_tensor({s.k * s.n}, rng);
                std::vector<double> c1(s.m * s.n, 0.5), c2(s.m * s.n, 0.5);
#ifdef _OPENMP
                omp_set_num_threads(4);
#endif
                kernels::gemm_serial(s, a.data().data(), b.data().data(), c1.data(), true);
                kernels::gemm_parallel(s, a.data().data(), b.data().data(), c2.data(), true);
                CHECK(c1 == c2);
            }
        }
    }
    const kernels::ConvGeometry g{3, 9, 7, 3, 3, 2, 1};
    const Tensor img = random_tensor({5 * 3 * 9 * 7}, rng);
    std::vector<double> cols1(g.patch_len() * 5 * g.out_h() * g.out_w()), cols2(cols1.size());
    kernels::im2col_serial(g, 5, img.data().data(), cols1.data());
    kernels::im2col_parallel(g, 5, img.data().data(), cols2.data());
    CHECK(cols1 == cols2);
    std::vector<double> back1(img.numel(), 0.0), back2(img.numel(), 0.0);
    kernels::col2im_serial(g, 5, cols1.data(), back1.data());
    kernels::col2im_parallel(g, 5, cols1.data(), back2.data());
    CHECK(back1 == back2);
}
