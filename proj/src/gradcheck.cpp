#include "advlens/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace advlens {

namespace {

double eval_at(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, std::size_t i, double delta) {
    Tensor xp = x.detach();
    xp.mutable_data()[i] += delta;
    return f(xp).item();
}

}  // namespace

GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    if (h <= 0) throw std::invalid_argument("finite_difference_check: h must be positive");
    std::vector<double> analytic(x.numel(), 0.0);
    {
        Tape tape;
        Tensor leaf = x.detach();
        leaf.requires_grad_();
        Tensor loss = f(leaf);
        if (loss.numel() != 1) {
            throw std::invalid_argument("finite_difference_check: f must return a scalar, got " + shape_str(loss.shape()));
        }
        if (loss.requires_grad()) {
            tape.backward(loss);
            if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
        }
    }

    NoGradScope no_grad;
    GradCheckResult result;
    const double f0 = f(x.detach()).item();
    // Round-off in f alone moves a central difference by about eps·|f|/h, so
    // gradients below this scale are compared in absolute terms.
    const double floor = std::max(1e-8, 1e4 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::fabs(f0)) / h);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double fp = eval_at(f, x, i, h);
        const double fm = eval_at(f, x, i, -h);
        const double fp2 = eval_at(f, x, i, h / 2);
        const double fm2 = eval_at(f, x, i, -h / 2);
        const double slope_plus = (fp - f0) / h;
        const double slope_minus = (f0 - fm) / h;
        const double second = slope_plus - slope_minus;
        const double second_half = ((fp2 - f0) - (f0 - fm2)) / (h / 2);
        const double scale = std::max({1.0, std::fabs(slope_plus), std::fabs(slope_minus)});
        if (std::fabs(second - 2.0 * second_half) > 1e-7 * scale || std::fabs(second) > 1e-3 * scale) {
            ++result.excluded;
            continue;
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), floor});
        result.max_rel_error = std::max(result.max_rel_error, std::fabs(analytic[i] - numeric) / denom);
        ++result.checked;
    }
    return result;
}

}  // namespace advlens
