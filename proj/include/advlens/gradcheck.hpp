#pragma once

#include <cstddef>
#include <functional>

#include "advlens/tensor.hpp"

namespace advlens {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t excluded = 0;  // coordinates with a kink within h
};

/// Compares the tape gradient of a scalar function against central
/// differences (f(x+h·e_i) - f(x-h·e_i)) / 2h, coordinate by coordinate.
///
/// Relative error per coordinate is |analytic - numeric| / max(|analytic|,
/// |numeric|, floor), where floor = max(1e-8, 1e4·eps·max(1, |f(x)|)/h) sits
/// four decades above the round-off of the difference quotient (about 2e-7
/// for h = 1e-5 and |f| near 1). A coordinate is treated as kink-adjacent, and skipped,
/// when its one-sided slopes disagree by more than smooth curvature allows:
/// the second difference at h is not twice the one at h/2, or it exceeds
/// 1e-3 of the local slope scale. Non-differentiable points (relu, abs,
/// sign, clamp, max) are excluded this way.
GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                        double h = 1e-5);

}  // namespace advlens
