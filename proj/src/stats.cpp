#include "advlens/stats.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace advlens::stats {

namespace {

// Continued fraction for I_x(a, b), modified Lentz.
double beta_cf(double x, double a, double b) {
    constexpr double tiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-16) break;
    }
    return h;
}

double log_choose(std::uint64_t n, std::uint64_t k) {
    return std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
           std::lgamma(static_cast<double>(n - k) + 1);
}

void check_alpha(double alpha) {
    if (!(alpha > 0 && alpha < 1)) throw std::invalid_argument("confidence level alpha must lie in (0, 1)");
}

}  // namespace

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double norm_ppf(double p) {
    if (std::isnan(p) || p < 0 || p > 1) throw std::invalid_argument("norm_ppf: p outside [0, 1]");
    if (p == 0) return -std::numeric_limits<double>::infinity();
    if (p == 1) return std::numeric_limits<double>::infinity();
    // Acklam's rational approximation, relative error ~1e-9.
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double plow = 0.02425, phigh = 1 - plow;
    double x;
    if (p < plow) {
        const double q = std::sqrt(-2 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    } else if (p <= phigh) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
    } else {
        const double q = std::sqrt(-2 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    // Halley refinement against erfc brings it to full precision. The
    // residual uses the upper tail for p > 1/2 to avoid cancellation.
    for (int it = 0; it < 2; ++it) {
        const double e = p <= 0.5 ? norm_cdf(x) - p : (1.0 - p) - 0.5 * std::erfc(x / std::numbers::sqrt2);
        const double u = e * std::sqrt(2 * std::numbers::pi) * std::exp(x * x / 2);
        x = x - u / (1 + x * u / 2);
    }
    return x;
}

double incomplete_beta(double x, double a, double b) {
    if (!(a > 0 && b > 0)) throw std::invalid_argument("incomplete_beta: a and b must be positive");
    if (x <= 0) return 0.0;
    if (x >= 1) return 1.0;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1) / (a + b + 2)) return front * beta_cf(x, a, b) / a;
    return 1.0 - front * beta_cf(1 - x, b, a) / b;
}

double beta_quantile(double p, double a, double b) {
    if (p <= 0) return 0.0;
    if (p >= 1) return 1.0;
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 200 && hi - lo > 1e-17; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        if (incomplete_beta(mid, a, b) < p) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

double binomial_pmf(std::uint64_t k, std::uint64_t n, double p) {
    if (k > n) return 0.0;
    if (p <= 0) return k == 0 ? 1.0 : 0.0;
    if (p >= 1) return k == n ? 1.0 : 0.0;
    return std::exp(log_choose(n, k) + static_cast<double>(k) * std::log(p) + static_cast<double>(n - k) * std::log1p(-p));
}

double binomial_cdf(std::uint64_t k, std::uint64_t n, double p) {
    if (k >= n) return 1.0;
    return incomplete_beta(1.0 - p, static_cast<double>(n - k), static_cast<double>(k) + 1.0);
}

double binomial_test_two_sided(std::uint64_t k, std::uint64_t n, double p) {
    if (k > n) throw std::invalid_argument("binomial_test_two_sided: k > n");
    const double observed = binomial_pmf(k, n, p);
    // Same relative slack as common statistical packages use for ties.
    const double cutoff = observed * (1.0 + 1e-7);
    double total = 0.0;
    for (std::uint64_t j = 0; j <= n; ++j) {
        const double pj = binomial_pmf(j, n, p);
        if (pj <= cutoff) total += pj;
    }
    return std::min(1.0, total);
}

double clopper_pearson_lower(std::uint64_t k, std::uint64_t n, double alpha) {
    check_alpha(alpha);
    if (k > n) throw std::invalid_argument("clopper_pearson_lower: k > n");
    if (k == 0) return 0.0;
    return beta_quantile(alpha, static_cast<double>(k), static_cast<double>(n - k) + 1.0);
}

double clopper_pearson_upper(std::uint64_t k, std::uint64_t n, double alpha) {
    check_alpha(alpha);
    if (k > n) throw std::invalid_argument("clopper_pearson_upper: k > n");
    if (k == n) return 1.0;
    return beta_quantile(1.0 - alpha, static_cast<double>(k) + 1.0, static_cast<double>(n - k));
}

}  // namespace advlens::stats
