#pragma once

#include <cstdint>

namespace advlens::stats {

double norm_cdf(double x);
/// Inverse standard normal CDF for p in (0, 1); ±inf at the endpoints.
double norm_ppf(double p);

/// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double x, double a, double b);
/// Smallest q with I_q(a, b) >= p, by bisection.
double beta_quantile(double p, double a, double b);

double binomial_pmf(std::uint64_t k, std::uint64_t n, double p);
/// P(X <= k) for X ~ Bin(n, p).
double binomial_cdf(std::uint64_t k, std::uint64_t n, double p);
/// Two-sided exact test: total probability of outcomes no likelier than k.
double binomial_test_two_sided(std::uint64_t k, std::uint64_t n, double p = 0.5);

/// One-sided Clopper–Pearson bounds at confidence 1 − alpha.
double clopper_pearson_lower(std::uint64_t k, std::uint64_t n, double alpha);
double clopper_pearson_upper(std::uint64_t k, std::uint64_t n, double alpha);

}  // namespace advlens::stats
