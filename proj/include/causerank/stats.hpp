#pragma once

#include "causerank/core.hpp"

#include <boost/math/special_functions/beta.hpp>

#include <numeric>

namespace causerank::stats {

/// Null distribution of OLS r^2 with p predictors (intercept included) and n points:
/// r^2 ~ Beta((p-1)/2, (n-p)/2).
struct NullModel {
  double n = 0;
  double p = 0;
  double a = 0;
  double b = 0;
  double mean = 0;
  double variance = 0;

  double cdf(double x) const {
    if (x <= 0) return 0.0;
    if (x >= 1) return 1.0;
    return boost::math::ibeta(a, b, x);
  }
};

inline NullModel null_r2_model(double n, double p) {
  if (!(p > 1) || !(p < n)) throw Error(Errc::DomainError, "null r2 model requires 1 < p < n");
  NullModel m;
  m.n = n;
  m.p = p;
  m.a = (p - 1) / 2;
  m.b = (n - p) / 2;
  m.mean = (p - 1) / (n - 1);
  m.variance = m.mean * (1 - m.mean) / (1 + (n - 1) / 2);
  return m;
}

inline double wherry_adjust(double r2, double n, double p) {
  if (!(p < n)) throw Error(Errc::DomainError, "Wherry adjustment requires p < n");
  return 1 - (1 - r2) * (n - 1) / (n - p);
}

// Null mean of the adjusted r^2.
inline constexpr double adj_null_mean = 0.0;

inline double adj_null_variance(double n, double p) {
  if (!(p < n)) throw Error(Errc::DomainError, "adjusted r2 variance requires p < n");
  return (2 * (p - 1) / (n - p)) * (1 / (n + 1));
}

/// Chebyshev upper bound on P(r2_adj >= s) under the null, clamped to 1.
inline double chebyshev_pvalue(double s, double n, double p) {
  if (!(s > 0)) throw Error(Errc::DomainError, "Chebyshev p-value requires s > 0");
  if (!(p < n)) throw Error(Errc::DomainError, "Chebyshev p-value requires p < n");
  const double var = 2 * (p - 1) / ((n - p) * (n - 1));
  return std::min(1.0, var / (s * s));
}

using RejectionSet = std::vector<std::size_t>;

/// Indices with p <= alpha / k, ascending.
inline RejectionSet bonferroni(const std::vector<double>& pvals, double alpha) {
  RejectionSet out;
  const double k = static_cast<double>(pvals.size());
  for (std::size_t i = 0; i < pvals.size(); ++i)
    if (pvals[i] <= alpha / k) out.push_back(i);
  return out;
}

/// Benjamini-Hochberg step-up: the largest rank i with p_(i) <= i*alpha/k and every smaller rank.
inline RejectionSet benjamini_hochberg(const std::vector<double>& pvals, double alpha) {
  const std::size_t k = pvals.size();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return pvals[a] < pvals[b]; });
  std::size_t cutoff = 0;
  for (std::size_t r = 1; r <= k; ++r)
    if (pvals[order[r - 1]] <= static_cast<double>(r) * alpha / static_cast<double>(k)) cutoff = r;
  RejectionSet out(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cutoff));
  std::sort(out.begin(), out.end());
  return out;
}

/// Effective degrees of freedom of a ridge fit, from the eigenvalues d_j^2 of X^T X.
inline double ridge_effective_df(const std::vector<double>& eigenvalues, double lambda, double n) {
  double df = 0;
  for (double d2 : eigenvalues) {
    const double shrink = (d2 + lambda) > 0 ? d2 / (d2 + lambda) : 0.0;
    df += 2 * shrink - 1 / n - shrink * shrink;
  }
  return df;
}

/// One-sample Kolmogorov-Smirnov statistic of `samples` against `cdf`.
template <typename Cdf>
double ks_statistic(std::vector<double> samples, Cdf&& cdf) {
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = cdf(samples[i]);
    d = std::max({d, (static_cast<double>(i) + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

/// Asymptotic Kolmogorov p-value with the Stephens small-sample correction.
inline double ks_pvalue(double d, std::size_t n) {
  const double sn = std::sqrt(static_cast<double>(n));
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  if (lambda < 1e-3) return 1.0;
  double sum = 0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? 1.0 : -1.0) * term;
    if (term < 1e-12) break;
  }
  return std::clamp(2 * sum, 0.0, 1.0);
}

}  // namespace causerank::stats
