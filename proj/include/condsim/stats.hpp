#pragma once

// Small statistics toolkit: estimates with standard errors, Kolmogorov-Smirnov
// distances and p-values, quantiles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace condsim::stats {

struct Estimate {
  double value = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  std::size_t n = 0;
};

inline Estimate mean_se(std::span<const double> xs) {
  Estimate e;
  e.n = xs.size();
  if (xs.empty()) return e;
  // Two-pass for accuracy; summation in index order keeps results reproducible.
  double s = 0.0;
  for (double x : xs) s += x;
  const double m = s / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  e.value = m;
  e.se = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size())) : 0.0;
  return e;
}

// Sample variance together with the large-sample SE sqrt((m4 - s^4)/n).
inline Estimate variance_se(std::span<const double> xs) {
  Estimate e;
  e.n = xs.size();
  if (xs.size() < 2) return e;
  const double n = static_cast<double>(xs.size());
  double s = 0.0;
  for (double x : xs) s += x;
  const double m = s / n;
  double m2 = 0.0, m4 = 0.0;
  for (double x : xs) {
    const double d2 = (x - m) * (x - m);
    m2 += d2;
    m4 += d2 * d2;
  }
  const double var = m2 / (n - 1.0);
  const double mu2 = m2 / n, mu4 = m4 / n;
  e.value = var;
  e.se = std::sqrt(std::max(0.0, mu4 - mu2 * mu2) / n);
  return e;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// sup |F_n - F| for a continuous reference CDF. Ties in the sample are handled
// by comparing F against both one-sided limits of the empirical CDF.
inline double ks_distance(std::vector<double> xs, const std::function<double(double)>& cdf) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  std::size_t i = 0;
  while (i < xs.size()) {
    std::size_t j = i;
    while (j < xs.size() && xs[j] == xs[i]) ++j;
    const double f = cdf(xs[i]);
    d = std::max(d, std::abs(f - static_cast<double>(i) / n));
    d = std::max(d, std::abs(static_cast<double>(j) / n - f));
    i = j;
  }
  return d;
}

inline double ks_normal(std::vector<double> xs, double mu, double sigma) {
  return ks_distance(std::move(xs), [=](double x) { return normal_cdf((x - mu) / sigma); });
}

// Asymptotic Kolmogorov survival function Q(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2).
inline double kolmogorov_q(double lambda) {
  if (lambda < 0.2) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? term : -term);
    if (term < 1e-18) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

// p-value of a one-sample KS distance with Stephens' small-sample correction.
inline double ks_pvalue(double d, double n_eff) {
  const double sn = std::sqrt(n_eff);
  return kolmogorov_q((sn + 0.12 + 0.11 / sn) * d);
}

struct KsResult {
  double distance = 0.0;
  double p_value = 1.0;
};

inline KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  KsResult r;
  r.distance = d;
  r.p_value = ks_pvalue(d, na * nb / (na + nb));
  return r;
}

// Linear-interpolation quantile (type 7) of a copy of the data.
inline double quantile(std::vector<double> xs, double p) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const double h = (static_cast<double>(xs.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (h - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

inline double median(std::vector<double> xs) { return quantile(std::move(xs), 0.5); }

// Mean with an SE from non-overlapping batch means, for correlated sequences.
inline Estimate batch_means(std::span<const double> xs, std::size_t n_batches) {
  Estimate e;
  e.n = xs.size();
  if (xs.empty()) return e;
  n_batches = std::clamp<std::size_t>(n_batches, 1, xs.size());
  const std::size_t len = xs.size() / n_batches;
  std::vector<double> means;
  for (std::size_t b = 0; b < n_batches; ++b) {
    double s = 0.0;
    for (std::size_t k = b * len; k < (b + 1) * len; ++k) s += xs[k];
    means.push_back(s / static_cast<double>(len));
  }
  const Estimate m = mean_se(means);
  e.value = m.value;
  e.se = m.se;
  return e;
}

}  // namespace condsim::stats
