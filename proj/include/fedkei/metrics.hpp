#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "fedkei/errors.hpp"

namespace fedkei {

/// ROC AUC in Mann-Whitney form: the probability that a random positive
/// outscores a random negative, ties counting one half. Computed from
/// midranks so only the ordering of scores matters.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw InvalidInput("auc: scores and labels differ in length");
  std::size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw InvalidInput("auc: labels must be binary");
    n_pos += static_cast<std::size_t>(y);
  }
  const std::size_t n = labels.size();
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetric("auc: need at least one positive and one negative label");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Ranks are 1-based; tied runs share their midrank. Doubled ranks stay integral.
  double pos_rank_sum2 = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank2 = static_cast<double>(i + 1 + j);  // 2 * (i+1 + j) / 2
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) pos_rank_sum2 += midrank2;
    }
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  const double u2 = pos_rank_sum2 - np * (np + 1.0);
  return (u2 / 2.0) / (np * nn);
}

/// Learning curve area: mean of the per-epoch evaluation AUCs.
inline double lca(std::span<const double> trace) {
  if (trace.empty()) throw InvalidInput("lca: empty trace");
  double s = 0.0;
  for (double v : trace) s += v;
  return s / static_cast<double>(trace.size());
}

inline double mean(std::span<const double> xs) {
  if (xs.empty()) throw InvalidInput("mean: empty sample");
  double s = 0.0;
  for (double v : xs) s += v;
  return s / static_cast<double>(xs.size());
}

/// Unbiased sample variance (n - 1 denominator); 0 for a single value.
inline double sample_variance(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double s = 0.0;
  for (double v : xs) s += (v - m) * (v - m);
  return s / static_cast<double>(xs.size() - 1);
}

inline double sample_std(std::span<const double> xs) { return std::sqrt(sample_variance(xs)); }

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw InvalidInput("incomplete_beta: shape parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  // The continued fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::betacf(a, b, x) / a;
  return 1.0 - front * detail::betacf(b, a, 1.0 - x) / b;
}

/// Two-sided p-value of a Student t statistic with (possibly fractional) df.
inline double student_t_two_sided_p(double t, double df) {
  if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct WelchResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
inline WelchResult welch_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw InvalidInput("welch_t: need at least two samples per group");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double ma = mean(a), mb = mean(b);
  const double sa = sample_variance(a) / na, sb = sample_variance(b) / nb;
  const double se2 = sa + sb;
  if (se2 == 0.0) {
    if (ma == mb) return {0.0, 1.0, na + nb - 2.0};
    return {ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity(), 0.0,
            na + nb - 2.0};
  }
  WelchResult r;
  r.t = (ma - mb) / std::sqrt(se2);
  r.df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

/// Superscript convention for significance marks: ‡ p<0.001, † p<0.01, * p<0.05.
inline const char* significance_mark(double p) {
  if (p < 0.001) return "‡";
  if (p < 0.01) return "†";
  if (p < 0.05) return "*";
  return "";
}

}  // namespace fedkei
