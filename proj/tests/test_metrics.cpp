#include <gtest/gtest.h>

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <random>
#include <string>

#include "fedkei/errors.hpp"
#include "fedkei/metrics.hpp"

using namespace fedkei;

namespace {

// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double good = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1;
      good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return good / pairs;
}

double boost_two_sided_p(double t, double df) {
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

}  // namespace

TEST(Auc, Examples) {
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.1, 0.2, 0.3, 0.4}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.4, 0.3, 0.2, 0.1}, std::vector<int>{0, 0, 1, 1}), 0.0);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{0, 1, 0, 1}), 0.5);
}

TEST(Auc, MatchesPairwiseCountWithTies) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> len(2, 40), level(0, 5), bit(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = len(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = level(rng) * 0.25;
      y[i] = bit(rng);
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_NEAR(auc(s, y), pairwise_auc(s, y), 1e-12) << "trial " << trial;
  }
}

TEST(Auc, InvariantUnderMonotoneTransformAndComplementary) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(30), t(30), neg(30);
    std::vector<int> y(30);
    for (int i = 0; i < 30; ++i) {
      s[i] = n(rng);
      t[i] = std::exp(3.0 * s[i]) + 7.0;
      neg[i] = -s[i];
      y[i] = i % 2;
    }
    EXPECT_DOUBLE_EQ(auc(s, y), auc(t, y));
    EXPECT_NEAR(auc(s, y) + auc(neg, y), 1.0, 1e-12);
  }
}

TEST(Auc, SingleClassIsUndefined) {
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), UndefinedMetric);
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}), UndefinedMetric);
  EXPECT_THROW(auc(std::vector<double>{0.1}, std::vector<int>{0, 1}), InvalidInput);
}

TEST(Lca, Examples) {
  EXPECT_DOUBLE_EQ(lca(std::vector<double>{0.5, 0.7, 0.9}), 0.7);
  EXPECT_DOUBLE_EQ(lca(std::vector<double>{0.8}), 0.8);
  EXPECT_EQ(lca(std::vector<double>(7, 0.625)), 0.625);
  EXPECT_EQ(lca(std::vector<double>{0.5, 0.75, 0.25}), lca(std::vector<double>{0.25, 0.5, 0.75}));
  EXPECT_THROW(lca(std::vector<double>{}), InvalidInput);
}

TEST(Welch, TextbookCase) {
  // Reference values from scipy.stats.ttest_ind(a, b, equal_var=False).
  const std::vector<double> a{27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6, 19.0, 21.7, 21.4};
  const std::vector<double> b{27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0, 24.8, 20.2, 21.9, 22.1, 22.9, 30.6, 24.5};
  const auto r = welch_t(a, b);
  EXPECT_NEAR(r.t, -2.8558108348642905, 1e-12);
  EXPECT_NEAR(r.df, 27.913273328085467, 1e-10);
  EXPECT_NEAR(r.p, 0.008012263751444178, 1e-12);
}

TEST(Welch, MatchesBoostStudentT) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<int> len(2, 25);
  std::uniform_real_distribution<double> shift(-2.0, 2.0), scale(0.1, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(len(rng)), b(len(rng));
    const double sa = scale(rng), sb = scale(rng), d = shift(rng);
    for (auto& x : a) x = sa * n(rng);
    for (auto& x : b) x = d + sb * n(rng);
    const auto r = welch_t(a, b);
    EXPECT_NEAR(r.p, boost_two_sided_p(r.t, r.df), 1e-6) << "trial " << trial;
  }
}

TEST(Welch, DegenerateAndSymmetric) {
  const std::vector<double> a{0.7, 0.7, 0.7}, b{0.7, 0.7, 0.7};
  const auto same = welch_t(a, b);
  EXPECT_EQ(same.t, 0.0);
  EXPECT_EQ(same.p, 1.0);

  std::vector<double> lo, hi;
  for (int i = 0; i < 10; ++i) {
    lo.push_back(0.70 + 1e-4 * (i % 3));
    hi.push_back(0.90 + 1e-4 * (i % 4));
  }
  EXPECT_LT(welch_t(hi, lo).p, 1e-6);
  const std::vector<double> zeros{0.0, 1e-9, -1e-9}, ones{1.0, 1.0 + 1e-9, 1.0 - 1e-9};
  EXPECT_LT(welch_t(zeros, ones).p, 1e-6);

  const std::vector<double> x{1.0, 2.5, 3.1, 0.4}, y{2.0, 2.2, 5.1, 3.3, 4.0};
  const auto xy = welch_t(x, y), yx = welch_t(y, x);
  EXPECT_DOUBLE_EQ(xy.t, -yx.t);
  EXPECT_DOUBLE_EQ(xy.p, yx.p);
  EXPECT_THROW(welch_t(std::vector<double>{1.0}, y), InvalidInput);
}

TEST(Welch, IncompleteBetaMatchesBoost) {
  for (double df : {1.0, 2.5, 7.0, 30.0, 200.0}) {
    for (double t : {0.0, 0.3, 1.0, 2.0, 4.5, 12.0}) {
      EXPECT_NEAR(student_t_two_sided_p(t, df), boost_two_sided_p(t, df), 1e-9) << "df " << df << " t " << t;
    }
  }
}

TEST(Significance, Marks) {
  EXPECT_EQ(std::string(significance_mark(0.0005)), "‡");
  EXPECT_EQ(std::string(significance_mark(0.005)), "†");
  EXPECT_EQ(std::string(significance_mark(0.03)), "*");
  EXPECT_EQ(std::string(significance_mark(0.05)), "");
  EXPECT_EQ(std::string(significance_mark(0.5)), "");
}

TEST(Summary, MeanAndStd) {
  const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  EXPECT_DOUBLE_EQ(mean(v), 5.0);
  EXPECT_NEAR(sample_std(v), std::sqrt(32.0 / 7.0), 1e-15);
}
