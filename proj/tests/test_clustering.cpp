#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "fedkei/clustering.hpp"
#include "fedkei/errors.hpp"
#include "support.hpp"

using namespace fedkei;

namespace {

struct Planted {
  ModuleMatrix mods;
  std::vector<std::size_t> labels;
};

// Three isotropic unit-variance components whose centres are pairwise 10 apart.
Planted planted_mixture(std::uint64_t seed, std::size_t per = 10) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  const double s = 10.0;
  const std::vector<std::vector<double>> centres{{0.0, 0.0}, {s, 0.0}, {s / 2.0, s * std::sqrt(3.0) / 2.0}};
  Planted p;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < per; ++i) {
      p.mods.push_back(ModuleVector{centres[c][0] + n(rng), centres[c][1] + n(rng)});
      p.labels.push_back(c);
    }
  }
  return p;
}

double choose2(double n) { return n * (n - 1.0) / 2.0; }

// Adjusted Rand index from the contingency table.
double adjusted_rand_index(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::map<std::pair<std::size_t, std::size_t>, double> table;
  std::map<std::size_t, double> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1;
    rows[a[i]] += 1;
    cols[b[i]] += 1;
  }
  double idx = 0, ra = 0, cb = 0;
  for (auto& [k, v] : table) idx += choose2(v);
  for (auto& [k, v] : rows) ra += choose2(v);
  for (auto& [k, v] : cols) cb += choose2(v);
  const double expected = ra * cb / choose2(static_cast<double>(a.size()));
  const double max_idx = (ra + cb) / 2.0;
  return (idx - expected) / (max_idx - expected);
}

}  // namespace

TEST(AdjustedRand, Oracle) {
  EXPECT_DOUBLE_EQ(adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}), 1.0);
  // Reference value computed by hand from the contingency table.
  EXPECT_NEAR(adjusted_rand_index({0, 0, 0, 1, 1, 1}, {0, 0, 1, 1, 2, 2}), 0.24242424242424243, 1e-15);
}

TEST(Seeding, KEqualsMPicksEveryColumn) {
  std::mt19937_64 rng(1);
  ModuleMatrix m(support::random_vectors(7, 3, rng));
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto r = kmeanspp_seed(m, 7, s);
    std::set<std::size_t> idx(r.indices.begin(), r.indices.end());
    EXPECT_EQ(idx.size(), 7u);
  }
}

TEST(Seeding, KEqualsOneIsAColumn) {
  std::mt19937_64 rng(2);
  ModuleMatrix m(support::random_vectors(5, 3, rng));
  auto r = kmeanspp_seed(m, 1, 4);
  ASSERT_EQ(r.centroids.size(), 1u);
  EXPECT_EQ(r.centroids[0], m[r.indices[0]]);
}

TEST(Seeding, KAboveMIsRejected) {
  std::mt19937_64 rng(3);
  ModuleMatrix m(support::random_vectors(3, 2, rng));
  EXPECT_THROW(kmeanspp_seed(m, 4, 1), InvalidInput);
  EXPECT_THROW(kmeanspp_seed(m, 0, 1), InvalidInput);
}

TEST(Seeding, DuplicateColumnsStillGiveDistinctPicks) {
  ModuleMatrix m({ModuleVector{1, 1}, ModuleVector{1, 1}, ModuleVector{1, 1}});
  auto r = kmeanspp_seed(m, 3, 9);
  std::set<std::size_t> idx(r.indices.begin(), r.indices.end());
  EXPECT_EQ(idx.size(), 3u);
}

TEST(Seeding, OnePerPlantedComponent) {
  int hits = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto p = planted_mixture(1000 + s);
    const auto r = kmeanspp_seed(p.mods, 3, s);
    std::set<std::size_t> comps;
    for (auto j : r.indices) comps.insert(p.labels[j]);
    hits += comps.size() == 3;
  }
  EXPECT_GE(hits, 95);
}

TEST(Lloyd, TwoFarPairs) {
  ModuleMatrix m({ModuleVector{0, 0}, ModuleVector{0, 1}, ModuleVector{100, 0}, ModuleVector{100, 1}});
  auto a = kmeans(m, 2, 5);
  EXPECT_EQ(a.labels[0], a.labels[1]);
  EXPECT_EQ(a.labels[2], a.labels[3]);
  EXPECT_NE(a.labels[0], a.labels[2]);
  // Each point is 0.5 from its pair mean.
  EXPECT_NEAR(a.inertia, 4 * 0.25, 1e-12);
}

TEST(Lloyd, KEqualsMIsPermutationWithZeroInertia) {
  std::mt19937_64 rng(6);
  ModuleMatrix m(support::random_vectors(6, 4, rng));
  auto a = kmeans(m, 6, 2);
  EXPECT_EQ(a.inertia, 0.0);
  for (auto row : a.row_sizes()) EXPECT_EQ(row, 1u);
}

TEST(Lloyd, KClampedToM) {
  std::mt19937_64 rng(7);
  ModuleMatrix m(support::random_vectors(3, 4, rng));
  EXPECT_EQ(kmeans(m, 9, 1).k, 3u);
}

TEST(Lloyd, AssignmentInvariants) {
  std::mt19937_64 rng(8);
  for (std::uint64_t s = 0; s < 50; ++s) {
    const std::size_t m = 5 + s % 20, k = 1 + s % 5;
    ModuleMatrix mods(support::random_vectors(m, 3, rng));
    auto a = kmeans(mods, k, s);
    const auto B = a.matrix();
    for (std::size_t j = 0; j < m; ++j) {
      int ones = 0;
      for (std::size_t c = 0; c < a.k; ++c) ones += B[c][j];
      EXPECT_EQ(ones, 1);
    }
    for (std::size_t c = 0; c < a.k; ++c) EXPECT_GE(std::count(B[c].begin(), B[c].end(), 1), 1);
    double sum = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t d = 0; d < 3; ++d) {
        const double diff = mods[j][d] - a.centroids[a.labels[j]][d];
        sum += diff * diff;
      }
    }
    EXPECT_NEAR(a.inertia, sum, 1e-9);
    for (std::size_t i = 1; i < a.inertia_history.size(); ++i) {
      EXPECT_LE(a.inertia_history[i], a.inertia_history[i - 1] * (1 + 1e-12));
    }
  }
}

TEST(Lloyd, EmptyClusterIsRepaired) {
  ModuleMatrix m({ModuleVector{0.0}, ModuleVector{1.0}, ModuleVector{10.0}, ModuleVector{11.0}});
  // The third centroid is far from every point and starts empty.
  auto a = lloyd(m, {ModuleVector{0.5}, ModuleVector{10.5}, ModuleVector{1000.0}});
  for (auto n : a.row_sizes()) EXPECT_GE(n, 1u);
}

TEST(Lloyd, PlantedMixtureRecovered) {
  int good = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto p = planted_mixture(5000 + s);
    const auto a = kmeans(p.mods, 3, s);
    good += adjusted_rand_index(a.labels, p.labels) >= 0.9;
  }
  EXPECT_GE(good, 95);
}

TEST(ClusterModules, Examples) {
  ModuleMatrix m({ModuleVector{2, 0}, ModuleVector{0, 2}, ModuleVector{5, 5}});
  auto a = assignment_from_labels(m, {0, 0, 1}, 2);
  const auto th = cluster_modules(a, m);
  EXPECT_EQ(th[0], (ModuleVector{1, 1}));
  EXPECT_EQ(th[1], (ModuleVector{5, 5}));
  auto one = assignment_from_labels(m, {0, 0, 0}, 1);
  const auto mean = cluster_modules(one, m)[0];
  EXPECT_NEAR(mean[0], 7.0 / 3.0, 1e-15);
  EXPECT_NEAR(mean[1], 7.0 / 3.0, 1e-15);
}

TEST(ClusterModules, EmptyRowIsInvariantViolation) {
  ClusterAssignment a;
  a.k = 2;
  a.labels = {0, 0};
  EXPECT_THROW(normalized_rows(a), InvariantViolation);
}
