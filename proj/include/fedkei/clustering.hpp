#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fedkei/errors.hpp"
#include "fedkei/paramspace.hpp"
#include "fedkei/rng.hpp"

namespace fedkei {

/// Hard partition of M modules into K clusters.
struct ClusterAssignment {
  std::size_t k = 0;
  /// labels[j] is the cluster of column j; B[c][j] = (labels[j] == c).
  std::vector<std::size_t> labels;
  std::vector<ModuleVector> centroids;
  double inertia = 0.0;
  /// Inertia after every completed Lloyd iteration.
  std::vector<double> inertia_history;
  std::size_t iterations = 0;

  std::size_t m() const noexcept { return labels.size(); }
  int b(std::size_t c, std::size_t j) const { return labels[j] == c ? 1 : 0; }

  std::vector<std::size_t> row_sizes() const {
    std::vector<std::size_t> n(k, 0);
    for (auto l : labels) ++n[l];
    return n;
  }

  std::vector<std::vector<int>> matrix() const {
    std::vector<std::vector<int>> out(k, std::vector<int>(m(), 0));
    for (std::size_t j = 0; j < m(); ++j) out[labels[j]][j] = 1;
    return out;
  }

  /// Text dump of B, one row per cluster.
  std::string to_text() const {
    std::ostringstream os;
    for (const auto& row : matrix()) {
      for (std::size_t j = 0; j < row.size(); ++j) os << (j ? " " : "") << row[j];
      os << '\n';
    }
    return os.str();
  }
};

/// Sum of squared distances from each column to its assigned centroid.
inline double compute_inertia(const ModuleMatrix& mods, const std::vector<std::size_t>& labels,
                              const std::vector<ModuleVector>& centroids) {
  double s = 0.0;
  for (std::size_t j = 0; j < mods.cols(); ++j) s += squared_distance(mods[j], centroids[labels[j]]);
  return s;
}

struct SeedResult {
  std::vector<std::size_t> indices;
  std::vector<ModuleVector> centroids;
};

/// k-means++ seeding. The first centre is uniform over columns; each further
/// centre is drawn with probability proportional to the squared distance to
/// the nearest centre chosen so far. With local_trials > 1 that many
/// candidates are drawn per step and the one giving the lowest potential is
/// kept (greedy k-means++); local_trials == 0 selects 2 + floor(ln K).
inline SeedResult kmeanspp_seed(const ModuleMatrix& mods, std::size_t k, std::uint64_t seed, std::size_t local_trials = 0) {
  const std::size_t m = mods.cols();
  if (k < 1) throw InvalidInput("kmeanspp_seed: K must be >= 1");
  if (k > m) throw InvalidInput("kmeanspp_seed: K=" + std::to_string(k) + " exceeds M=" + std::to_string(m));
  if (local_trials == 0) local_trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));

  Rng rng(seed);
  SeedResult out;
  std::uniform_int_distribution<std::size_t> first(0, m - 1);
  out.indices.push_back(first(rng));
  std::vector<double> d2(m);
  for (std::size_t j = 0; j < m; ++j) d2[j] = squared_distance(mods[j], mods[out.indices[0]]);

  std::vector<double> trial(m);
  while (out.indices.size() < k) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t best = m;
    double best_pot = std::numeric_limits<double>::infinity();
    std::vector<double> best_d2;
    for (std::size_t tr = 0; tr < local_trials; ++tr) {
      std::size_t cand;
      if (total > 0.0) {
        std::discrete_distribution<std::size_t> pick(d2.begin(), d2.end());
        cand = pick(rng);
      } else {
        // Every remaining column coincides with a chosen centre.
        std::vector<std::size_t> free;
        for (std::size_t j = 0; j < m; ++j) {
          if (std::find(out.indices.begin(), out.indices.end(), j) == out.indices.end()) free.push_back(j);
        }
        std::uniform_int_distribution<std::size_t> u(0, free.size() - 1);
        cand = free[u(rng)];
      }
      double pot = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        trial[j] = std::min(d2[j], squared_distance(mods[j], mods[cand]));
        pot += trial[j];
      }
      if (pot < best_pot) {
        best_pot = pot;
        best = cand;
        best_d2 = trial;
      }
    }
    out.indices.push_back(best);
    d2 = std::move(best_d2);
  }
  for (auto j : out.indices) out.centroids.push_back(mods[j]);
  return out;
}

struct LloydOptions {
  std::size_t max_iter = 100;
  /// Stop once no centroid moves farther than this.
  double tol = 1e-8;
};

/// Lloyd iterations from the given centroids. Empty clusters are repaired by
/// moving the point farthest from its centroid into them. Inertia is
/// recorded after every iteration and must never increase.
inline ClusterAssignment lloyd(const ModuleMatrix& mods, std::vector<ModuleVector> centroids, const LloydOptions& opt = {}) {
  const std::size_t m = mods.cols(), k = centroids.size();
  if (k == 0 || k > m) throw InvalidInput("lloyd: need 1 <= K <= M centroids");
  for (const auto& c : centroids) {
    if (c.dim() != mods.dim()) throw InvalidInput("lloyd: centroid dim does not match modules");
  }
  ClusterAssignment a;
  a.k = k;
  a.labels.assign(m, 0);
  std::vector<double> dist(m);

  for (std::size_t iter = 0; iter < std::max<std::size_t>(opt.max_iter, 1); ++iter) {
    // Assign.
    for (std::size_t j = 0; j < m; ++j) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(mods[j], centroids[c]);
        if (d < best) {
          best = d;
          a.labels[j] = c;
        }
      }
      dist[j] = best;
    }
    // Repair empty clusters.
    auto sizes = a.row_sizes();
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] != 0) continue;
      std::size_t far = m;
      for (std::size_t j = 0; j < m; ++j) {
        if (sizes[a.labels[j]] > 1 && (far == m || dist[j] > dist[far])) far = j;
      }
      if (far == m) throw InvariantViolation("lloyd: cannot repair empty cluster");
      --sizes[a.labels[far]];
      a.labels[far] = c;
      ++sizes[c];
      centroids[c] = mods[far];
      dist[far] = 0.0;
    }
    // Update.
    double moved = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> w(m, 0.0);
      const double inv = 1.0 / static_cast<double>(sizes[c]);
      for (std::size_t j = 0; j < m; ++j) {
        if (a.labels[j] == c) w[j] = inv;
      }
      auto next = weighted_sum(mods, w);
      moved = std::max(moved, std::sqrt(squared_distance(next, centroids[c])));
      centroids[c] = std::move(next);
    }
    const double inertia = compute_inertia(mods, a.labels, centroids);
    if (!a.inertia_history.empty()) {
      const double prev = a.inertia_history.back();
      if (inertia > prev + 1e-12 * std::max(1.0, prev)) {
        throw InvariantViolation("lloyd: inertia increased from " + std::to_string(prev) + " to " + std::to_string(inertia));
      }
    }
    a.inertia_history.push_back(inertia);
    a.iterations = iter + 1;
    if (moved < opt.tol) break;
  }
  a.centroids = std::move(centroids);
  a.inertia = compute_inertia(mods, a.labels, a.centroids);
  return a;
}

/// Seeding plus Lloyd. K is clamped to M.
inline ClusterAssignment kmeans(const ModuleMatrix& mods, std::size_t k, std::uint64_t seed, const LloydOptions& opt = {},
                                std::size_t local_trials = 0) {
  k = std::min(k, mods.cols());
  auto s = kmeanspp_seed(mods, k, seed, local_trials);
  return lloyd(mods, std::move(s.centroids), opt);
}

/// Assignment with fixed labels (e.g. one group per client); centroids are the group means.
inline ClusterAssignment assignment_from_labels(const ModuleMatrix& mods, std::vector<std::size_t> labels, std::size_t k) {
  if (labels.size() != mods.cols()) throw InvalidInput("assignment_from_labels: label count mismatch");
  ClusterAssignment a;
  a.k = k;
  a.labels = std::move(labels);
  for (auto l : a.labels) {
    if (l >= k) throw InvalidInput("assignment_from_labels: label out of range");
  }
  const auto sizes = a.row_sizes();
  for (std::size_t c = 0; c < k; ++c) {
    if (sizes[c] == 0) throw InvalidInput("assignment_from_labels: empty group");
    std::vector<double> w(mods.cols(), 0.0);
    for (std::size_t j = 0; j < mods.cols(); ++j) {
      if (a.labels[j] == c) w[j] = 1.0 / static_cast<double>(sizes[c]);
    }
    a.centroids.push_back(weighted_sum(mods, w));
  }
  a.inertia = compute_inertia(mods, a.labels, a.centroids);
  return a;
}

/// Row-normalized B: row c has 1/|c| at members of c, 0 elsewhere.
inline std::vector<std::vector<double>> normalized_rows(const ClusterAssignment& a) {
  const auto sizes = a.row_sizes();
  std::vector<std::vector<double>> rows(a.k, std::vector<double>(a.m(), 0.0));
  for (std::size_t c = 0; c < a.k; ++c) {
    if (sizes[c] == 0) throw InvariantViolation("cluster " + std::to_string(c) + " is empty");
    double total = 0.0;
    for (std::size_t j = 0; j < a.m(); ++j) total += a.b(c, j);
    for (std::size_t j = 0; j < a.m(); ++j) rows[c][j] = a.b(c, j) / total;
  }
  return rows;
}

/// Cluster-specific modules: the member average of each cluster.
inline std::vector<ModuleVector> cluster_modules(const ClusterAssignment& a, const ModuleMatrix& mods) {
  if (a.m() != mods.cols()) throw InvalidInput("cluster_modules: assignment does not match module count");
  std::vector<ModuleVector> out;
  for (const auto& row : normalized_rows(a)) out.push_back(weighted_sum(mods, row));
  return out;
}

}  // namespace fedkei
