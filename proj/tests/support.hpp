#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "fedkei/model.hpp"
#include "fedkei/paramspace.hpp"

namespace fedkei::support {

inline ModuleVector random_vector(std::size_t dim, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  ModuleVector v(dim);
  for (auto& x : v.values()) x = n(rng);
  return v;
}

inline std::vector<ModuleVector> random_vectors(std::size_t count, std::size_t dim, std::mt19937_64& rng, double sd = 1.0) {
  std::vector<ModuleVector> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(random_vector(dim, rng, sd));
  return out;
}

/// Gaussian features with both labels present.
inline TaskBatch random_batch(std::size_t n, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(n * dim);
  for (auto& v : x) v = g(rng);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % 2);
  std::shuffle(y.begin(), y.end(), rng);
  return TaskBatch(dim, std::move(x), std::move(y));
}

inline TaskModule random_module(const Model& m, std::mt19937_64& rng, double sd = 0.5) {
  return {random_vector(m.config().adapter_dim(), rng, sd), random_vector(m.config().head_dim(), rng, sd)};
}

}  // namespace fedkei::support
