#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "fedkei/errors.hpp"
#include "fedkei/paramspace.hpp"
#include "support.hpp"

using namespace fedkei;

TEST(WeightedSum, BasisVectors) {
  ModuleMatrix m({ModuleVector{1, 0}, ModuleVector{0, 1}});
  EXPECT_EQ(weighted_sum(m, std::vector<double>{0.3, 0.7}), (ModuleVector{0.3, 0.7}));
}

TEST(WeightedSum, IdentitySelection) {
  ModuleMatrix m({ModuleVector{2, 4}, ModuleVector{0, 0}});
  EXPECT_EQ(weighted_sum(m, std::vector<double>{1, 0}), (ModuleVector{2, 4}));
}

TEST(WeightedSum, ArithmeticMean) {
  ModuleMatrix m({ModuleVector{2, 4}, ModuleVector{6, 0}});
  EXPECT_EQ(weighted_sum(m, std::vector<double>{0.5, 0.5}), (ModuleVector{4, 2}));
}

TEST(WeightedSum, RejectsBadInput) {
  std::vector<ModuleVector> cols{ModuleVector{1, 2}, ModuleVector{1, 2, 3}};
  EXPECT_THROW(weighted_sum(cols, std::vector<double>{1, 1}), InvalidInput);
  ModuleMatrix m({ModuleVector{1, 2}, ModuleVector{3, 4}});
  EXPECT_THROW(weighted_sum(m, std::vector<double>{1}), InvalidInput);
  EXPECT_THROW(weighted_sum(m, std::vector<double>{1, std::numeric_limits<double>::quiet_NaN()}), InvalidInput);
  EXPECT_THROW(weighted_sum(m, std::vector<double>{1, std::numeric_limits<double>::infinity()}), InvalidInput);
}

TEST(ModuleVector, RejectsNonFinite) {
  EXPECT_THROW((ModuleVector{1.0, std::numeric_limits<double>::infinity()}), InvalidInput);
  EXPECT_THROW(ModuleVector(std::vector<double>{std::nan("")}), InvalidInput);
}

TEST(ModuleMatrix, ColumnsShareDim) {
  ModuleMatrix m;
  m.push_back(ModuleVector{1, 2});
  EXPECT_THROW(m.push_back(ModuleVector{1, 2, 3}), InvalidInput);
  EXPECT_THROW(ModuleMatrix({ModuleVector{1}, ModuleVector{1, 2}}), InvalidInput);
}

TEST(FiniteDiff, Quadratic) {
  auto g = finite_diff_grad([](const ModuleVector& x) { return dot(x, x); }, ModuleVector{1, 2});
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
}

TEST(FiniteDiff, Linear) {
  const ModuleVector v{3, -1};
  std::mt19937_64 rng(5);
  for (int i = 0; i < 5; ++i) {
    auto x = support::random_vector(2, rng, 10.0);
    auto g = finite_diff_grad([&](const ModuleVector& p) { return dot(v, p); }, x);
    EXPECT_NEAR(g[0], 3.0, 1e-6);
    EXPECT_NEAR(g[1], -1.0, 1e-6);
  }
}

TEST(FiniteDiff, NonFiniteObjectiveIsOracleFailure) {
  auto f = [](const ModuleVector& x) { return std::log(x[0]); };
  EXPECT_THROW(finite_diff_grad(f, ModuleVector{0.0}), OracleFailure);
}

TEST(Serialization, RoundTripIsBitExact) {
  std::mt19937_64 rng(11);
  for (std::size_t dim : {1u, 2u, 17u, 97u}) {
    auto v = support::random_vector(dim, rng);
    v[0] = -0.0;
    const auto bytes = serialize(v);
    ASSERT_EQ(bytes.size(), serialized_size(dim));
    const auto back = deserialize(bytes);
    ASSERT_EQ(back.dim(), dim);
    for (std::size_t i = 0; i < dim; ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(back[i]), std::bit_cast<std::uint64_t>(v[i]));
  }
}

TEST(Serialization, LittleEndianLayout) {
  const auto bytes = serialize(ModuleVector{1.0});
  const std::vector<std::uint8_t> want{1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0xf0, 0x3f};
  EXPECT_EQ(bytes, want);
}

TEST(Serialization, RejectsMalformed) {
  auto bytes = serialize(ModuleVector{1.0, 2.0});
  EXPECT_THROW(deserialize(std::span<const std::uint8_t>(bytes).first(bytes.size() - 1)), InvalidInput);
  bytes.push_back(0);
  EXPECT_THROW(deserialize(bytes), InvalidInput);
  const std::vector<std::uint8_t> zero{0, 0, 0, 0};
  EXPECT_THROW(deserialize(zero), InvalidInput);
  // NaN payload.
  auto nan = serialize(ModuleVector{1.0});
  for (int i = 4; i < 12; ++i) nan[i] = 0xff;
  EXPECT_THROW(deserialize(nan), InvalidInput);
}

TEST(GradientRelError, ScalesByReferenceMagnitude) {
  const std::vector<double> a{1.0, 2.0}, g{1.0, 2.5};
  EXPECT_DOUBLE_EQ(gradient_rel_error(a, g), 0.5 / 2.5);
  const std::vector<double> small{1e-3}, zero{0.0};
  EXPECT_DOUBLE_EQ(gradient_rel_error(small, zero), 1e-3);
}
