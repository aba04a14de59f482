#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedkei/errors.hpp"

namespace fedkei {

/// Flat parameter vector of one module part (an adapter or a head).
///
/// Entries are always finite; every constructor and mutator that accepts
/// external values checks this.
class ModuleVector {
 public:
  ModuleVector() = default;
  explicit ModuleVector(std::size_t dim) : values_(dim, 0.0) {}
  explicit ModuleVector(std::vector<double> values) : values_(std::move(values)) { require_finite(); }
  ModuleVector(std::initializer_list<double> values) : values_(values) { require_finite(); }

  std::size_t dim() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const std::vector<double>& vec() const noexcept { return values_; }

  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  void require_finite() const {
    if (!all_finite()) throw InvalidInput("module vector contains a non-finite entry");
  }

  friend bool operator==(const ModuleVector&, const ModuleVector&) = default;

 private:
  std::vector<double> values_;
};

/// Ordered set of same-dimension modules used as matrix columns.
class ModuleMatrix {
 public:
  ModuleMatrix() = default;
  explicit ModuleMatrix(std::vector<ModuleVector> columns) : columns_(std::move(columns)) {
    for (const auto& c : columns_) {
      if (c.dim() != columns_.front().dim()) throw InvalidInput("module matrix columns differ in dim");
    }
  }

  std::size_t cols() const noexcept { return columns_.size(); }
  std::size_t dim() const noexcept { return columns_.empty() ? 0 : columns_.front().dim(); }
  bool empty() const noexcept { return columns_.empty(); }

  const ModuleVector& operator[](std::size_t j) const { return columns_[j]; }
  std::span<const ModuleVector> columns() const noexcept { return columns_; }

  void push_back(ModuleVector v) {
    if (!columns_.empty() && v.dim() != dim()) throw InvalidInput("module matrix columns differ in dim");
    columns_.push_back(std::move(v));
  }

  friend bool operator==(const ModuleMatrix&, const ModuleMatrix&) = default;

 private:
  std::vector<ModuleVector> columns_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidInput("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double dot(const ModuleVector& a, const ModuleVector& b) { return dot(a.values(), b.values()); }

inline double squared_distance(const ModuleVector& a, const ModuleVector& b) {
  if (a.dim() != b.dim()) throw InvalidInput("squared_distance: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// y += a * x
inline void axpy(double a, const ModuleVector& x, ModuleVector& y) {
  if (x.dim() != y.dim()) throw InvalidInput("axpy: dimension mismatch");
  for (std::size_t i = 0; i < x.dim(); ++i) y[i] += a * x[i];
}

/// result = sum_j w[j] * columns[j], accumulated in ascending column order so
/// that results are bit-reproducible.
inline ModuleVector weighted_sum(std::span<const ModuleVector> columns, std::span<const double> w) {
  if (columns.empty()) throw InvalidInput("weighted_sum: no columns");
  if (w.size() != columns.size()) throw InvalidInput("weighted_sum: weight count does not match column count");
  const std::size_t dim = columns.front().dim();
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (!std::isfinite(w[j])) throw InvalidInput("weighted_sum: non-finite weight");
    if (columns[j].dim() != dim) throw InvalidInput("weighted_sum: column dimension mismatch");
  }
  ModuleVector out(dim);
  for (std::size_t j = 0; j < columns.size(); ++j) {
    for (std::size_t d = 0; d < dim; ++d) out[d] += w[j] * columns[j][d];
  }
  return out;
}

inline ModuleVector weighted_sum(const ModuleMatrix& mods, std::span<const double> w) {
  return weighted_sum(mods.columns(), w);
}

/// Transpose product: out[j] = columns[j] . v
inline std::vector<double> transpose_product(std::span<const ModuleVector> columns, const ModuleVector& v) {
  std::vector<double> out(columns.size());
  for (std::size_t j = 0; j < columns.size(); ++j) out[j] = dot(columns[j], v);
  return out;
}

/// Central-difference gradient of a scalar function; the oracle every analytic
/// gradient in the project is checked against.
inline ModuleVector finite_diff_grad(const std::function<double(const ModuleVector&)>& f, const ModuleVector& x,
                                     double eps = 1e-6) {
  if (!(eps > 0.0)) throw InvalidInput("finite_diff_grad: eps must be positive");
  ModuleVector g(x.dim());
  ModuleVector probe = x;
  for (std::size_t d = 0; d < x.dim(); ++d) {
    const double orig = probe[d];
    probe[d] = orig + eps;
    const double fp = f(probe);
    probe[d] = orig - eps;
    const double fm = f(probe);
    probe[d] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw OracleFailure("finite_diff_grad: objective is non-finite near component " + std::to_string(d));
    }
    g[d] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

/// max|a - g| / max(1, max|g|), the comparison used by all gradient checks.
inline double gradient_rel_error(std::span<const double> analytic, std::span<const double> reference) {
  if (analytic.size() != reference.size()) throw InvalidInput("gradient_rel_error: dimension mismatch");
  double diff = 0.0, scale = 1.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - reference[i]));
    scale = std::max(scale, std::abs(reference[i]));
  }
  return diff / scale;
}

// ---------------------------------------------------------------------------
// Binary vector format: u32 little-endian dim, then dim little-endian f64.

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

/// Bounds-checked little-endian reader over a byte buffer.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return std::bit_cast<double>(v);
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw InvalidInput("truncated binary payload");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::size_t serialized_size(std::size_t dim) noexcept { return 4 + 8 * dim; }

inline void serialize_into(const ModuleVector& v, std::vector<std::uint8_t>& out) {
  put_u32(out, static_cast<std::uint32_t>(v.dim()));
  for (double x : v) put_f64(out, x);
}

inline std::vector<std::uint8_t> serialize(const ModuleVector& v) {
  std::vector<std::uint8_t> out;
  out.reserve(serialized_size(v.dim()));
  serialize_into(v, out);
  return out;
}

inline ModuleVector deserialize(ByteReader& in) {
  const std::uint32_t dim = in.u32();
  if (dim == 0) throw InvalidInput("serialized module vector has zero dim");
  if (in.remaining() < 8ull * dim) throw InvalidInput("truncated module vector");
  std::vector<double> vals(dim);
  for (auto& x : vals) x = in.f64();
  return ModuleVector(std::move(vals));
}

inline ModuleVector deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  auto v = deserialize(in);
  if (in.remaining() != 0) throw InvalidInput("trailing bytes after module vector");
  return v;
}

}  // namespace fedkei
