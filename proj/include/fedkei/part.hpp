#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "fedkei/errors.hpp"

namespace fedkei {

/// Which half of a task module a vector belongs to. Adapters and heads are
/// clustered and weighted in their own parameter spaces and never mixed.
enum class Part : std::uint8_t { adapter = 0, head = 1 };

inline constexpr std::array<Part, 2> kParts{Part::adapter, Part::head};

constexpr std::string_view to_string(Part p) noexcept { return p == Part::adapter ? "adapter" : "head"; }

inline Part part_from_string(std::string_view s) {
  if (s == "adapter") return Part::adapter;
  if (s == "head") return Part::head;
  throw InvalidInput("unknown module part '" + std::string(s) + "'");
}

inline Part part_from_u8(std::uint8_t v) {
  if (v > 1) throw InvalidInput("unknown module part tag " + std::to_string(v));
  return static_cast<Part>(v);
}

/// One value per module part.
template <class T>
struct PerPart {
  T adapter{};
  T head{};

  T& operator[](Part p) noexcept { return p == Part::adapter ? adapter : head; }
  const T& operator[](Part p) const noexcept { return p == Part::adapter ? adapter : head; }

  friend bool operator==(const PerPart&, const PerPart&) = default;
};

}  // namespace fedkei
