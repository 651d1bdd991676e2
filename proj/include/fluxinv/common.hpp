#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fluxinv {

// Error taxonomy. Each module throws the most specific type that applies.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct LookupError : Error {
  using Error::Error;
};
struct RangeError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct FitError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};
struct CacheInvalidError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

/// Inferred flux components, in the order used by the alpha layout.
enum class Component { Gpp = 0, Resp = 1, Ocean = 2 };
inline constexpr std::size_t kComponentCount = 3;
inline constexpr std::array<Component, kComponentCount> kComponents{
    Component::Gpp, Component::Resp, Component::Ocean};

inline constexpr std::size_t index_of(Component c) { return static_cast<std::size_t>(c); }

inline std::string_view component_name(Component c) {
  switch (c) {
    case Component::Gpp: return "gpp";
    case Component::Resp: return "resp";
    case Component::Ocean: return "ocean";
  }
  return "?";
}

inline Component parse_component(std::string_view name) {
  if (name == "gpp") return Component::Gpp;
  if (name == "resp") return Component::Resp;
  if (name == "ocean") return Component::Ocean;
  throw LookupError("unknown component '" + std::string(name) + "'");
}

inline constexpr bool is_bio(Component c) { return c != Component::Ocean; }

inline constexpr double kDaysPerYear = 365.25;

}  // namespace fluxinv
