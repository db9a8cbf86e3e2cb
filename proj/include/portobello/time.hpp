#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <stdexcept>

namespace portobello {

/// Nanoseconds on the monotonic run clock. Never negative.
class Timestamp {
 public:
  constexpr Timestamp() = default;
  constexpr explicit Timestamp(std::int64_t nanos) : nanos_(nanos) {
    if (nanos < 0) throw std::invalid_argument("Timestamp must be non-negative");
  }

  static Timestamp from_seconds(double s) {
    return Timestamp(static_cast<std::int64_t>(std::llround(s * 1e9)));
  }

  constexpr std::int64_t nanos() const { return nanos_; }
  constexpr double seconds() const { return static_cast<double>(nanos_) * 1e-9; }

  constexpr auto operator<=>(const Timestamp&) const = default;

 private:
  std::int64_t nanos_ = 0;
};

/// Signed difference a - b in seconds.
inline double seconds_between(Timestamp a, Timestamp b) {
  return static_cast<double>(a.nanos() - b.nanos()) * 1e-9;
}

inline Timestamp operator+(Timestamp t, std::int64_t delta_nanos) {
  return Timestamp(t.nanos() + delta_nanos);
}

constexpr std::int64_t kNanosPerSecond = 1'000'000'000;

}  // namespace portobello
