#pragma once

#include <atomic>
#include <cstdint>

namespace rescore::stats {

// Process-wide instrumentation counters. Tests use deltas of these to assert
// things like "the cache was hit" or "benchmarking never trains".

inline std::atomic<std::uint64_t>& encoder_forwards() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

inline std::atomic<std::uint64_t>& backward_calls() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

inline std::atomic<std::uint64_t>& optimizer_steps() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

}  // namespace rescore::stats
