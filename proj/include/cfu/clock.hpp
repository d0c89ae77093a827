#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <functional>
#include <memory>
#include <string>

namespace cfu {

using TimePoint = std::chrono::system_clock::time_point;
using Clock = std::function<TimePoint()>;

inline Clock system_clock() {
  return [] { return std::chrono::system_clock::now(); };
}

/// Manually advanced clock for tests; each call returns the next millisecond.
inline Clock stepping_clock(TimePoint start = TimePoint{std::chrono::seconds(1767225600)}) {
  auto t = std::make_shared<TimePoint>(start);
  return [t] {
    const auto now = *t;
    *t += std::chrono::milliseconds(1);
    return now;
  };
}

/// UTC, millisecond precision: 2026-01-01T00:00:00.000Z. Fixed width, so
/// lexicographic order equals chronological order.
inline std::string format_iso8601(TimePoint tp) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(tp.time_since_epoch()).count();
  const std::time_t secs = static_cast<std::time_t>(ms / 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms % 1000));
  return buf;
}

}  // namespace cfu
