#pragma once

#include <string>
#include <string_view>

#include "cfu/error.hpp"

namespace cfu {

enum class ColonyClass { bacteria, mold, unknown };

inline std::string_view to_string(ColonyClass c) {
  switch (c) {
    case ColonyClass::bacteria: return "bacteria";
    case ColonyClass::mold: return "mold";
    case ColonyClass::unknown: return "unknown";
  }
  return "unknown";
}

inline ColonyClass colony_class_from_string(std::string_view s) {
  if (s == "bacteria") return ColonyClass::bacteria;
  if (s == "mold") return ColonyClass::mold;
  if (s == "unknown") return ColonyClass::unknown;
  fail(ErrorCode::validation, "class: unknown colony class '" + std::string(s) + "'");
}

enum class PlateQuality { valid, invalid };

inline std::string_view to_string(PlateQuality q) {
  return q == PlateQuality::valid ? "valid" : "invalid";
}

inline PlateQuality quality_from_string(std::string_view s) {
  if (s == "valid") return PlateQuality::valid;
  if (s == "invalid") return PlateQuality::invalid;
  fail(ErrorCode::validation, "quality: expected 'valid' or 'invalid', got '" + std::string(s) + "'");
}

}  // namespace cfu
