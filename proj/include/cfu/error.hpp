#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace cfu {

/// Error categories shared by every layer. The gateway maps each one to a
/// fixed HTTP status and the CLI maps validation to exit code 2.
enum class ErrorCode {
  validation,
  not_found,
  conflict,
  illegal_transition,
  insufficient_data,
  storage,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::validation: return "validation";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::illegal_transition: return "illegal_transition";
    case ErrorCode::insufficient_data: return "insufficient_data";
    case ErrorCode::storage: return "storage";
  }
  return "storage";
}

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::validation: return 422;
    case ErrorCode::not_found: return 404;
    case ErrorCode::conflict: return 409;
    case ErrorCode::illegal_transition: return 409;
    case ErrorCode::insufficient_data: return 422;
    case ErrorCode::storage: return 500;
  }
  return 500;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, nlohmann::json detail = nullptr)
      : std::runtime_error(message), code_(code), detail_(std::move(detail)) {}

  ErrorCode code() const noexcept { return code_; }
  const nlohmann::json& detail() const noexcept { return detail_; }

  nlohmann::json to_json() const {
    nlohmann::json j{{"code", std::string(to_string(code_))}, {"message", what()}};
    if (!detail_.is_null()) j["detail"] = detail_;
    return j;
  }

 private:
  ErrorCode code_;
  nlohmann::json detail_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message,
                              nlohmann::json detail = nullptr) {
  throw Error(code, message, std::move(detail));
}

/// Throws a validation error naming `field` when `ok` is false.
inline void require(bool ok, std::string_view field, std::string_view what) {
  if (!ok) {
    fail(ErrorCode::validation, std::string(field) + ": " + std::string(what),
         nlohmann::json{{"field", std::string(field)}});
  }
}

}  // namespace cfu
