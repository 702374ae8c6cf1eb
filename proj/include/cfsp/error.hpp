#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cfsp {

enum class ErrorCode {
  shape,           // kernel dimension mismatch
  input,           // bad token ids, empty corpus, mismatched vectors
  config,          // invalid hyperparameter or unknown enum value
  validation,      // checkpoint/plan content inconsistent
  plan,            // plan does not fit the model
  io,              // file missing or unreadable
  missing_tensor,
  shape_mismatch,
  truncated,
  unknown_version,
  capacity,        // corpus too small for the request
  non_finite,      // NaN/Inf during training
  state,           // operation invalid in the current object state
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape: return "E_SHAPE";
    case ErrorCode::input: return "E_INPUT";
    case ErrorCode::config: return "E_CONFIG";
    case ErrorCode::validation: return "E_VALIDATION";
    case ErrorCode::plan: return "E_PLAN";
    case ErrorCode::io: return "E_IO";
    case ErrorCode::missing_tensor: return "E_MISSING_TENSOR";
    case ErrorCode::shape_mismatch: return "E_SHAPE_MISMATCH";
    case ErrorCode::truncated: return "E_TRUNCATED";
    case ErrorCode::unknown_version: return "E_UNKNOWN_VERSION";
    case ErrorCode::capacity: return "E_CAPACITY";
    case ErrorCode::non_finite: return "E_NON_FINITE";
    case ErrorCode::state: return "E_STATE";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace cfsp
