#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace convert {

// Error categories shared by every module. The CLI maps them to exit codes and
// the HTTP service maps them to the `code` field of the error envelope.
enum class ErrorCode {
  dimension,            // tensor shapes do not agree
  contract,             // precondition violated by the caller
  config,               // invalid configuration value
  data,                 // malformed or inconsistent input data
  numeric,              // NaN or Inf produced by a kernel
  range,                // id or index outside its valid range
  io,                   // file system failure
  corrupt_file,         // truncated or damaged checkpoint / index
  version_mismatch,     // unknown container version
  fingerprint_mismatch, // checkpoint built against a different vocabulary
  config_mismatch,      // checkpoint config differs from the session config
  stale_index,          // answer index built from a different checkpoint
  validation,           // request payload rejected
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::dimension: return "dimension";
    case ErrorCode::contract: return "contract";
    case ErrorCode::config: return "config";
    case ErrorCode::data: return "data";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::range: return "range";
    case ErrorCode::io: return "io";
    case ErrorCode::corrupt_file: return "corrupt_file";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::fingerprint_mismatch: return "fingerprint_mismatch";
    case ErrorCode::config_mismatch: return "config_mismatch";
    case ErrorCode::stale_index: return "stale_index";
    case ErrorCode::validation: return "validation";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        message_(message) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const char* message) {
  if (!condition) fail(code, message);
}

}  // namespace convert
