#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace psx {

enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  unknown_weight,
  unknown_layer,
  non_finite,
  format,
  truncated,
  io,
  insufficient_samples,
  unsupported,
  not_found,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries a stable machine-readable code.
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

}  // namespace psx
