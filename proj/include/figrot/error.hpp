#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace figrot {

enum class ErrorKind {
  kFormat,      // malformed file or record
  kValidation,  // violated precondition on values or ids
  kShape,       // incompatible tensor or config shapes
  kNumeric,     // NaN/Inf or degenerate arithmetic
  kIo,          // filesystem failure
  kUsage,       // bad command-line usage
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kUsage: return "usage";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace figrot
