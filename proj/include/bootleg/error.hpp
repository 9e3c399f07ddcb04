#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bootleg {

enum class ErrorCode {
  InvalidConfig,
  UnknownKey,
  EmptyVisible,
  UnsupportedStrategy,
  DimNotDivisible,
  ShapeMismatch,
  BadIndex,
  EmptyRegion,
  TapNotCaptured,
  NonFiniteLoss,
  EmptyDataset,
  UnreadableImage,
  MissingCLS,
  MissingLayer,
  DegenerateLayer,
  ZeroVariance,
  Io,
  GoldenMismatch,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries a machine-readable code; the
/// CLI maps it to an exit status and a one-line reason.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace bootleg
