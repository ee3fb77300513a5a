#pragma once

#include <stdexcept>
#include <string>

namespace voxmae {

enum class ErrorCategory {
  invalid_input,
  invalid_config,
  degenerate_volume,
  invalid_layout,
  numeric,
  undefined_metric,
  io,
  abort_with_checkpoint,
  internal,
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::invalid_input: return "invalid-input";
    case ErrorCategory::invalid_config: return "invalid-config";
    case ErrorCategory::degenerate_volume: return "degenerate-volume";
    case ErrorCategory::invalid_layout: return "invalid-layout";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::undefined_metric: return "undefined-metric";
    case ErrorCategory::io: return "io";
    case ErrorCategory::abort_with_checkpoint: return "abort-with-checkpoint";
    case ErrorCategory::internal: return "internal";
  }
  return "internal";
}

inline int category_exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::invalid_input: return 2;
    case ErrorCategory::invalid_config: return 3;
    case ErrorCategory::degenerate_volume: return 4;
    case ErrorCategory::invalid_layout: return 5;
    case ErrorCategory::numeric: return 6;
    case ErrorCategory::undefined_metric: return 7;
    case ErrorCategory::io: return 8;
    case ErrorCategory::abort_with_checkpoint: return 9;
    case ErrorCategory::internal: return 10;
  }
  return 10;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, const std::string& msg)
      : std::runtime_error(std::string(category_name(cat)) + ": " + msg), cat_(cat) {}

  ErrorCategory category() const { return cat_; }
  int exit_code() const { return category_exit_code(cat_); }

 private:
  ErrorCategory cat_;
};

[[noreturn]] inline void fail(ErrorCategory cat, const std::string& msg) { throw Error(cat, msg); }

inline void require(bool cond, ErrorCategory cat, const std::string& msg) {
  if (!cond) fail(cat, msg);
}

}  // namespace voxmae
