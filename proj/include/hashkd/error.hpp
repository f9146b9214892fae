#pragma once

#include <stdexcept>
#include <string>

namespace hashkd {

/// Error categories surfaced by the CLI as `error[<category>]: ...`.
enum class ErrorCategory { config, data, shape, checkpoint, io, numeric };

inline const char* to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::data: return "data";
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::checkpoint: return "checkpoint";
    case ErrorCategory::io: return "io";
    case ErrorCategory::numeric: return "numeric";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorCategory::config, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorCategory::data, w) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorCategory::shape, w) {}
};
struct CheckpointError : Error {
  explicit CheckpointError(const std::string& w) : Error(ErrorCategory::checkpoint, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorCategory::io, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorCategory::numeric, w) {}
};

}  // namespace hashkd
