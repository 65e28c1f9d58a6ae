#pragma once

#include <stdexcept>
#include <string>

namespace gnn3d {

/// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind { usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& what) : Error(ErrorKind::numeric, "dimension error: " + what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, "numeric error: " + what) {}
};

struct ParameterError : Error {
  explicit ParameterError(const std::string& what) : Error(ErrorKind::usage, "parameter error: " + what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::usage, "config error: " + what) {}
};

struct FormatError : Error {
  FormatError(const std::string& what, long long position)
      : Error(ErrorKind::data, "format error at " + std::to_string(position) + ": " + what),
        position_(position) {}
  /// Byte offset for binary formats, 1-based line number for text formats.
  long long position() const noexcept { return position_; }

 private:
  long long position_;
};

struct GenerationError : Error {
  explicit GenerationError(const std::string& what) : Error(ErrorKind::data, "generation error: " + what) {}
};

}  // namespace gnn3d
