#pragma once

#include <stdexcept>
#include <string>

namespace crossformer {

// Every failure raised by the library derives from Error so the CLI can
// report a machine-readable kind alongside the message.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& m) : Error("parse", m) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error("validation", m) {}
};

struct AlignmentError : Error {
  explicit AlignmentError(const std::string& m) : Error("alignment", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};

}  // namespace crossformer
