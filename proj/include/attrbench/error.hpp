#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace attrbench {

enum class ErrorKind {
  invalid_input,
  config,
  format,
  cohort,
  numerical,
  unsupported_model,
};

/// Base of every error thrown by the library. The kind decides the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidInput : public Error {
 public:
  explicit InvalidInput(const std::string& what) : Error(ErrorKind::invalid_input, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(ErrorKind::format, what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class CohortError : public Error {
 public:
  CohortError(std::size_t requested, std::size_t achievable)
      : Error(ErrorKind::cohort, "requested cohort of " + std::to_string(requested) +
                                     " images but only " + std::to_string(achievable) +
                                     " are correctly classified"),
        achievable_(achievable) {}
  std::size_t achievable() const noexcept { return achievable_; }

 private:
  std::size_t achievable_;
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

class UnsupportedModel : public Error {
 public:
  explicit UnsupportedModel(const std::string& what) : Error(ErrorKind::unsupported_model, what) {}
};

/// Exit codes used by the command line tool.
inline int exit_code_for(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::unsupported_model:
      return 2;
    case ErrorKind::numerical:
      return 4;
    case ErrorKind::invalid_input:
    case ErrorKind::format:
    case ErrorKind::cohort:
      return 3;
  }
  return 3;
}

}  // namespace attrbench
