#pragma once

#include <stdexcept>
#include <string>

namespace promptseg {

/// Base of every domain error raised by the library. `kind()` is the short
/// machine-readable tag the CLI prints after its error prefix.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& m) : Error("input", m) {}
};

class LoadError : public Error {
 public:
  explicit LoadError(const std::string& m) : Error("load", m) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& m, std::size_t byte_offset)
      : Error("parse", m + " (at byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}
  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& m) : Error("training", m) {}
};

}  // namespace promptseg
