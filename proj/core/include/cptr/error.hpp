#pragma once

#include <stdexcept>
#include <string>

namespace cptr {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor dimension / rank violations.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

// Invalid argument values (probabilities out of range, bad ids, ...).
class ValueError : public Error {
 public:
  explicit ValueError(const std::string& what) : Error(what) {}
};

// Inconsistent or invalid configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

// File system and serialization failures.
class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what) {}
};

}  // namespace cptr
