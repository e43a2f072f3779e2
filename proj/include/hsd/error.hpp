#pragma once

#include <stdexcept>
#include <string>

namespace hsd {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller-supplied configuration is wrong (missing column, bad preset, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data violates a contract (unlabeled rows, malformed files, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error(what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

}  // namespace hsd
