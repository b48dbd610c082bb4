#pragma once

#include <stdexcept>
#include <string>

namespace usage {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched dimensions between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A forward or backward pass produced NaN/Inf. The message names the op.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class UnsupportedOpError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values (temperatures, rates, labels, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// Bad configuration file or override; `key` names the offending entry.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& message)
      : Error(key.empty() ? message : key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

}  // namespace usage
