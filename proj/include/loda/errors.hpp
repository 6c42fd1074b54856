#pragma once

#include <stdexcept>
#include <string>

namespace loda {

// Error categories map one-to-one onto CLI exit codes:
// ConfigError -> 2, NumericError -> 3, IoError -> 4.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace loda
