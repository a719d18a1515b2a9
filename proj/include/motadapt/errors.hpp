#pragma once

#include <stdexcept>
#include <string>

namespace motadapt {

// Error taxonomy shared across the library. The CLI maps these onto
// process exit codes (config -> 2, data -> 3, numeric -> 4).

class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class UsageError : public std::runtime_error {
public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace motadapt
