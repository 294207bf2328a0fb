#pragma once

#include <stdexcept>
#include <string>

namespace blockrec {

// Caller broke an API precondition (bad shape, negative distance, ...).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// A configuration is internally inconsistent (N % W != 0, unknown preset, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values where finite ones are required (loss, gradients).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

inline void contract(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace blockrec
