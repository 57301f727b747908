#pragma once

#include <stdexcept>
#include <string>

namespace locus {

/// Invalid or incomplete configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing, corrupt, or inconsistent data (CLI exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss during optimization (CLI exit code 4).
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

}  // namespace locus
