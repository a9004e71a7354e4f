#pragma once

#include <stdexcept>
#include <string>

namespace condsim {

// Invalid parameters, inconsistent requests, unreadable configuration files.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A query outside the generated space-time window.
class RangeError : public std::out_of_range {
 public:
  explicit RangeError(const std::string& what) : std::out_of_range(what) {}
};

// A solver could not meet its tolerance, or a value left its admissible range.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// A walk reached the spatial edge of its environment window while extension was disabled.
class WindowExhausted : public std::runtime_error {
 public:
  WindowExhausted(const std::string& what, long long vertex)
      : std::runtime_error(what), vertex_(vertex) {}
  long long vertex() const noexcept { return vertex_; }

 private:
  long long vertex_;
};

}  // namespace condsim
