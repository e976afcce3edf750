#pragma once

#include <stdexcept>
#include <string>

namespace garfont {

// Bad values in a config file or construction-time settings (CLI exit code 2).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad runtime arguments: shape mismatches, out-of-range inputs, empty lists.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// A computation produced something unusable (non-finite loss, training that
// failed to reach a required floor). Carries diagnostic context in what().
struct DiagnosticError : std::runtime_error {
  explicit DiagnosticError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace garfont
