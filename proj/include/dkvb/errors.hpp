#pragma once

#include <stdexcept>
#include <string>

namespace dkvb {

// Bad configuration or invalid argument combinations. CLI exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent data (files, labels, empty sets). CLI exit code 3.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Every codebook fully masked; the model can no longer classify. CLI exit code 4.
struct DegenerateModelError : std::runtime_error {
    explicit DegenerateModelError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dkvb
