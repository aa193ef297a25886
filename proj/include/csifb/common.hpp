#pragma once

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace csifb {

using cplx = std::complex<double>;

// Raised for invalid user-supplied configuration (bad specs, bad CLI args).
// The CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised for shape/dimension violations detected inside numeric code.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a computation produces non-finite values or cannot proceed.
struct ComputeError : std::runtime_error {
    explicit ComputeError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void config_require(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

inline void shape_require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace csifb
