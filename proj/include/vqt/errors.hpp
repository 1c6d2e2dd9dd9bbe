#pragma once

#include <stdexcept>
#include <string>

namespace vqt {

// Error taxonomy used across the library. The CLI maps these onto exit
// codes: usage -> 1, config/data/contract -> 2, numeric -> 3.

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated caller-side precondition (bad budget, missing grad, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Correlation is undefined (constant inputs, all-tied ranks).
struct UndefinedCorrelationError : NumericError {
    explicit UndefinedCorrelationError(const std::string& msg) : NumericError(msg) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace vqt
