#pragma once

#include <stdexcept>
#include <string>

namespace gda {

using real = double;

// Error taxonomy. Each maps to one of the failure kinds named in the
// operation contracts; CLI turns them into machine-parsable one-liners.
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IntegrityError : std::runtime_error {
    explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DependencyError : std::runtime_error {
    explicit DependencyError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Contract violation: a caller broke a precondition that valid pipelines
// never hit. Checked unconditionally; the checks are cheap.
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

#define GDA_CHECK(cond, msg)                                                   \
    do {                                                                       \
        if (!(cond)) throw ::gda::ContractError(msg);                          \
    } while (0)

}  // namespace gda
