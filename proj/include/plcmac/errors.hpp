#pragma once

#include <stdexcept>
#include <string>

namespace plcmac {

// Bad scenario/config input (unknown preset name, malformed file, empty sweep).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Argument outside the mathematical domain of a kernel function.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// The final-stage geometric series of the backoff recursion does not converge.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace plcmac
