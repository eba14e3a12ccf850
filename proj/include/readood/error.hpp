#pragma once

#include <stdexcept>
#include <string>

namespace readood {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

// Bad configuration values or unknown keys (CLI exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

// Missing, empty or malformed data and artifacts (CLI exit code 3).
struct DataError : Error {
    using Error::Error;
};

}  // namespace readood
