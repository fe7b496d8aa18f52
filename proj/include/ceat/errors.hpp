#pragma once

#include <stdexcept>
#include <string>

namespace ceat {

// Every library failure derives from Error so callers (the CLI in
// particular) can map families of failures onto exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};
struct InputError : Error {
    using Error::Error;
};
struct UsageError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

}  // namespace ceat
