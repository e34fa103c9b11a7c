#pragma once

#include <stdexcept>
#include <string>

namespace tempcal {

// Exit-code families used by the CLI: usage 1, data/format 2, numerical 3.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

/// Malformed input file: bad magic, bad version, truncated payload, bad JSON.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Input violates a documented invariant (label out of range, non-finite value, bad dims).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss during training, or a failed self-check.
class NumericalError : public Error {
public:
    using Error::Error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError(what);
}

}  // namespace tempcal
