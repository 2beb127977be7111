#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pivot {

using Embedding = std::vector<double>;

/// Base error for everything thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input data violates a documented invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Malformed or unreadable file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite value.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace pivot
