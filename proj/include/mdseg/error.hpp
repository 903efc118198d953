#pragma once

#include <stdexcept>
#include <string>

namespace mdseg {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes or sizes do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A precondition on a scalar argument was violated (negative sigma, w outside [0,1], ...).
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// A NaN or Inf was produced; the message names the offending node.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed files, manifests or configuration.
class FormatError : public Error {
public:
    using Error::Error;
};

} // namespace mdseg
