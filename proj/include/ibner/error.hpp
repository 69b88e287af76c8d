#pragma once

#include <stdexcept>
#include <string>

namespace ibner {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes incompatible with an operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent input data (corpora, dictionaries, checkpoints).
class DataError : public Error {
public:
    using Error::Error;
};

/// Non-finite values during training or gradient checking.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or command-line usage.
class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace ibner
