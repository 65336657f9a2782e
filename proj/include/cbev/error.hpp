#pragma once

#include <stdexcept>
#include <string>

namespace cbev {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or sizes do not fit the operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Input lies outside the mathematical domain of an operation (e.g. empty reduction).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Normalization of a vector or map whose norm is zero.
class DegenerateNormError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf encountered at an op boundary.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Grid violates n_t <= l_A - l_B + 1 or is otherwise not placeable on the aerial map.
class FitConstraintError : public Error {
public:
    using Error::Error;
};

/// Malformed or unreadable file.
class FormatError : public Error {
public:
    using Error::Error;
};

} // namespace cbev
