#pragma once

#include <stdexcept>
#include <string>

namespace marepo {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed files, bad configs, unreadable datasets. CLI maps these to exit 2.
struct DataError : Error {
    using Error::Error;
};

// Solver/numerical failures. CLI maps these to exit 3.
struct NumericError : Error {
    using Error::Error;
};

// geometry
struct DegenerateAxes : NumericError {
    using NumericError::NumericError;
};
struct DegenerateMatrix : NumericError {
    using NumericError::NumericError;
};
struct BehindCamera : NumericError {
    using NumericError::NumericError;
};

// encoding / regressor
struct ShapeMismatch : DataError {
    using DataError::DataError;
};
struct EmptySequence : DataError {
    using DataError::DataError;
};

// training
struct NonFiniteLoss : NumericError {
    using NumericError::NumericError;
};

// simulator
struct UnviewableScene : NumericError {
    using NumericError::NumericError;
};

// oracle
struct TooFewPoints : NumericError {
    using NumericError::NumericError;
};
struct DegenerateConfiguration : NumericError {
    using NumericError::NumericError;
};
struct NoConsensus : NumericError {
    using NumericError::NumericError;
};

// file formats
struct IoError : DataError {
    using DataError::DataError;
};
struct BadMagic : DataError {
    using DataError::DataError;
};
struct TruncatedFile : DataError {
    using DataError::DataError;
};
struct NonFiniteValue : DataError {
    using DataError::DataError;
};
struct NotARotation : DataError {
    using DataError::DataError;
};

}  // namespace marepo
