#pragma once

#include <stdexcept>
#include <string>

namespace tagnet {

/// Malformed or inconsistent input data (files, records, vocabularies).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid argument combination supplied by a caller or on the command line.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite values or divergence during numerical work.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace tagnet
