#pragma once

#include <stdexcept>
#include <string>

namespace dualinc {

// Every failure surfaced by the library derives from Error so callers can map
// categories onto exit codes without string matching.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class DegenerateInputError : public Error { using Error::Error; };
class NumericalError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class DataError : public Error { using Error::Error; };
class LengthError : public Error { using Error::Error; };
class IntegrityError : public DataError { using DataError::DataError; };

class ParseError : public DataError {
public:
    ParseError(const std::string& what, std::size_t line)
        : DataError(what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// Raised when similarity-weighted averaging would divide by a near-zero sum of
// similarities; carries the offending values for diagnostics.
class DegenerateSelectionError : public DegenerateInputError {
    using DegenerateInputError::DegenerateInputError;
};

class CorruptFileError : public Error { using Error::Error; };
class VersionMismatchError : public Error { using Error::Error; };

}  // namespace dualinc
