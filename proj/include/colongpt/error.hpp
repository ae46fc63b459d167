#pragma once

#include <stdexcept>
#include <string>

namespace colongpt {

/// Failure classes map one-to-one onto CLI exit codes.
enum class ErrorKind { Usage = 1, Data = 2, Numeric = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::Usage, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

// Data-error refinements. Tests match on these types.
class ShapeError : public DataError {
  using DataError::DataError;
};
class ParseError : public DataError {
  using DataError::DataError;
};
class PreconditionError : public DataError {
  using DataError::DataError;
};
class PolicyError : public DataError {
  using DataError::DataError;
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(std::size_t step, const std::string& what) : NumericError(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace colongpt
