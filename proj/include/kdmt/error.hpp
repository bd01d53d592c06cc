#pragma once

#include <stdexcept>
#include <string>

namespace kdmt {

// Error families map one-to-one onto the CLI exit codes.
enum class ErrorKind { config = 2, data = 3, contract = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorKind::config, "config error: " + what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what)
      : Error(ErrorKind::data, "data error: " + what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what)
      : Error(ErrorKind::contract, "contract violation: " + what) {}
};

/// Operand shapes do not fit the operation.
class DimensionError : public ContractError {
 public:
  explicit DimensionError(const std::string& what)
      : ContractError("dimension mismatch: " + what) {}
};

/// A token id falls outside the vocabulary.
class VocabularyError : public ContractError {
 public:
  explicit VocabularyError(const std::string& what)
      : ContractError("vocabulary: " + what) {}
};

/// Malformed or truncated checkpoint / data file.
class FormatError : public DataError {
 public:
  explicit FormatError(const std::string& what)
      : DataError("format: " + what) {}
};

}  // namespace kdmt
