#pragma once

#include <stdexcept>
#include <string>

namespace resetox {

// Violated precondition or invariant of a public operation.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class VocabularyError : public ContractError {
 public:
  using ContractError::ContractError;
};

class LengthError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Non-finite function value during numerical evaluation.
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable or corrupt file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace resetox
