#pragma once

#include <stdexcept>
#include <string>

namespace miml {

// Bad input files, inconsistent shapes, unknown keys. Maps to CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf in tensors, losses or gradients. Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller violated an operation's precondition (shape mismatch, bad argument).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace miml
