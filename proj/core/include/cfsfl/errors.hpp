#pragma once

#include <stdexcept>
#include <string>

namespace cfsfl {

// Dimension mismatch between tensors, layers or item vocabularies.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf encountered where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller violated a precondition (empty batch, non-scalar loss, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input file parsed but too damaged to trust.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Data is well-formed but unusable (nothing left after filtering, too few users).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace cfsfl
