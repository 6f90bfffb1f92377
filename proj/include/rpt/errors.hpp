#pragma once

#include <stdexcept>
#include <string>

namespace rpt {

/// Extents of two operands are incompatible, or a requested extent is invalid.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AxisError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A caller broke an operation's precondition (non-scalar loss, misaligned lists, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A vector whose L2 norm is too small to normalize.
class DegenerateVectorError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rpt
