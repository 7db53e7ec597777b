#pragma once

#include <stdexcept>
#include <string>

namespace bsatnp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand extents do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf was produced; the message names the producing op.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A caller broke an API precondition (non-scalar loss, bad saved state, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration. The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A synthetic task could not be generated (e.g. Cholesky failed after jitter escalation).
class GenerationError : public Error {
 public:
  using Error::Error;
};

// Malformed checkpoint or task file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace bsatnp
