#pragma once

#include <stdexcept>
#include <string>

namespace latentflow {

// Error taxonomy shared by all modules. The CLI maps each category to a
// one-line diagnostic and a nonzero exit status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration value or malformed config file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller passed an argument outside the documented domain.
class InputError : public Error {
 public:
  using Error::Error;
};

// Shape or precondition mismatch between in-process values.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite value encountered where finite math is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// File could not be read back as written (magic, version, truncation, CRC).
class PersistenceError : public Error {
 public:
  using Error::Error;
};

// Lyric alignment could not be repaired within the frame range.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

// A scorer rejected a sample or produced an out-of-scale value.
class ScoringError : public Error {
 public:
  using Error::Error;
};

}  // namespace latentflow
