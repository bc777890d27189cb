#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace htr {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not satisfy an operation's shape contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// An attention mask blocks every key for some query.
class MaskError : public Error {
 public:
  using Error::Error;
};

/// Statistics are undefined (single-element batchnorm batch, one-level histogram, ...).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Every target position of a masked loss was ignored.
class EmptyLossError : public Error {
 public:
  using Error::Error;
};

/// A value is NaN or infinite while finite checks are enabled.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Bytes on disk are not a valid image or archive.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input (manifest rows, glyph files, config files).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint written by an incompatible format version.
class MigrationError : public Error {
 public:
  using Error::Error;
};

class SynthesisError : public Error {
 public:
  using Error::Error;
};

/// Loss became non-finite during training.
class DivergenceError : public Error {
 public:
  DivergenceError(std::int64_t step, const std::string& what)
      : Error(what), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace htr
