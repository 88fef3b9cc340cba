#pragma once

#include <stdexcept>
#include <string>

namespace distillscope {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition (non-scalar loss, batch
/// given where a single image is expected, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf appeared in a forward value or a gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A NetworkSpec is internally inconsistent.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// A numeric parameter is outside its admissible range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Weight file errors.
class WeightFileError : public Error {
 public:
  using Error::Error;
};
class BadMagicError : public WeightFileError {
 public:
  using WeightFileError::WeightFileError;
};
class VersionError : public WeightFileError {
 public:
  using WeightFileError::WeightFileError;
};
class TruncatedFileError : public WeightFileError {
 public:
  using WeightFileError::WeightFileError;
};
class ShapeMismatchError : public WeightFileError {
 public:
  using WeightFileError::WeightFileError;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

/// AUROC requested on data holding only one class.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Dataset ingestion errors.
class DataError : public Error {
 public:
  using Error::Error;
};
class IdxMagicError : public DataError {
 public:
  using DataError::DataError;
};
class IdxTruncatedError : public DataError {
 public:
  using DataError::DataError;
};
class IdxCountMismatchError : public DataError {
 public:
  using DataError::DataError;
};
class ImageReadError : public DataError {
 public:
  using DataError::DataError;
};
class MaskPairingError : public DataError {
 public:
  using DataError::DataError;
};

/// Malformed or unknown configuration content.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace distillscope
