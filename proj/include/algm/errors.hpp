#pragma once

#include <stdexcept>
#include <string>

namespace algm {

// Error classes map onto CLI exit codes: config=2, io=3, shape=4, integrity=5.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

// Bad argument to a library call (empty list, unsorted taus, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class BadMagicError : public IoError {
 public:
  using IoError::IoError;
};

class TruncatedFileError : public IoError {
 public:
  using IoError::IoError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

// Shape error tied to a named weight tensor.
class TensorShapeError : public ShapeError {
 public:
  TensorShapeError(std::string tensor, const std::string& what)
      : ShapeError(what), tensor_(std::move(tensor)) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

class PreconditionError : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 5; }
};

}  // namespace algm
