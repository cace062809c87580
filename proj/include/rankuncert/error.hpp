// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace rankuncert {

/// Base of every error thrown by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mathematically invalid input (zero-norm vector, empty gallery, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Mismatched dimensions or batch sizes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared during a computation. `op()` names the first
/// operation that produced it.
class PoisonedComputation : public Error {
 public:
  PoisonedComputation(std::string op, const std::string& what)
      : Error(what), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent data files.
class DataError : public Error {
 public:
  enum class Kind {
    kMagic,
    kVersion,
    kTruncated,
    kNonFinite,
    kDuplicateId,
    kIdCount,
    kDanglingId,
    kDuplicateRecord,
    kSchema,
  };

  DataError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace rankuncert
