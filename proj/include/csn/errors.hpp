#pragma once

#include <stdexcept>
#include <string>

namespace csn {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not compose.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// File contents do not match their recorded checksum or layout.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// The requested triplets cannot be drawn from the available labels.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// A triplet condition has no mask or specialist network to route to.
class RoutingError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite gradient or loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace csn
