#pragma once

#include <stdexcept>
#include <string>

namespace tino {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation (e.g. t not in [0, 1]).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Tensor or image geometry does not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Missing or inconsistent configuration, manifests, or backend wiring.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A backend call failed. Carries the denoising step when known.
class BackendError : public Error {
 public:
  BackendError(const std::string& what, int step = -1)
      : Error(step >= 0 ? "step " + std::to_string(step) + ": " + what : what), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace tino
