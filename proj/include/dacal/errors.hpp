#pragma once

#include <stdexcept>
#include <string>

namespace dacal {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched spatial or structural shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Nothing left to compute over (all pixels ignored, empty bins, ...).
class EmptySampleError : public Error {
 public:
  using Error::Error;
};

// Argument outside its mathematical domain (T <= 0, confidence > 1, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A non-finite quantity appeared during training.
class TrainingFault : public Error {
 public:
  TrainingFault(std::string component, long iteration)
      : Error("non-finite " + component + " at iteration " + std::to_string(iteration)),
        component_(std::move(component)),
        iteration_(iteration) {}

  const std::string& component() const noexcept { return component_; }
  long iteration() const noexcept { return iteration_; }

 private:
  std::string component_;
  long iteration_;
};

}  // namespace dacal
