#pragma once

#include <stdexcept>
#include <string>

namespace taft {

// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Shape or dimension mismatch between operands.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(what) {}
};

// A forward operation produced NaN/Inf from finite inputs.
class NumericsError : public Error {
 public:
  explicit NumericsError(const std::string& what) : Error(what) {}
};

// Singular or ill-conditioned matrix; carries the condition estimate.
class InversionError : public Error {
 public:
  InversionError(const std::string& what, double condition_estimate)
      : Error(what), condition_estimate_(condition_estimate) {}
  double condition_estimate() const { return condition_estimate_; }

 private:
  double condition_estimate_;
};

// Class-weight mass below threshold when computing a prototype.
class DegenerateSupportError : public Error {
 public:
  explicit DegenerateSupportError(const std::string& what) : Error(what) {}
};

// Prototype or reference vector with a near-zero norm.
class DegeneratePrototypeError : public Error {
 public:
  explicit DegeneratePrototypeError(const std::string& what) : Error(what) {}
};

// Misuse of the autodiff graph (non-scalar loss, reuse after backward).
class GraphError : public Error {
 public:
  explicit GraphError(const std::string& what) : Error(what) {}
};

// Episode generator exhausted its rejection-sampling budget.
class GenerationError : public Error {
 public:
  explicit GenerationError(const std::string& what) : Error(what) {}
};

// Bad or unreadable configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

// Unreadable, corrupt, or mismatched checkpoint.
class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error(what) {}
};

// Checkpoint with an unsupported format version.
class CheckpointVersionError : public CheckpointError {
 public:
  CheckpointVersionError(const std::string& what, uint32_t found)
      : CheckpointError(what), found_version_(found) {}
  uint32_t found_version() const { return found_version_; }

 private:
  uint32_t found_version_;
};

// Evaluation over an empty or invalid episode set.
class EvalError : public Error {
 public:
  explicit EvalError(const std::string& what) : Error(what) {}
};

}  // namespace taft
