#pragma once

#include <stdexcept>
#include <string>

namespace ctrlflow {

/// Broad failure classes. The CLI maps these onto process exit codes.
enum class ErrorKind {
  config,
  numeric,
  environment,
  not_ready,
  uncontrollable,
  diverged,
  control_degenerate,
  domain,
  io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorKind::config, "configuration error: " + what) {}
};

/// Non-finite value produced inside a computation. `location` is a layer
/// index, integration step or similar, -1 when not applicable.
class NumericOverflowError : public Error {
 public:
  NumericOverflowError(const std::string& what, long location = -1)
      : Error(ErrorKind::numeric,
              "numeric overflow: " + what +
                  (location >= 0 ? " (at " + std::to_string(location) + ")"
                                 : std::string())),
        location_(location) {}
  long location() const noexcept { return location_; }

 private:
  long location_;
};

class EnvironmentFault : public Error {
 public:
  explicit EnvironmentFault(const std::string& what)
      : Error(ErrorKind::environment, "environment fault: " + what) {}
};

/// Retryable: the caller should collect more data and try again.
class NotReadyError : public Error {
 public:
  explicit NotReadyError(const std::string& what)
      : Error(ErrorKind::not_ready, "not ready: " + what) {}
};

class UncontrollableError : public Error {
 public:
  UncontrollableError(const std::string& what, double lambda_min)
      : Error(ErrorKind::uncontrollable, "uncontrollable: " + what),
        lambda_min_(lambda_min) {}
  double lambda_min() const noexcept { return lambda_min_; }

 private:
  double lambda_min_;
};

class TrainingDivergedError : public Error {
 public:
  explicit TrainingDivergedError(const std::string& what)
      : Error(ErrorKind::diverged, "training diverged: " + what) {}
};

class ControlDegenerateError : public Error {
 public:
  explicit ControlDegenerateError(const std::string& what)
      : Error(ErrorKind::control_degenerate,
              "control degenerate: " + what +
                  "; review gain mode, quadrature nodes or eps_pd") {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what)
      : Error(ErrorKind::domain, "domain error: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what)
      : Error(ErrorKind::io, "io error: " + what) {}
};

}  // namespace ctrlflow
