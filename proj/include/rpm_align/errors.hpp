#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rpm_align {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition or shape violation on an argument.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Failure of the correspondence / transform solver.
class SolverError : public Error {
 public:
  enum class Kind { kNoInliers, kRankDeficient };

  SolverError(Kind kind, int iteration = -1)
      : Error(describe(kind, iteration)), kind_(kind), iteration_(iteration) {}

  Kind kind() const { return kind_; }
  /// 1-based outer iteration of the registration loop, or -1 when raised
  /// outside of one.
  int iteration() const { return iteration_; }

  SolverError at_iteration(int iteration) const { return SolverError(kind_, iteration); }

 private:
  static std::string describe(Kind kind, int iteration) {
    std::string msg = kind == Kind::kNoInliers ? "no inliers" : "rank-deficient correspondences";
    if (iteration >= 0) msg += " (iteration " + std::to_string(iteration) + ")";
    return msg;
  }

  Kind kind_;
  int iteration_;
};

/// Malformed or unsupported file content.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line = 0)
      : Error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class UnsupportedFeature : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Bad user configuration (CLI flags, config files, manifests).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace rpm_align
