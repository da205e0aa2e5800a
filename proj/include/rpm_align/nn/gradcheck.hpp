#pragma once

#include "rpm_align/nn/params.hpp"

#include <cstdint>
#include <functional>
#include <string>

namespace rpm_align::nn {

/// Builds a single-element output from bound parameters on the given tape.
using ScalarGraph = std::function<Var(Tape&, const BoundParams&)>;

struct GradCheckOptions {
  double step = 1e-6;
  /// Denominator floor of the relative error, |a - n| / max(|a|, |n|, floor).
  /// Central differences carry ~1e-10 absolute round-off at h = 1e-6, so a
  /// pure ratio is meaningless for near-zero gradient entries.
  double denominator_floor = 1e-4;
  /// Check at most this many entries (seeded uniform choice); 0 checks all.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
  /// Entries whose error exceeds this and whose one-sided differences show a
  /// non-smooth point within the step are re-checked with step / 10, down to
  /// `min_step`; the step with the smallest error is reported.
  double refine_above = 1e-5;
  double min_step = 1e-8;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  double step = 0.0;     ///< step of the reported numeric value
  bool refined = false;  ///< a kink forced a smaller step
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  GradCheckEntry worst;
  std::size_t checked = 0;
  std::size_t refined = 0;

  bool passed(double tol) const { return max_rel_error <= tol; }
};

/// Compares reverse-mode gradients of `graph` at `point` against central
/// differences. Throws Error if any evaluation is non-finite.
GradCheckReport grad_check(const ScalarGraph& graph, const ParamBundle& point,
                           const GradCheckOptions& options = {});

}  // namespace rpm_align::nn
