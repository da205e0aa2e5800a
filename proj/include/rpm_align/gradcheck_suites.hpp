#pragma once

#include <string>
#include <vector>

namespace rpm_align {

inline constexpr double kGradCheckTolerance = 1e-4;

/// Outcome of one gradient-check case family over all seeds.
struct GradSuiteResult {
  std::string name;
  int cases = 0;
  std::size_t entries = 0;
  std::size_t refined = 0;  ///< entries re-checked at a smaller step (kink nearby)
  double max_rel_error = 0.0;
  std::string worst;  ///< "<seed>:<param>[<index>]"

  bool passed(double tol = kGradCheckTolerance) const { return max_rel_error <= tol; }
};

/// Every differentiable op on seeded random inputs kept away from relu kinks
/// and max-pool ties.
std::vector<GradSuiteResult> gradcheck_layers(int seeds = 50);
/// Weighted Procrustes backward on random 6-point instances.
std::vector<GradSuiteResult> gradcheck_procrustes(int seeds = 50);
/// Two-iteration training loss of 8-point pairs at random initialisation,
/// `max_entries` sampled parameter entries per seed. The start transform of
/// each iteration is held at its unperturbed (detached) value.
std::vector<GradSuiteResult> gradcheck_full(int seeds = 50, int n_points = 8, std::size_t max_entries = 64);

/// scope is "layers", "procrustes", "full" or "all"; ConfigError otherwise.
std::vector<GradSuiteResult> run_gradcheck(const std::string& scope, int seeds = 50);

}  // namespace rpm_align
