#pragma once

#include "rpm_align/pipeline.hpp"

namespace rpm_align {

/// Deterministic annealing schedule of the classical spatial-distance RPM.
struct RpmSchedule {
  double alpha = 0.5;  ///< squared spatial units
  double beta0 = 1.0;
  double rate = 1.5;
  int n_outer = 20;
  int sinkhorn_iters = 20;
  bool slack = true;
};

/// Softassign on squared spatial distances with beta = beta0 * rate^i
/// (i = 0..n_outer-1), Sinkhorn, correspondences, weighted Procrustes.
RegistrationResult classical_rpm(const PointCloud& x, const PointCloud& y, const RpmSchedule& schedule = {});

struct IcpConfig {
  int max_iters = 100;
  /// Stop once the rotation update falls below this many degrees.
  double tol_deg = 1e-6;
};

/// Point-to-point ICP with nearest-neighbor assignment and unweighted
/// Procrustes. converged reports whether the tolerance was reached.
RegistrationResult icp(const PointCloud& x, const PointCloud& y, const IcpConfig& cfg = {});

}  // namespace rpm_align
