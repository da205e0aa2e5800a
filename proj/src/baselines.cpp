#include "rpm_align/baselines.hpp"

#include "rpm_align/errors.hpp"
#include "rpm_align/kdtree.hpp"

#include <cmath>

namespace rpm_align {

RegistrationResult classical_rpm(const PointCloud& x, const PointCloud& y, const RpmSchedule& s) {
  if (s.n_outer < 1) throw InvalidArgument("n_outer >= 1 required");
  if (!(s.beta0 > 0.0)) throw InvalidArgument("beta0 must be positive");
  if (!(s.rate > 1.0)) throw InvalidArgument("rate must be > 1");
  if (!(s.alpha >= 0.0)) throw InvalidArgument("alpha must be nonnegative");
  if (s.sinkhorn_iters < 1) throw InvalidArgument("sinkhorn_iters >= 1 required");
  const SlackMode slack = s.slack ? SlackMode::kWithSlack : SlackMode::kNoSlack;
  const Eigen::Index J = x.size(), K = y.size();

  RegistrationResult res;
  RigidTransform T = RigidTransform::identity();
  double last_update = 0.0;
  for (int i = 0; i < s.n_outer; ++i) {
    const AnnealParams p{s.alpha, s.beta0 * std::pow(s.rate, i)};
    const Points xt = apply_transform(x.points(), T);
    const Matrix logm = sinkhorn_log(log_match_spatial(xt, y.points(), p), s.sinkhorn_iters, slack);
    const Matrix block = logm.topLeftCorner(J, K).array().exp().matrix();
    RigidTransform next;
    try {
      next = weighted_procrustes(x.points(), extract_correspondences(block, y.points()));
    } catch (const SolverError& e) {
      throw e.at_iteration(i + 1);
    }
    last_update = rotation_angle_deg(next.rotation * T.rotation.transpose());
    T = next;
    res.per_iteration.push_back({T, p, block.sum()});
  }
  res.final_transform = T;
  res.iterations_run = s.n_outer;
  res.converged = last_update < kConvergedRotationDeg;
  return res;
}

RegistrationResult icp(const PointCloud& x, const PointCloud& y, const IcpConfig& cfg) {
  if (x.empty() || y.empty()) throw InvalidArgument("icp requires non-empty clouds");
  if (cfg.max_iters < 1) throw InvalidArgument("max_iters >= 1 required");
  const KdTree tree(y.points());
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(x.size());
  RegistrationResult res;
  RigidTransform T = RigidTransform::identity();
  for (int it = 1; it <= cfg.max_iters; ++it) {
    const Points xt = apply_transform(x.points(), T);
    Points targets(x.size(), 3);
    for (Eigen::Index j = 0; j < x.size(); ++j) targets.row(j) = y.points().row(tree.nearest(xt.row(j).transpose()));
    RigidTransform next;
    try {
      next = solve_weighted_procrustes(x.points(), targets, ones).transform;
    } catch (const SolverError& e) {
      throw e.at_iteration(it);
    }
    const double update = rotation_angle_deg(next.rotation * T.rotation.transpose());
    T = next;
    res.per_iteration.push_back({T, {}, static_cast<double>(x.size())});
    res.iterations_run = it;
    if (update < cfg.tol_deg) {
      res.converged = true;
      break;
    }
  }
  res.final_transform = T;
  return res;
}

}  // namespace rpm_align
