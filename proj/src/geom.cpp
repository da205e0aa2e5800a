#include "rpm_align/geom.hpp"

#include "rpm_align/errors.hpp"
#include "rpm_align/kdtree.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rpm_align {

namespace {

constexpr double kDegPerRad = 180.0 / std::numbers::pi;

double wrap_deg(double a) {
  a = std::fmod(a + 180.0, 360.0);
  if (a < 0) a += 360.0;
  return a - 180.0;
}

double mean_nearest_sq(const Points& queries, const KdTree& tree) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    double d = 0.0;
    tree.nearest(queries.row(i).transpose(), &d);
    sum += d;
  }
  return sum / static_cast<double>(queries.rows());
}

}  // namespace

PointCloud::PointCloud(Points points, Points normals)
    : points_(std::move(points)), normals_(std::move(normals)) {
  if (points_.rows() < 1) throw InvalidArgument("point cloud must contain at least one point");
  if (points_.rows() != normals_.rows())
    throw InvalidArgument("point and normal counts differ");
  if (!points_.allFinite() || !normals_.allFinite())
    throw InvalidArgument("point cloud contains non-finite values");
  for (Eigen::Index i = 0; i < normals_.rows(); ++i) {
    if (std::abs(normals_.row(i).norm() - 1.0) > 1e-6)
      throw InvalidArgument("normal " + std::to_string(i) + " is not unit length");
  }
}

PointCloud PointCloud::subset(std::span<const Eigen::Index> indices) const {
  Points p(static_cast<Eigen::Index>(indices.size()), 3);
  Points n(static_cast<Eigen::Index>(indices.size()), 3);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    p.row(static_cast<Eigen::Index>(r)) = points_.row(indices[r]);
    n.row(static_cast<Eigen::Index>(r)) = normals_.row(indices[r]);
  }
  return PointCloud(std::move(p), std::move(n));
}

bool RigidTransform::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
}

Points apply_transform(const Points& points, const RigidTransform& T) {
  Points out = points * T.rotation.transpose();
  out.rowwise() += T.translation.transpose();
  return out;
}

PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& T) {
  return PointCloud(apply_transform(cloud.points(), T),
                    Points(cloud.normals() * T.rotation.transpose()));
}

RigidTransform compose(const RigidTransform& T1, const RigidTransform& T2) {
  return {T1.rotation * T2.rotation, T1.rotation * T2.translation + T1.translation};
}

RigidTransform invert(const RigidTransform& T) {
  const Mat3 Rt = T.rotation.transpose();
  return {Rt, -Rt * T.translation};
}

Mat3 rotation_about_axis(const Vec3& axis, double angle_deg) {
  return Eigen::AngleAxisd(angle_deg / kDegPerRad, axis.normalized()).toRotationMatrix();
}

Mat3 rotation_from_euler_zyx(double yaw_deg, double pitch_deg, double roll_deg) {
  return rotation_about_axis(Vec3::UnitZ(), yaw_deg) * rotation_about_axis(Vec3::UnitY(), pitch_deg) *
         rotation_about_axis(Vec3::UnitX(), roll_deg);
}

EulerZYX euler_zyx_from_rotation(const Mat3& R) {
  EulerZYX e;
  const double s = std::clamp(-R(2, 0), -1.0, 1.0);
  e.pitch_deg = std::asin(s) * kDegPerRad;
  e.gimbal_lock = std::abs(std::abs(e.pitch_deg) - 90.0) < 1e-6;
  if (e.gimbal_lock) {
    // Only yaw -/+ roll is observable; put all of it in yaw.
    e.roll_deg = 0.0;
    e.yaw_deg = std::atan2(-R(0, 1), R(1, 1)) * kDegPerRad;
  } else {
    e.yaw_deg = std::atan2(R(1, 0), R(0, 0)) * kDegPerRad;
    e.roll_deg = std::atan2(R(2, 1), R(2, 2)) * kDegPerRad;
  }
  return e;
}

double rotation_angle_deg(const Mat3& R) {
  // atan2(sin, cos) equals arccos((tr - 1) / 2) but keeps full precision near
  // 0 and 180 degrees, where arccos of a rounded trace loses half the digits.
  const Vec3 v(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  return std::atan2(v.norm(), R.trace() - 1.0) * kDegPerRad;
}

IsotropicErrors isotropic_errors(const RigidTransform& gt, const RigidTransform& pred) {
  return {rotation_angle_deg(gt.rotation.transpose() * pred.rotation),
          (gt.translation - pred.translation).norm()};
}

AnisotropicErrors anisotropic_errors(const RigidTransform& gt, const RigidTransform& pred) {
  const EulerZYX a = euler_zyx_from_rotation(gt.rotation);
  const EulerZYX b = euler_zyx_from_rotation(pred.rotation);
  AnisotropicErrors out;
  out.rot_deg = (std::abs(wrap_deg(a.yaw_deg - b.yaw_deg)) + std::abs(wrap_deg(a.pitch_deg - b.pitch_deg)) +
                 std::abs(wrap_deg(a.roll_deg - b.roll_deg))) /
                3.0;
  out.trans = (gt.translation - pred.translation).cwiseAbs().sum() / 3.0;
  out.gimbal_lock = a.gimbal_lock || b.gimbal_lock;
  return out;
}

double modified_chamfer(const Points& x_pred, const Points& y, const Points& x_clean,
                        const Points& y_clean) {
  if (x_pred.rows() == 0 || y.rows() == 0 || x_clean.rows() == 0 || y_clean.rows() == 0)
    throw InvalidArgument("modified_chamfer requires non-empty clouds");
  const KdTree y_clean_tree(y_clean);
  const KdTree x_clean_tree(x_clean);
  return mean_nearest_sq(x_pred, y_clean_tree) + mean_nearest_sq(y, x_clean_tree);
}

MetricsReport compute_metrics(const RigidTransform& gt, const RigidTransform& pred,
                              const Points& source, const Points& reference,
                              const Points& source_clean, const Points& reference_clean) {
  MetricsReport m;
  const AnisotropicErrors an = anisotropic_errors(gt, pred);
  const IsotropicErrors iso = isotropic_errors(gt, pred);
  m.aniso_rot_deg = an.rot_deg;
  m.aniso_trans = an.trans;
  m.gimbal_lock = an.gimbal_lock;
  m.iso_rot_deg = iso.rot_deg;
  m.iso_trans = iso.trans;
  m.chamfer_mod = modified_chamfer(apply_transform(source, pred), reference,
                                   apply_transform(source_clean, pred), reference_clean);
  return m;
}

NormalEstimate estimate_normals(const Points& points, int k) {
  const Eigen::Index n = points.rows();
  if (k < 3 || n < k) throw InvalidArgument("estimate_normals requires N >= k >= 3");

  const KdTree tree(points);
  const Vec3 centroid = points.colwise().mean().transpose();
  NormalEstimate out;
  out.normals.resize(n, 3);

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto nbrs = tree.knn(points.row(i).transpose(), k);
    Vec3 mean = Vec3::Zero();
    for (const auto j : nbrs) mean += points.row(j).transpose();
    mean /= static_cast<double>(nbrs.size());
    Mat3 cov = Mat3::Zero();
    for (const auto j : nbrs) {
      const Vec3 d = points.row(j).transpose() - mean;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(nbrs.size());

    const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 evals = eig.eigenvalues();  // ascending
    const double scale = std::max(evals(2), 1e-300);
    Vec3 normal;
    if (evals(1) <= 1e-12 * scale) {
      normal = Vec3::UnitZ();
      out.degenerate.push_back(i);
    } else {
      normal = eig.eigenvectors().col(0).normalized();
      if (normal.dot(points.row(i).transpose() - centroid) < 0) normal = -normal;
    }
    out.normals.row(i) = normal.transpose();
  }
  return out;
}

}  // namespace rpm_align
