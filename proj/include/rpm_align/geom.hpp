#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

namespace rpm_align {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
/// N x 3 row-major block of 3-vectors, one point per row.
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Oriented point set. Points and normals have equal length N >= 1, normals
/// are unit length (1e-6) and every coordinate is finite.
///
/// A default-constructed cloud is empty and only useful as a placeholder.
class PointCloud {
 public:
  PointCloud() = default;
  /// Throws InvalidArgument when the invariants above do not hold.
  PointCloud(Points points, Points normals);

  const Points& points() const { return points_; }
  const Points& normals() const { return normals_; }
  Eigen::Index size() const { return points_.rows(); }
  bool empty() const { return points_.rows() == 0; }

  Vec3 point(Eigen::Index i) const { return points_.row(i).transpose(); }
  Vec3 normal(Eigen::Index i) const { return normals_.row(i).transpose(); }

  /// Rows selected by `indices`, in that order.
  PointCloud subset(std::span<const Eigen::Index> indices) const;

 private:
  Points points_;
  Points normals_;
};

/// Element of SE(3): x -> rotation * x + translation.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  /// Orthogonality and det = +1 within `tol`.
  bool is_valid(double tol = 1e-9) const;
  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
};

Points apply_transform(const Points& points, const RigidTransform& T);
PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& T);
/// Applies T2 first, then T1.
RigidTransform compose(const RigidTransform& T1, const RigidTransform& T2);
RigidTransform invert(const RigidTransform& T);

Mat3 rotation_about_axis(const Vec3& axis, double angle_deg);
/// Intrinsic Z-Y-X composition: Rz(yaw) * Ry(pitch) * Rx(roll).
Mat3 rotation_from_euler_zyx(double yaw_deg, double pitch_deg, double roll_deg);

struct EulerZYX {
  double yaw_deg = 0.0;
  double pitch_deg = 0.0;
  double roll_deg = 0.0;
  /// |pitch| within 1e-6 degrees of 90: yaw and roll are not separable.
  bool gimbal_lock = false;
};
EulerZYX euler_zyx_from_rotation(const Mat3& R);

/// Angle of a rotation matrix in degrees, in [0, 180]. Equal to
/// arccos((tr R - 1) / 2), evaluated as atan2 for precision at small angles.
double rotation_angle_deg(const Mat3& R);

struct IsotropicErrors {
  double rot_deg = 0.0;
  double trans = 0.0;
};
IsotropicErrors isotropic_errors(const RigidTransform& gt, const RigidTransform& pred);

struct AnisotropicErrors {
  double rot_deg = 0.0;  ///< mean |Euler angle difference| over yaw, pitch, roll
  double trans = 0.0;    ///< mean |translation component difference|
  bool gimbal_lock = false;
};
AnisotropicErrors anisotropic_errors(const RigidTransform& gt, const RigidTransform& pred);

/// Chamfer distance where each side is compared against the clean, complete
/// version of the other cloud:
///   mean_x min_{y in Y_clean} |x-y|^2 + mean_y min_{x in X_clean} |x-y|^2.
/// `x_pred` and `x_clean` must already be in the reference frame.
double modified_chamfer(const Points& x_pred, const Points& y, const Points& x_clean,
                        const Points& y_clean);

struct MetricsReport {
  double aniso_rot_deg = 0.0;
  double aniso_trans = 0.0;
  double iso_rot_deg = 0.0;
  double iso_trans = 0.0;
  double chamfer_mod = 0.0;
  bool gimbal_lock = false;
};

/// All evaluation metrics for a predicted source->reference transform.
MetricsReport compute_metrics(const RigidTransform& gt, const RigidTransform& pred,
                              const Points& source, const Points& reference,
                              const Points& source_clean, const Points& reference_clean);

struct NormalEstimate {
  Points normals;
  /// Indices whose neighborhood covariance had rank < 2; their normal is +z.
  std::vector<Eigen::Index> degenerate;
};

/// Least-eigenvector normals of the k-nearest-neighbor covariance, oriented
/// away from the centroid of `points`. Requires N >= k >= 3.
NormalEstimate estimate_normals(const Points& points, int k);

}  // namespace rpm_align
