#pragma once

#include "rpm_align/geom.hpp"

#include <vector>

namespace rpm_align {

/// Static 3-d tree with axis-median splits. Sets smaller than
/// `kBruteForceBelow` points are scanned linearly. Ties in distance are
/// broken by the smaller point index so results are deterministic.
class KdTree {
 public:
  static constexpr Eigen::Index kBruteForceBelow = 32;
  static constexpr Eigen::Index kLeafSize = 16;

  explicit KdTree(Points points);

  Eigen::Index size() const { return points_.rows(); }
  const Points& points() const { return points_; }

  /// Index of the closest point; squared distance written to `sq_dist`.
  Eigen::Index nearest(const Vec3& query, double* sq_dist = nullptr) const;

  /// k closest points ordered by (distance, index).
  std::vector<Eigen::Index> knn(const Vec3& query, int k) const;

  /// All points with |p - query| <= radius, sorted by index.
  std::vector<Eigen::Index> radius_search(const Vec3& query, double radius) const;

 private:
  struct Node {
    int axis = -1;          // -1 for leaves
    double split = 0.0;
    Eigen::Index begin = 0;  // range into order_
    Eigen::Index end = 0;
    int left = -1;
    int right = -1;
  };

  int build(Eigen::Index begin, Eigen::Index end);

  Points points_;
  std::vector<Eigen::Index> order_;
  std::vector<Node> nodes_;
};

}  // namespace rpm_align
