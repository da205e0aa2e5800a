#include "rpm_align/kdtree.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <queue>
#include <utility>

namespace rpm_align {

namespace {

using Candidate = std::pair<double, Eigen::Index>;  // (squared distance, index)

}  // namespace

KdTree::KdTree(Points points) : points_(std::move(points)) {
  order_.resize(static_cast<std::size_t>(points_.rows()));
  std::iota(order_.begin(), order_.end(), Eigen::Index{0});
  if (points_.rows() == 0) return;
  if (points_.rows() < kBruteForceBelow) {
    nodes_.push_back(Node{-1, 0.0, 0, points_.rows(), -1, -1});
  } else {
    build(0, points_.rows());
  }
}

int KdTree::build(Eigen::Index begin, Eigen::Index end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{-1, 0.0, begin, end, -1, -1});
  if (end - begin <= kLeafSize) return id;

  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (Eigen::Index i = begin; i < end; ++i) {
    const Vec3 p = points_.row(order_[i]).transpose();
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);

  const Eigen::Index mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](Eigen::Index a, Eigen::Index b) {
                     const double ca = points_(a, axis), cb = points_(b, axis);
                     return ca < cb || (ca == cb && a < b);
                   });
  const double split = points_(order_[mid], axis);
  const int left = build(begin, mid);
  const int right = build(mid, end);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

Eigen::Index KdTree::nearest(const Vec3& query, double* sq_dist) const {
  Candidate best{std::numeric_limits<double>::infinity(), -1};
  if (nodes_.empty()) return -1;

  // Iterative depth-first search, nearer child first.
  std::vector<int> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[stack.back()];
    stack.pop_back();
    if (node.axis < 0) {
      for (Eigen::Index i = node.begin; i < node.end; ++i) {
        const Eigen::Index idx = order_[i];
        const double d = (points_.row(idx).transpose() - query).squaredNorm();
        if (Candidate{d, idx} < best) best = {d, idx};
      }
      continue;
    }
    const double diff = query[node.axis] - node.split;
    const int near = diff < 0 ? node.left : node.right;
    const int far = diff < 0 ? node.right : node.left;
    if (diff * diff <= best.first) stack.push_back(far);
    stack.push_back(near);
  }
  if (sq_dist) *sq_dist = best.first;
  return best.second;
}

std::vector<Eigen::Index> KdTree::knn(const Vec3& query, int k) const {
  std::priority_queue<Candidate> heap;  // max-heap on (distance, index)
  const auto kk = static_cast<std::size_t>(std::max(k, 0));
  if (nodes_.empty() || kk == 0) return {};

  auto worst = [&] {
    return heap.size() < kk ? std::numeric_limits<double>::infinity() : heap.top().first;
  };

  std::vector<int> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[stack.back()];
    stack.pop_back();
    if (node.axis < 0) {
      for (Eigen::Index i = node.begin; i < node.end; ++i) {
        const Eigen::Index idx = order_[i];
        const Candidate c{(points_.row(idx).transpose() - query).squaredNorm(), idx};
        if (heap.size() < kk) {
          heap.push(c);
        } else if (c < heap.top()) {
          heap.pop();
          heap.push(c);
        }
      }
      continue;
    }
    const double diff = query[node.axis] - node.split;
    const int near = diff < 0 ? node.left : node.right;
    const int far = diff < 0 ? node.right : node.left;
    if (diff * diff <= worst()) stack.push_back(far);
    stack.push_back(near);
  }

  std::vector<Eigen::Index> out(heap.size());
  for (auto it = out.rbegin(); it != out.rend(); ++it) {
    *it = heap.top().second;
    heap.pop();
  }
  return out;
}

std::vector<Eigen::Index> KdTree::radius_search(const Vec3& query, double radius) const {
  std::vector<Eigen::Index> out;
  if (nodes_.empty()) return out;
  const double r2 = radius * radius;
  std::vector<int> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[stack.back()];
    stack.pop_back();
    if (node.axis < 0) {
      for (Eigen::Index i = node.begin; i < node.end; ++i) {
        const Eigen::Index idx = order_[i];
        if ((points_.row(idx).transpose() - query).squaredNorm() <= r2) out.push_back(idx);
      }
      continue;
    }
    const double diff = query[node.axis] - node.split;
    if (diff <= radius) stack.push_back(node.left);
    if (diff >= -radius) stack.push_back(node.right);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace rpm_align
