#include "rpm_align/nn/tensor.hpp"

#include "rpm_align/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace rpm_align::nn {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), values_(product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(values.begin(), values.end()) {
  if (product(shape_) != values_.size())
    throw InvalidArgument("tensor shape " + shape_string() + " does not match " +
                          std::to_string(values_.size()) + " values");
}

Tensor Tensor::from_matrix(const RowMatrix& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  t.matrix() = m;
  return t;
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Eigen::Index Tensor::rows() const {
  if (shape_.empty()) return 1;
  return static_cast<Eigen::Index>(size() / std::max<std::size_t>(shape_.back(), 1));
}

Eigen::Index Tensor::cols() const {
  return shape_.empty() ? 1 : static_cast<Eigen::Index>(shape_.back());
}

double Tensor::item() const {
  if (values_.size() != 1) throw InvalidArgument("item() on tensor of shape " + shape_string());
  return values_[0];
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

}  // namespace rpm_align::nn
