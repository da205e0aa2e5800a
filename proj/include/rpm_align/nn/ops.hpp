#pragma once

#include "rpm_align/nn/tape.hpp"

#include <cstddef>
#include <vector>

namespace rpm_align::nn {

// Differentiable building blocks. All ops treat their input as a matrix of
// rows() x cols() over the trailing axis unless stated otherwise.

Var add(Var a, Var b);
Var scale(Var a, double factor);
/// Sum of all entries (scalar).
Var sum(Var a);
Var exp(Var a);

/// out = in * weight + bias over the trailing axis. weight is [Din, Dout],
/// bias is [Dout]. Leading axes of `in` are preserved.
Var dense(Var in, Var weight, Var bias);

Var relu(Var a);
/// ln(1 + e^x), evaluated without overflow; strictly positive.
Var softplus(Var a);

inline constexpr double kGroupNormEps = 1e-5;

/// Per-row standardisation over `groups` contiguous channel groups followed
/// by a per-channel affine map. Input [N, C] with C divisible by groups.
Var group_norm(Var in, Var gain, Var shift, int groups, double eps = kGroupNormEps);

/// Column-wise maximum over all rows: [N, D] -> [D]. The gradient goes to
/// the first row attaining the maximum.
Var max_pool(Var in);

/// Column-wise maximum within row segments [offsets[s], offsets[s+1]):
/// [R, D] -> [S, D] with S = offsets.size() - 1. Segments must be non-empty.
Var segment_max_pool(Var in, std::vector<std::size_t> offsets);

inline constexpr double kL2NormEps = 1e-12;

/// Each trailing-axis vector divided by max(|v|, 1e-12).
Var l2_normalize(Var in);

/// Pairwise squared Euclidean distances between rows: [J, D] x [K, D] -> [J, K].
Var pairwise_sq_dist(Var a, Var b);

/// Columns [begin, end) of a matrix.
Var slice_cols(Var in, Eigen::Index begin, Eigen::Index end);

}  // namespace rpm_align::nn
