#pragma once

#include "rpm_align/geom.hpp"
#include "rpm_align/match.hpp"
#include "rpm_align/nn/params.hpp"

#include "json.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace rpm_align {

struct FeatureConfig {
  double radius = 0.3;
  int max_neighbors = 64;
  std::vector<int> pre_widths{64, 64, 128};
  /// The last width is the feature dimension.
  std::vector<int> post_widths{128, 96};
  int groups = 4;
  bool use_xc = true;
  bool use_dx = true;
  bool use_ppf = true;

  int feature_dim() const { return post_widths.back(); }
};

struct ParamNetConfig {
  std::vector<int> pre_widths{32, 64};
  /// The last width must be 2 (alpha, beta).
  std::vector<int> head_widths{32, 2};
  int groups = 4;
  /// When false, alpha and beta are two free learnable scalars (through
  /// softplus) instead of a network output.
  bool learned_annealing = true;
};

struct ArchitectureConfig {
  FeatureConfig features;
  ParamNetConfig param_net;

  /// Throws ConfigError on empty stacks, non-positive sizes, or a head that
  /// does not end in 2 outputs.
  void validate() const;
};

nlohmann::json architecture_to_json(const ArchitectureConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
ArchitectureConfig architecture_from_json(const nlohmann::json& j);

/// CSR list of neighbor indices per center.
struct NeighborhoodSet {
  std::vector<std::size_t> offsets{0};
  std::vector<Eigen::Index> indices;

  std::size_t centers() const { return offsets.size() - 1; }
  std::size_t total() const { return indices.size(); }
  std::span<const Eigen::Index> of(std::size_t c) const {
    return {indices.data() + offsets[c], offsets[c + 1] - offsets[c]};
  }
};

/// All points within `radius` of each center (sorted by index). Lists longer
/// than `max_neighbors` are subsampled uniformly with a per-center stream of
/// `seed`; the center itself is always kept.
NeighborhoodSet radius_neighbors(const Points& points, double radius, int max_neighbors,
                                 std::uint64_t seed);

/// (angle(n_c, d), angle(n_i, d), angle(n_c, n_i), |d|) with d = x_i - x_c,
/// in radians. Coincident points give the zero vector.
Eigen::Vector4d ppf(const Vec3& x_c, const Vec3& n_c, const Vec3& x_i, const Vec3& n_i);

/// One row [x_c, x_i - x_c, ppf] per (center, neighbor) pair in CSR order.
Matrix assemble_inputs(const PointCloud& cloud, const NeighborhoodSet& nbrs);

/// Zeroes the channels disabled by use_xc / use_dx / use_ppf.
void mask_channels(Matrix& rows, const FeatureConfig& cfg);

/// Group count actually used for a layer of `channels` width.
int effective_groups(int requested, int channels);

/// Uniform(+-1/sqrt(fan_in)) weights and biases, unit group-norm gains and
/// zero shifts. Names are "feat/..." and "param/...".
nn::ParamBundle init_params(const ArchitectureConfig& cfg, std::uint64_t seed);

/// Throws ConfigError when names or shapes do not match `cfg`.
void check_params(const nn::ParamBundle& params, const ArchitectureConfig& cfg);

/// Differentiable hybrid features: [N, D], rows unit norm.
nn::Var hybrid_features(nn::Tape& tape, const nn::BoundParams& params, const PointCloud& cloud,
                        const NeighborhoodSet& nbrs, const FeatureConfig& cfg);

/// Inference convenience. Neighborhoods are built with seed 0 when not given.
Matrix extract_hybrid_features(const PointCloud& cloud, const nn::ParamBundle& params,
                               const ArchitectureConfig& cfg, const NeighborhoodSet* nbrs = nullptr);

/// Differentiable [alpha, beta]; both strictly positive.
nn::Var anneal_params(nn::Tape& tape, const nn::BoundParams& params, const Points& x, const Points& y,
                      const ParamNetConfig& cfg);

AnnealParams predict_anneal_params(const PointCloud& x, const PointCloud& y, const nn::ParamBundle& params,
                                   const ArchitectureConfig& cfg);

}  // namespace rpm_align
