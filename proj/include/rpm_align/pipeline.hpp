#pragma once

#include "rpm_align/data.hpp"
#include "rpm_align/features.hpp"
#include "rpm_align/match.hpp"
#include "rpm_align/nn/params.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace rpm_align {

struct IterationRecord {
  /// Cumulative source-to-reference transform after this iteration.
  RigidTransform transform;
  AnnealParams anneal;
  /// Sum of the real block of the match matrix.
  double inlier_mass = 0.0;
};

struct RegistrationResult {
  RigidTransform final_transform;
  std::vector<IterationRecord> per_iteration;
  bool converged = false;
  int iterations_run = 0;
};

/// Iterations whose rotation update is below this (degrees) count as converged
/// for the soft-assignment methods.
inline constexpr double kConvergedRotationDeg = 1e-3;

struct RpmNetOptions {
  int sinkhorn_iters = 5;
  SlackMode slack = SlackMode::kWithSlack;
  /// Seed of the neighborhood subsampling.
  std::uint64_t neighbor_seed = 0;
};

/// Neighborhoods of source and reference, computed once per pair. The
/// transformed source is a rigid image of the source, so its neighborhoods
/// are the same index sets.
struct PairNeighborhoods {
  NeighborhoodSet source;
  NeighborhoodSet reference;
};
PairNeighborhoods pair_neighborhoods(const PointCloud& x, const PointCloud& y, const FeatureConfig& cfg,
                                     std::uint64_t seed);

/// Differentiable pieces of one outer iteration, all on the same tape.
struct IterationGraph {
  nn::Var transform;  ///< [4, 3], see ops::weighted_procrustes
  nn::Var match;      ///< (J+1) x (K+1) with slack, J x K without; not log
  nn::Var anneal;     ///< [alpha, beta]
};

/// One RPM-Net iteration from the (constant) cumulative transform `prev`.
/// Y does not move between iterations, so its features can be shared: when
/// `reference_features` already lives on `tape` it is reused, otherwise it
/// receives the features computed here.
IterationGraph rpmnet_iteration(nn::Tape& tape, const nn::BoundParams& params, const PointCloud& x,
                                const PointCloud& y, const RigidTransform& prev, const PairNeighborhoods& nbrs,
                                const ArchitectureConfig& arch, const RpmNetOptions& opt,
                                nn::Var* reference_features = nullptr);

/// Full inference loop. Solver errors are rethrown with the 1-based
/// iteration index. `matches`, when given, receives each iteration's J x K
/// real block.
RegistrationResult rpmnet_register(const PointCloud& x, const PointCloud& y, const nn::ParamBundle& params,
                                   const ArchitectureConfig& arch, int n_iters, const RpmNetOptions& opt = {},
                                   std::vector<Matrix>* matches = nullptr);

inline constexpr double kDefaultInlierLambda = 0.01;

/// (1/2)^(n_iters - i) for i = 1..n_iters.
std::vector<double> iteration_weights(int n_iters);

struct LossReport {
  std::vector<double> l_reg;      ///< per iteration
  std::vector<double> l_inlier;   ///< per iteration, <= 0
  std::vector<double> l_total;    ///< per iteration, l_reg + lambda * l_inlier
  std::vector<double> per_iteration_weights;
  double weighted_total = 0.0;    ///< sum_i weight_i * l_total_i
  /// Constant cumulative transform each iteration started from.
  std::vector<RigidTransform> start_transforms;
};

/// mean_j |(R_gt x_j + t_gt) - (R x_j + t)|_1
double registration_loss(const Points& x, const RigidTransform& gt, const RigidTransform& pred);
/// -(1/J) sum m - (1/K) sum m over the real J x K block.
double inlier_loss(const Matrix& real_block);

LossReport compute_losses(const RegistrationResult& result, const std::vector<Matrix>& matches, const Points& x,
                          const RigidTransform& gt, double lambda = kDefaultInlierLambda);

namespace ops {
/// x R^T + t for a [4, 3] transform tensor: [J, 3].
nn::Var transform_points(nn::Var transform, const Points& x);
/// Differentiable registration_loss.
nn::Var registration_loss(nn::Var transform, const Points& x, const RigidTransform& gt);
/// Differentiable inlier_loss; `has_slack` says whether the last row and column are slack.
nn::Var inlier_loss(nn::Var match, bool has_slack);
}  // namespace ops

/// Weighted multi-iteration loss of one pair with the cumulative transform
/// detached at the start of every iteration. Returns the scalar total;
/// `report` (optional) receives the per-iteration values. With `starts`,
/// iteration i begins from starts[i-1] instead of the previous output, which
/// turns the loss into the function whose exact gradient the tape computes.
nn::Var rpmnet_pair_loss(nn::Tape& tape, const nn::BoundParams& params, const RegistrationPair& pair,
                         const PairNeighborhoods& nbrs, const ArchitectureConfig& arch, int n_iters, double lambda,
                         const RpmNetOptions& opt, LossReport* report = nullptr,
                         std::vector<AnnealParams>* anneal = nullptr,
                         const std::vector<RigidTransform>* starts = nullptr);

/// Serialized network state.
struct Checkpoint {
  static constexpr int kFormatVersion = 1;
  ArchitectureConfig arch;
  nn::ParamBundle params;
  std::optional<nn::AdamState> adam;
  /// Resolved training configuration and progress; free-form.
  nlohmann::json training = nlohmann::json::object();
};

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
/// Validates parameter names and shapes against the architecture.
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rpm_align
