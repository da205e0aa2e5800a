#pragma once

#include "rpm_align/baselines.hpp"
#include "rpm_align/pipeline.hpp"

#include <memory>
#include <string>
#include <vector>

namespace rpm_align {

enum class Method { kIcp, kRpm, kRpmNet, kGroundTruth, kIdentity };

std::string to_string(Method m);
/// "icp", "rpm", "rpmnet", "gt", "identity"; ConfigError otherwise.
Method parse_method(const std::string& name);

struct MethodConfig {
  Method method = Method::kIcp;
  IcpConfig icp;
  RpmSchedule rpm;
  std::shared_ptr<const Checkpoint> checkpoint;  ///< required for kRpmNet
  int rpmnet_iters = 5;
  RpmNetOptions rpmnet;
};

/// Registers one pair. kGroundTruth returns gt, kIdentity the identity.
RegistrationResult run_method(const MethodConfig& cfg, const RegistrationPair& pair);

struct PairEvaluation {
  std::string pair_id;
  MetricsReport metrics;
  double initial_angle_deg = 0.0;  ///< rotation angle of gt
  RegistrationResult result;
  /// Modified Chamfer after each iteration of result.per_iteration.
  std::vector<double> chamfer_per_iteration;
  bool failed = false;  ///< solver error; metrics then score the identity
  std::string error;
};

MetricsReport pair_metrics(const RegistrationPair& pair, const RigidTransform& pred);
/// Modified Chamfer of the ground-truth alignment: the dataset floor.
double ground_truth_chamfer(const RegistrationPair& pair);

/// Pairs are processed on up to `jobs` threads; results are in input order.
std::vector<PairEvaluation> evaluate_pairs(const std::vector<RegistrationPair>& pairs, const MethodConfig& cfg,
                                           int jobs = 1);

struct MethodSummary {
  std::string method;
  MetricsReport mean;
  std::size_t pairs = 0;
  std::size_t failures = 0;
  double mean_initial_angle_deg = 0.0;
  /// Mean over pairs of chamfer_per_iteration (pairs with fewer entries are
  /// held at their last value).
  std::vector<double> mean_chamfer_per_iteration;
};

MethodSummary summarize(const std::string& method, const std::vector<PairEvaluation>& evals);

}  // namespace rpm_align
