#include "rpm_align/evaluation.hpp"

#include "rpm_align/errors.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <thread>

namespace rpm_align {

std::string to_string(Method m) {
  switch (m) {
    case Method::kIcp: return "icp";
    case Method::kRpm: return "rpm";
    case Method::kRpmNet: return "rpmnet";
    case Method::kGroundTruth: return "gt";
    case Method::kIdentity: return "identity";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::kIcp, Method::kRpm, Method::kRpmNet, Method::kGroundTruth, Method::kIdentity}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown method '" + name + "' (expected icp, rpm, rpmnet, gt or identity)");
}

RegistrationResult run_method(const MethodConfig& cfg, const RegistrationPair& pair) {
  switch (cfg.method) {
    case Method::kIcp: return icp(pair.source, pair.reference, cfg.icp);
    case Method::kRpm: return classical_rpm(pair.source, pair.reference, cfg.rpm);
    case Method::kRpmNet:
      if (!cfg.checkpoint) throw ConfigError("rpmnet requires a checkpoint");
      return rpmnet_register(pair.source, pair.reference, cfg.checkpoint->params, cfg.checkpoint->arch,
                             cfg.rpmnet_iters, cfg.rpmnet);
    case Method::kGroundTruth:
    case Method::kIdentity: {
      RegistrationResult r;
      r.final_transform = cfg.method == Method::kGroundTruth ? pair.gt : RigidTransform::identity();
      r.per_iteration.push_back({r.final_transform, {}, 0.0});
      r.iterations_run = 1;
      r.converged = true;
      return r;
    }
  }
  throw InvalidArgument("unknown method");
}

MetricsReport pair_metrics(const RegistrationPair& pair, const RigidTransform& pred) {
  return compute_metrics(pair.gt, pred, pair.source.points(), pair.reference.points(), pair.source_clean.points(),
                         pair.reference_clean.points());
}

double ground_truth_chamfer(const RegistrationPair& pair) { return pair_metrics(pair, pair.gt).chamfer_mod; }

namespace {

PairEvaluation evaluate_one(const RegistrationPair& pair, const MethodConfig& cfg) {
  PairEvaluation e;
  e.pair_id = pair.pair_id;
  e.initial_angle_deg = rotation_angle_deg(pair.gt.rotation);
  try {
    e.result = run_method(cfg, pair);
  } catch (const SolverError& err) {
    e.failed = true;
    e.error = err.what();
    e.result = RegistrationResult{};
    e.result.final_transform = RigidTransform::identity();
  }
  e.metrics = pair_metrics(pair, e.result.final_transform);
  for (const IterationRecord& r : e.result.per_iteration) {
    e.chamfer_per_iteration.push_back(
        modified_chamfer(apply_transform(pair.source.points(), r.transform), pair.reference.points(),
                         apply_transform(pair.source_clean.points(), r.transform), pair.reference_clean.points()));
  }
  return e;
}

}  // namespace

std::vector<PairEvaluation> evaluate_pairs(const std::vector<RegistrationPair>& pairs, const MethodConfig& cfg,
                                           int jobs) {
  std::vector<PairEvaluation> out(pairs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < pairs.size(); i = next++) {
      try {
        out[i] = evaluate_one(pairs[i], cfg);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(pairs.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

MethodSummary summarize(const std::string& method, const std::vector<PairEvaluation>& evals) {
  MethodSummary s;
  s.method = method;
  s.pairs = evals.size();
  if (evals.empty()) return s;
  std::size_t n_iter = 0;
  for (const auto& e : evals) n_iter = std::max(n_iter, e.chamfer_per_iteration.size());
  s.mean_chamfer_per_iteration.assign(n_iter, 0.0);
  for (const auto& e : evals) {
    s.mean.aniso_rot_deg += e.metrics.aniso_rot_deg;
    s.mean.aniso_trans += e.metrics.aniso_trans;
    s.mean.iso_rot_deg += e.metrics.iso_rot_deg;
    s.mean.iso_trans += e.metrics.iso_trans;
    s.mean.chamfer_mod += e.metrics.chamfer_mod;
    s.mean.gimbal_lock = s.mean.gimbal_lock || e.metrics.gimbal_lock;
    s.mean_initial_angle_deg += e.initial_angle_deg;
    if (e.failed) ++s.failures;
    for (std::size_t i = 0; i < n_iter; ++i) {
      double v = e.metrics.chamfer_mod;
      if (!e.chamfer_per_iteration.empty()) v = e.chamfer_per_iteration[std::min(i, e.chamfer_per_iteration.size() - 1)];
      s.mean_chamfer_per_iteration[i] += v;
    }
  }
  const double n = static_cast<double>(evals.size());
  s.mean.aniso_rot_deg /= n;
  s.mean.aniso_trans /= n;
  s.mean.iso_rot_deg /= n;
  s.mean.iso_trans /= n;
  s.mean.chamfer_mod /= n;
  s.mean_initial_angle_deg /= n;
  for (double& v : s.mean_chamfer_per_iteration) v /= n;
  return s;
}

}  // namespace rpm_align
