// Acceptance suite: one line per criterion, nonzero exit if any fails.
#include "rpm_align/baselines.hpp"
#include "rpm_align/data.hpp"
#include "rpm_align/evaluation.hpp"
#include "rpm_align/features.hpp"
#include "rpm_align/gradcheck_suites.hpp"
#include "rpm_align/io.hpp"
#include "rpm_align/match.hpp"
#include "rpm_align/runtime.hpp"
#include "rpm_align/train.hpp"

#include "test_util.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

using namespace rpm_align;
using namespace rpm_align::testing;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = RPM_ALIGN_SOURCE_DIR;
constexpr double kDeg = 180.0 / std::numbers::pi;

enum class Status { kPass, kFail, kWaived };

struct Outcome {
  Status status = Status::kFail;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double max_seconds;  ///< 0 when the criterion has no runtime bound
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome verdict(bool ok, std::string detail) { return {ok ? Status::kPass : Status::kFail, std::move(detail)}; }

// ---------------------------------------------------------------- 1

Outcome sinkhorn_convergence() {
  Rng rng(1001);
  double worst_residual = 0.0, worst_scale = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 8 + static_cast<Eigen::Index>(rng.below(57));
    Matrix a(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) a(i, j) = std::exp(rng.uniform(-3.0, 3.0));
    const MatchMatrix m = sinkhorn(a, 100, SlackMode::kNoSlack);
    const double rows = (m.values.rowwise().sum().array() - 1.0).abs().maxCoeff();
    const double cols = (m.values.colwise().sum().array() - 1.0).abs().maxCoeff();
    worst_residual = std::max({worst_residual, rows, cols});
    const double c = std::exp(rng.uniform(-5.0, 5.0));
    const MatchMatrix s = sinkhorn(a * c, 100, SlackMode::kNoSlack);
    worst_scale = std::max(worst_scale, (s.values - m.values).cwiseAbs().maxCoeff());
  }
  return verdict(worst_residual <= 1e-6 && worst_scale <= 1e-12,
                 fmt("max marginal deviation %.3g (<= 1e-6), scale change %.3g (<= 1e-12)", worst_residual, worst_scale));
}

// ---------------------------------------------------------------- 2

// Exhaustive minimum of sum_j |x_j - y_perm(j)|^2.
std::vector<int> optimal_assignment(const Points& x, const Points& y) {
  const int n = static_cast<int>(x.rows());
  std::vector<int> perm(static_cast<std::size_t>(n)), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_cost = INFINITY;
  do {
    double cost = 0.0;
    for (int j = 0; j < n; ++j) cost += (x.row(j) - y.row(perm[static_cast<std::size_t>(j)])).squaredNorm();
    if (cost < best_cost) {
      best_cost = cost;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

bool distinct_distances(const Points& x, const Points& y) {
  std::vector<double> d;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index k = 0; k < y.rows(); ++k) d.push_back((x.row(i) - y.row(k)).squaredNorm());
  std::sort(d.begin(), d.end());
  for (std::size_t i = 1; i < d.size(); ++i)
    if (d[i] - d[i - 1] < 1e-9) return false;
  return true;
}

Outcome hardening() {
  Rng rng(1002);
  int agree = 0;
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.below(7));
    Points x, y;
    do {
      x = random_points(rng, n);
      std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(perm.begin(), perm.end());
      y.resize(n, 3);
      for (Eigen::Index k = 0; k < n; ++k)
        for (int c = 0; c < 3; ++c) y(k, c) = x(perm[static_cast<std::size_t>(k)], c) + rng.normal(0.0, 0.05);
    } while (!distinct_distances(x, y));
    const Matrix m = sinkhorn_log(log_match_spatial(x, y, AnnealParams{0.0, 100.0}), 100, SlackMode::kNoSlack);
    const std::vector<int> oracle = optimal_assignment(x, y);
    bool same = true;
    for (Eigen::Index j = 0; j < n; ++j) {
      Eigen::Index k = 0;
      m.row(j).maxCoeff(&k);
      same = same && k == oracle[static_cast<std::size_t>(j)];
    }
    agree += same;
  }
  return verdict(agree == 100, fmt("row argmax equals exhaustive optimum in %d/100", agree));
}

// ---------------------------------------------------------------- 3

Outcome procrustes_exactness() {
  Rng rng(1003);
  double worst_rot = 0.0, worst_trans = 0.0;
  int improper = 0;
  for (int t = 0; t < 1000; ++t) {
    const RigidTransform T = random_transform(rng, 180.0, 2.0);
    const Eigen::Index n = 4 + static_cast<Eigen::Index>(rng.below(60));
    const Points x = random_points(rng, n);
    Eigen::VectorXd w(n);
    for (Eigen::Index i = 0; i < n; ++i) w(i) = rng.uniform(0.05, 1.0);
    const ProcrustesSolution s = solve_weighted_procrustes(x, apply_transform(x, T), w);
    const IsotropicErrors e = isotropic_errors(T, s.transform);
    worst_rot = std::max(worst_rot, e.rot_deg);
    worst_trans = std::max(worst_trans, (s.transform.translation - T.translation).cwiseAbs().maxCoeff());
    improper += s.transform.rotation.determinant() < 0.0;
  }
  // Near-planar clouds: the cross-covariance has a near-zero singular value,
  // so a reflection is one rounding error away.
  double planar_rot = 0.0;
  for (int t = 0; t < 100; ++t) {
    const RigidTransform T = random_transform(rng, 180.0, 2.0);
    const Eigen::Index n = 4 + static_cast<Eigen::Index>(rng.below(30));
    Points x = random_points(rng, n);
    for (Eigen::Index i = 0; i < n; ++i) x(i, 2) = 1e-9 * rng.normal();
    const Mat3 tilt = axis_angle(random_unit(rng), rng.uniform(0.0, 180.0));
    x = x * tilt.transpose();
    Eigen::VectorXd w = Eigen::VectorXd::Constant(n, 1.0);
    const ProcrustesSolution s = solve_weighted_procrustes(x, apply_transform(x, T), w);
    improper += std::abs(s.transform.rotation.determinant() - 1.0) > 1e-9;
    planar_rot = std::max(planar_rot, isotropic_errors(T, s.transform).rot_deg);
  }
  return verdict(worst_rot <= 1e-9 && worst_trans <= 1e-10 && improper == 0,
                 fmt("rotation %.3g deg (<= 1e-9), translation %.3g (<= 1e-10), det != +1 in %d/1100, "
                     "near-planar rotation %.3g deg",
                     worst_rot, worst_trans, improper, planar_rot));
}

// ---------------------------------------------------------------- 4

Outcome differentiability() {
  bool ok = true;
  std::string detail;
  for (const auto& r : run_gradcheck("all", 50)) {
    ok = ok && r.passed();
    if (!detail.empty()) detail += ", ";
    detail += fmt("%s %.2g", r.name.c_str(), r.max_rel_error);
  }
  return verdict(ok, "max rel error per suite (<= 1e-4): " + detail);
}

// ---------------------------------------------------------------- 5

Outcome ppf_invariance() {
  Rng rng(1005);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const RigidTransform T = random_transform(rng, 180.0, 3.0);
    for (int s = 0; s < 20; ++s) {
      const Vec3 a = random_points(rng, 1).row(0).transpose(), b = random_points(rng, 1).row(0).transpose();
      const Vec3 na = random_unit(rng), nb = random_unit(rng);
      const Eigen::Vector4d f = ppf(a, na, b, nb);
      const Eigen::Vector4d g = ppf(T.rotation * a + T.translation, T.rotation * na, T.rotation * b + T.translation,
                                    T.rotation * nb);
      worst = std::max(worst, (f - g).cwiseAbs().maxCoeff());
    }
  }
  ArchitectureConfig arch;
  arch.features.use_xc = false;
  arch.features.use_dx = false;
  const nn::ParamBundle params = init_params(arch, 5);
  Rng mr(1006);
  const PointCloud cloud = gen_primitive(PrimitiveKind::kTwoLobe, 256, mr);
  const NeighborhoodSet nb = radius_neighbors(cloud.points(), arch.features.radius, arch.features.max_neighbors, 0);
  const Matrix f = extract_hybrid_features(cloud, params, arch, &nb);
  double feat = 0.0;
  for (int t = 0; t < 100; ++t) {
    const PointCloud moved = apply_transform(cloud, random_transform(rng, 180.0, 3.0));
    feat = std::max(feat, (extract_hybrid_features(moved, params, arch, &nb) - f).cwiseAbs().maxCoeff());
  }
  return verdict(worst <= 1e-9 && feat <= 1e-6,
                 fmt("PPF component change %.3g (<= 1e-9), PPF-only feature change %.3g (<= 1e-6)", worst, feat));
}

// ---------------------------------------------------------------- 6

Outcome protocol_fidelity() {
  Rng rng(1007);
  bool crop_ok = true;
  for (int t = 0; t < 20; ++t) {
    const PointCloud c = gen_primitive(t % 2 ? PrimitiveKind::kBox : PrimitiveKind::kTwoLobe, 1024, rng);
    crop_ok = crop_ok && crop_halfspace(c, rng, 0.7).size() == 717;
  }
  const Points heavy = jitter_points(Points::Zero(20000, 3), rng, 1.0, 0.05);
  const double clip = heavy.cwiseAbs().maxCoeff();

  // Euler angles read directly off R = Rz Ry Rx; uniform [0, 45] has mean 22.5
  // and uniform [-0.5, 0.5] translation has mean 0.
  Vec3 angle_sum = Vec3::Zero(), trans_sum = Vec3::Zero();
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const RigidTransform T = sample_transform(rng);
    const Mat3& R = T.rotation;
    angle_sum += Vec3(std::atan2(R(1, 0), R(0, 0)), -std::asin(R(2, 0)), std::atan2(R(2, 1), R(2, 2))) * kDeg;
    trans_sum += T.translation;
  }
  const Vec3 angle_mean = angle_sum / n, trans_mean = trans_sum / n;
  // Standard errors: 45/sqrt(12 n) = 0.09 deg and 1/sqrt(12 n) = 0.002.
  const double angle_dev = (angle_mean.array() - 22.5).abs().maxCoeff();
  const double trans_dev = trans_mean.cwiseAbs().maxCoeff();
  return verdict(crop_ok && clip == 0.05 && angle_dev <= 0.5 && trans_dev <= 0.01,
                 fmt("crop 1024 -> 717 in all 20 draws: %s; max |jitter| %.17g (== 0.05); Euler mean deviation "
                     "%.3f deg (<= 0.5), translation mean %.4f (<= 0.01)",
                     crop_ok ? "yes" : "no", clip, angle_dev, trans_dev));
}

// ---------------------------------------------------------------- 7, 8

DatasetConfig clean_config(std::uint64_t seed) {
  DatasetConfig cfg;
  cfg.pair.mode = PairMode::kClean;
  cfg.pair.n_points = 128;
  cfg.n_model = 128;
  cfg.n_pairs = 50;
  cfg.kinds = {PrimitiveKind::kBox, PrimitiveKind::kTwoLobe};
  cfg.master_seed = seed;
  return cfg;
}

Outcome classical_rpm_regression() {
  const DatasetConfig cfg = clean_config(7007);
  double sum = 0.0;
  int success = 0;
  for (int i = 0; i < cfg.n_pairs; ++i) {
    const RegistrationPair p = synthesize_pair(cfg, static_cast<std::size_t>(i));
    const double e = isotropic_errors(p.gt, classical_rpm(p.source, p.reference).final_transform).rot_deg;
    sum += e;
    success += e < 1.0;
  }
  const double mean = sum / cfg.n_pairs;
  return verdict(mean <= 5.0 && success >= 45,
                 fmt("mean iso rotation %.4f deg (<= 5), success %d/50 (>= 45)", mean, success));
}

Outcome icp_small_basin() {
  const DatasetConfig cfg = clean_config(8008);
  Rng rng(1008);
  int ok = 0;
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    Rng mr(derive_seed(cfg.master_seed, static_cast<std::uint64_t>(i)));
    const PointCloud model = gen_primitive(i % 2 ? PrimitiveKind::kBox : PrimitiveKind::kTwoLobe, 128, mr);
    RigidTransform gt;
    gt.rotation = axis_angle(random_unit(rng), 5.0);
    gt.translation = Vec3::Zero();
    const PointCloud source = apply_transform(model, invert(gt));
    const double e = isotropic_errors(gt, icp(source, model).final_transform).rot_deg;
    worst = std::max(worst, e);
    ok += e <= 0.1;
  }
  return verdict(ok == 50, fmt("final rotation error <= 0.1 deg in %d/50 (worst %.3g deg)", ok, worst));
}

// ---------------------------------------------------------------- 9, 10, 11

std::vector<RegistrationPair> dataset_from(const fs::path& config_file) {
  const DatasetConfig cfg = dataset_config_from_json(read_json_file(config_file).at("dataset"));
  std::vector<RegistrationPair> pairs;
  for (int i = 0; i < cfg.n_pairs; ++i) pairs.push_back(synthesize_pair(cfg, static_cast<std::size_t>(i)));
  return pairs;
}

struct LearningRun {
  bool ready = false;
  std::string problem;
  double train_seconds = 0.0;
  bool retrained = false;
  std::vector<RegistrationPair> test;
  std::vector<PairEvaluation> evals;
  MethodSummary summary;
  double floor = 0.0;
};

MethodSummary evaluate_checkpoint(const std::vector<RegistrationPair>& pairs, std::shared_ptr<const Checkpoint> ckpt,
                                  std::vector<PairEvaluation>* evals = nullptr) {
  MethodConfig mc;
  mc.method = Method::kRpmNet;
  mc.checkpoint = std::move(ckpt);
  mc.rpmnet_iters = 5;
  std::vector<PairEvaluation> e = evaluate_pairs(pairs, mc);
  MethodSummary s = summarize("rpmnet", e);
  if (evals) *evals = std::move(e);
  return s;
}

double log_seconds(const fs::path& log) {
  std::ifstream in(log);
  double total = 0.0;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) total += nlohmann::json::parse(line).at("seconds").get<double>();
  return total;
}

LearningRun& learning_run() {
  static LearningRun run = [] {
    LearningRun r;
    const fs::path model = kSource / "models/default/checkpoint.json";
    try {
      r.test = dataset_from(kSource / "configs/c9_test.json");
      auto ckpt = std::make_shared<Checkpoint>(load_checkpoint(model));
      const char* retrain = std::getenv("RPM_ALIGN_ACCEPT_RETRAIN");
      if (retrain && std::string(retrain) == "1") {
        const TrainConfig cfg = train_config_from_json(ckpt->training.at("config"));
        const auto start = std::chrono::steady_clock::now();
        const std::vector<RegistrationPair> data = dataset_from(kSource / "configs/c9_train.json");
        *ckpt = train(data, {}, cfg);
        r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        r.retrained = true;
      } else {
        r.train_seconds = log_seconds(kSource / "models/default/train.log.jsonl");
      }
      r.summary = evaluate_checkpoint(r.test, ckpt, &r.evals);
      for (const auto& p : r.test) r.floor += ground_truth_chamfer(p);
      r.floor /= static_cast<double>(r.test.size());
      r.ready = true;
    } catch (const std::exception& e) {
      r.problem = e.what();
    }
    return r;
  }();
  return run;
}

Outcome desk_scale_learning() {
  const LearningRun& r = learning_run();
  if (!r.ready) return {Status::kFail, "committed model unavailable: " + r.problem};
  const double rot_bound = 0.25 * r.summary.mean_initial_angle_deg;
  const double chamfer_bound = 3.0 * r.floor;
  const bool rot_ok = r.summary.mean.iso_rot_deg <= rot_bound;
  const bool chamfer_ok = r.summary.mean.chamfer_mod <= chamfer_bound;
  const bool time_ok = r.train_seconds <= 1800.0;
  return verdict(rot_ok && chamfer_ok && time_ok,
                 fmt("iso rotation %.3f deg (<= %.3f) %s; Chamfer %.3g (<= 3 x floor %.3g = %.3g) %s; "
                     "training %.0f s %s (<= 1800) %s; %zu failures",
                     r.summary.mean.iso_rot_deg, rot_bound, rot_ok ? "ok" : "MISSED", r.summary.mean.chamfer_mod,
                     r.floor, chamfer_bound, chamfer_ok ? "ok" : "MISSED", r.train_seconds,
                     r.retrained ? "measured" : "logged", time_ok ? "ok" : "MISSED", r.summary.failures));
}

Outcome iteration_behavior() {
  const LearningRun& r = learning_run();
  if (!r.ready) return {Status::kFail, "committed model unavailable: " + r.problem};
  const auto& c = r.summary.mean_chamfer_per_iteration;
  if (c.size() < 5) return {Status::kFail, "fewer than 5 iterations recorded"};
  return verdict(c[4] <= c[1] && c[1] <= c[0],
                 fmt("mean Chamfer by iteration %.4g, %.4g, %.4g, %.4g, %.4g", c[0], c[1], c[2], c[3], c[4]));
}

Outcome ablation_direction() {
  const LearningRun& r = learning_run();
  if (!r.ready) return {Status::kFail, "committed model unavailable: " + r.problem};
  struct Ablation {
    std::string name;
    double rot = 0.0;
  };
  std::vector<Ablation> ab{{"no_xc"}, {"no_dx"}, {"no_ppf"}};
  try {
    for (auto& a : ab) {
      auto ckpt = std::make_shared<Checkpoint>(load_checkpoint(kSource / "models" / a.name / "checkpoint.json"));
      a.rot = evaluate_checkpoint(r.test, ckpt).mean.iso_rot_deg;
    }
  } catch (const std::exception& e) {
    return {Status::kFail, std::string("ablation model unavailable: ") + e.what()};
  }
  const double base = r.summary.mean.iso_rot_deg;
  std::string detail = fmt("full %.3f deg", base);
  for (const auto& a : ab) detail += fmt(", %s %.3f deg (x%.2f)", a.name.c_str(), a.rot, a.rot / base);
  const bool xc_largest = ab[0].rot >= ab[1].rot && ab[0].rot >= ab[2].rot;
  if (xc_largest) return {Status::kPass, detail + "; no_xc degrades most"};
  // The criterion allows a logged waiver when the ordering does not carry over to primitives.
  std::vector<Ablation> order = ab;
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.rot > b.rot; });
  return {Status::kWaived,
          detail + "; ordering " + order[0].name + " > " + order[1].name + " > " + order[2].name +
              " (x_c not the largest; waived, see README)"};
}

// ---------------------------------------------------------------- 12

Outcome chamfer_oracle() {
  Rng rng(1012);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    auto size = [&] { return 1 + static_cast<Eigen::Index>(rng.below(256)); };
    const Eigen::Index nx = size(), ny = size();
    const Points xp = random_points(rng, nx), y = random_points(rng, ny);
    const Points xc = random_points(rng, size()), yc = random_points(rng, size());
    worst = std::max(worst, std::abs(modified_chamfer(xp, y, xc, yc) - brute_chamfer(xp, y, xc, yc)));
  }
  return verdict(worst <= 1e-12, fmt("max |fast - brute force| %.3g (<= 1e-12)", worst));
}

// Supplementary: per-pair monotonicity on the trained checkpoint.
Outcome per_pair_monotonicity() {
  const LearningRun& r = learning_run();
  if (!r.ready) return {Status::kFail, "committed model unavailable: " + r.problem};
  int monotone = 0, endpoint = 0, counted = 0;
  for (const auto& e : r.evals) {
    if (counted == 50) break;
    ++counted;
    const auto& c = e.chamfer_per_iteration;
    bool ok = c.size() >= 5;
    for (std::size_t i = 1; ok && i < 5; ++i) ok = c[i] <= c[i - 1];
    monotone += ok;
    endpoint += c.size() >= 5 && c[4] <= c[0];
  }
  return verdict(counted == 50 && monotone >= 40,
                 fmt("Chamfer non-increasing at every step over iterations 1..5 in %d/%d pairs (>= 40); "
                     "iteration 5 <= iteration 1 in %d/%d",
                     monotone, counted, endpoint, counted));
}

}  // namespace

int main() {
  tune_allocator();
  const std::vector<Criterion> criteria{
      {1, "Sinkhorn convergence", 5.0, sinkhorn_convergence},
      {2, "hardening matches the optimal assignment", 0.0, hardening},
      {3, "weighted Procrustes exactness", 0.0, procrustes_exactness},
      {4, "differentiability (gradcheck, 50 seeds)", 120.0, differentiability},
      {5, "PPF rigid invariance", 0.0, ppf_invariance},
      {6, "protocol fidelity", 0.0, protocol_fidelity},
      {7, "classical RPM regression", 60.0, classical_rpm_regression},
      {8, "ICP small-basin regression", 0.0, icp_small_basin},
      {9, "desk-scale learning check", 0.0, desk_scale_learning},
      {10, "iteration behavior", 0.0, iteration_behavior},
      {11, "ablation direction", 0.0, ablation_direction},
      {12, "modified Chamfer oracle equivalence", 0.0, chamfer_oracle},
      {0, "supplementary: trained per-pair Chamfer monotonicity", 0.0, per_pair_monotonicity},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Status::kFail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::string timing = fmt("%.1f s", secs);
    if (c.max_seconds > 0.0) {
      timing += fmt(" (< %.0f s)", c.max_seconds);
      if (secs >= c.max_seconds && o.status == Status::kPass) {
        o.status = Status::kFail;
        o.detail += "; runtime bound exceeded";
      }
    }
    const char* tag = o.status == Status::kPass ? "PASS" : o.status == Status::kWaived ? "WAIVED" : "FAIL";
    if (o.status == Status::kFail) ++failures;
    const std::string label = c.id > 0 ? fmt("criterion %2d", c.id) : std::string("           ");
    std::printf("[%-6s] %s  %s: %s [%s]\n", tag, label.c_str(), c.name.c_str(), o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  std::printf("%d failing\n", failures);
  return failures == 0 ? 0 : 1;
}
