#include "rpm_align/pipeline.hpp"

#include "rpm_align/errors.hpp"
#include "rpm_align/io.hpp"
#include "rpm_align/nn/ops.hpp"

#include <cmath>

namespace rpm_align {

using nn::Tape;
using nn::Tensor;
using nn::Var;

PairNeighborhoods pair_neighborhoods(const PointCloud& x, const PointCloud& y, const FeatureConfig& cfg,
                                     std::uint64_t seed) {
  return {radius_neighbors(x.points(), cfg.radius, cfg.max_neighbors, derive_seed(seed, 0)),
          radius_neighbors(y.points(), cfg.radius, cfg.max_neighbors, derive_seed(seed, 1))};
}

IterationGraph rpmnet_iteration(Tape& tape, const nn::BoundParams& params, const PointCloud& x, const PointCloud& y,
                                const RigidTransform& prev, const PairNeighborhoods& nbrs,
                                const ArchitectureConfig& arch, const RpmNetOptions& opt, Var* reference_features) {
  const PointCloud xt = apply_transform(x, prev);
  const Var fx = hybrid_features(tape, params, xt, nbrs.source, arch.features);
  Var fy;
  if (reference_features && reference_features->tape == &tape) {
    fy = *reference_features;
  } else {
    fy = hybrid_features(tape, params, y, nbrs.reference, arch.features);
    if (reference_features) *reference_features = fy;
  }
  const Var ab = anneal_params(tape, params, xt.points(), y.points(), arch.param_net);
  const Var logits = ops::anneal_affinity(nn::pairwise_sq_dist(fx, fy), ab);
  const Var match = nn::exp(ops::sinkhorn_log(logits, opt.sinkhorn_iters, opt.slack));
  const Var corr = ops::correspondences(match, y.points(), opt.slack == SlackMode::kWithSlack);
  const Var targets = nn::slice_cols(corr, 0, 3);
  const Var weights = nn::slice_cols(corr, 3, 4);
  const Var xs = tape.constant(Tensor::from_matrix(x.points()));
  return {ops::weighted_procrustes(xs, targets, weights), match, ab};
}

namespace {

Matrix real_block(const Tensor& match, SlackMode slack) {
  const auto m = match.matrix();
  const Eigen::Index off = slack == SlackMode::kWithSlack ? 1 : 0;
  return m.topLeftCorner(m.rows() - off, m.cols() - off);
}

}  // namespace

RegistrationResult rpmnet_register(const PointCloud& x, const PointCloud& y, const nn::ParamBundle& params,
                                   const ArchitectureConfig& arch, int n_iters, const RpmNetOptions& opt,
                                   std::vector<Matrix>* matches) {
  if (n_iters < 1) throw InvalidArgument("rpmnet_register requires n_iters >= 1");
  check_params(params, arch);
  const PairNeighborhoods nbrs = pair_neighborhoods(x, y, arch.features, opt.neighbor_seed);
  RegistrationResult res;
  RigidTransform T = RigidTransform::identity();
  double last_update = 0.0;
  if (matches) matches->clear();
  Tape tape;
  tape.set_grad_enabled(false);
  const nn::BoundParams bound = nn::bind(tape, params);
  Var fy;
  for (int i = 1; i <= n_iters; ++i) {
    IterationGraph g;
    try {
      g = rpmnet_iteration(tape, bound, x, y, T, nbrs, arch, opt, &fy);
    } catch (const SolverError& e) {
      throw e.at_iteration(i);
    }
    const RigidTransform next = transform_from_tensor(g.transform.value());
    last_update = rotation_angle_deg(next.rotation * T.rotation.transpose());
    T = next;
    const Matrix block = real_block(g.match.value(), opt.slack);
    res.per_iteration.push_back({T, {g.anneal.value()[0], g.anneal.value()[1]}, block.sum()});
    if (matches) matches->push_back(block);
  }
  res.final_transform = T;
  res.iterations_run = n_iters;
  res.converged = last_update < kConvergedRotationDeg;
  return res;
}

std::vector<double> iteration_weights(int n_iters) {
  std::vector<double> w;
  for (int i = 1; i <= n_iters; ++i) w.push_back(std::ldexp(1.0, -(n_iters - i)));
  return w;
}

double registration_loss(const Points& x, const RigidTransform& gt, const RigidTransform& pred) {
  const Points a = apply_transform(x, gt);
  const Points b = apply_transform(x, pred);
  return (a - b).cwiseAbs().rowwise().sum().mean();
}

double inlier_loss(const Matrix& m) {
  const double s = m.sum();
  return -s / static_cast<double>(m.rows()) - s / static_cast<double>(m.cols());
}

LossReport compute_losses(const RegistrationResult& result, const std::vector<Matrix>& matches, const Points& x,
                          const RigidTransform& gt, double lambda) {
  if (matches.size() != result.per_iteration.size())
    throw InvalidArgument("compute_losses: one match matrix per iteration required");
  LossReport r;
  const int n = static_cast<int>(matches.size());
  r.per_iteration_weights = iteration_weights(n);
  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    r.l_reg.push_back(registration_loss(x, gt, result.per_iteration[k].transform));
    r.l_inlier.push_back(inlier_loss(matches[k]));
    r.l_total.push_back(r.l_reg.back() + lambda * r.l_inlier.back());
    r.weighted_total += r.per_iteration_weights[k] * r.l_total.back();
  }
  return r;
}

namespace ops {

Var transform_points(Var transform, const Points& x) {
  const RigidTransform T = transform_from_tensor(transform.value());
  return transform.tape->record(Tensor::from_matrix(apply_transform(x, T)), {transform},
                                [x](Tape& t, std::size_t self) {
                                  Tensor* gp = t.grad_slot(t.parent(self, 0));
                                  if (!gp) return;
                                  const auto g = t.grad(self).matrix();
                                  auto gm = gp->matrix();  // [4, 3]
                                  gm.topRows(3).noalias() += g.transpose() * x;
                                  gm.row(3) += g.colwise().sum();
                                });
}

Var registration_loss(Var transform, const Points& x, const RigidTransform& gt) {
  const Points target = apply_transform(x, gt);
  const Var pred = transform_points(transform, x);
  const double J = static_cast<double>(x.rows());
  const double value = (pred.value().matrix() - target).cwiseAbs().sum() / J;
  return transform.tape->record(Tensor::scalar(value), {pred}, [target, J](Tape& t, std::size_t self) {
    Tensor* gp = t.grad_slot(t.parent(self, 0));
    if (!gp) return;
    const double g = t.grad(self)[0];
    const auto p = t.value(t.parent(self, 0)).matrix();
    gp->matrix() += (g / J) * (p - target).array().sign().matrix();
  });
}

Var inlier_loss(Var match, bool has_slack) {
  const auto m = match.value().matrix();
  const Eigen::Index off = has_slack ? 1 : 0;
  const Eigen::Index J = m.rows() - off, K = m.cols() - off;
  const double coef = -(1.0 / static_cast<double>(J) + 1.0 / static_cast<double>(K));
  const double value = coef * m.topLeftCorner(J, K).sum();
  return match.tape->record(Tensor::scalar(value), {match}, [coef, J, K](Tape& t, std::size_t self) {
    if (Tensor* gp = t.grad_slot(t.parent(self, 0)))
      gp->matrix().topLeftCorner(J, K).array() += coef * t.grad(self)[0];
  });
}

}  // namespace ops

Var rpmnet_pair_loss(Tape& tape, const nn::BoundParams& params, const RegistrationPair& pair,
                     const PairNeighborhoods& nbrs, const ArchitectureConfig& arch, int n_iters, double lambda,
                     const RpmNetOptions& opt, LossReport* report, std::vector<AnnealParams>* anneal,
                     const std::vector<RigidTransform>* starts) {
  if (n_iters < 1) throw InvalidArgument("rpmnet_pair_loss requires n_iters >= 1");
  if (starts && starts->size() != static_cast<std::size_t>(n_iters))
    throw InvalidArgument("rpmnet_pair_loss: one start transform per iteration required");
  const std::vector<double> w = iteration_weights(n_iters);
  const Points& x = pair.source.points();
  RigidTransform T = RigidTransform::identity();
  Var total = tape.constant(Tensor::scalar(0.0));
  if (report) *report = LossReport{};
  if (report) report->per_iteration_weights = w;
  if (anneal) anneal->clear();
  Var fy;
  for (int i = 1; i <= n_iters; ++i) {
    if (starts) T = (*starts)[static_cast<std::size_t>(i - 1)];
    if (report) report->start_transforms.push_back(T);
    IterationGraph g;
    try {
      g = rpmnet_iteration(tape, params, pair.source, pair.reference, T, nbrs, arch, opt, &fy);
    } catch (const SolverError& e) {
      throw e.at_iteration(i);
    }
    if (anneal) anneal->push_back({g.anneal.value()[0], g.anneal.value()[1]});
    const Var l_reg = ops::registration_loss(g.transform, x, pair.gt);
    const Var l_in = ops::inlier_loss(g.match, opt.slack == SlackMode::kWithSlack);
    const Var l_it = nn::add(l_reg, nn::scale(l_in, lambda));
    total = nn::add(total, nn::scale(l_it, w[static_cast<std::size_t>(i - 1)]));
    if (report) {
      report->l_reg.push_back(l_reg.value().item());
      report->l_inlier.push_back(l_in.value().item());
      report->l_total.push_back(l_it.value().item());
    }
    // Gradient stop: the next iteration starts from a constant transform.
    T = transform_from_tensor(g.transform.value());
  }
  if (report) report->weighted_total = total.value().item();
  return total;
}

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
  nlohmann::json j = {{"format_version", Checkpoint::kFormatVersion},
                      {"architecture_config", architecture_to_json(ckpt.arch)},
                      {"parameters", nn::params_to_json(ckpt.params.tensors)}};
  if (ckpt.adam) j["adam_state"] = nn::adam_to_json(*ckpt.adam);
  if (!ckpt.training.empty()) j["training"] = ckpt.training;
  return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw FormatError("checkpoint must be a JSON object");
    if (j.at("format_version").get<int>() != Checkpoint::kFormatVersion)
      throw FormatError("unsupported checkpoint format_version");
    Checkpoint c;
    c.arch = architecture_from_json(j.at("architecture_config"));
    c.params.tensors = nn::params_from_json(j.at("parameters"));
    check_params(c.params, c.arch);
    if (j.contains("adam_state")) {
      c.adam = nn::adam_from_json(j.at("adam_state"));
      for (const auto& [name, t] : c.params.tensors) {
        if (!c.adam->first_moment.count(name) || !c.adam->first_moment.at(name).same_shape(t) ||
            !c.adam->second_moment.count(name) || !c.adam->second_moment.at(name).same_shape(t))
          throw FormatError("adam_state does not match parameter '" + name + "'");
      }
    }
    if (j.contains("training")) c.training = j.at("training");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_text_file(checkpoint_to_json(ckpt).dump() + "\n", path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(read_json_file(path)); }

}  // namespace rpm_align
