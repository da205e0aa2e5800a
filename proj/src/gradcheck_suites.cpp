#include "rpm_align/gradcheck_suites.hpp"

#include "rpm_align/data.hpp"
#include "rpm_align/errors.hpp"
#include "rpm_align/match.hpp"
#include "rpm_align/nn/gradcheck.hpp"
#include "rpm_align/nn/ops.hpp"
#include "rpm_align/pipeline.hpp"
#include "rpm_align/random.hpp"

#include <functional>

namespace rpm_align {

namespace {

using nn::BoundParams;
using nn::ParamBundle;
using nn::Tape;
using nn::Tensor;
using nn::Var;

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Values with magnitude in [0.1, 1] and random sign: well clear of relu kinks.
Tensor off_kink_tensor(std::vector<std::size_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return t;
}

/// sum(coef * x): a generic scalar probe of every output entry.
Var probe(Var x, const Tensor& coef) {
  if (coef.size() != x.value().size()) throw InvalidArgument("probe: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < coef.size(); ++i) s += coef[i] * x.value()[i];
  return x.tape->record(Tensor::scalar(s), {x}, [coef](Tape& t, std::size_t self) {
    Tensor* gp = t.grad_slot(t.parent(self, 0));
    if (!gp) return;
    const double g = t.grad(self)[0];
    for (std::size_t i = 0; i < coef.size(); ++i) (*gp)[i] += g * coef[i];
  });
}

using CaseBuilder = std::function<std::pair<nn::ScalarGraph, ParamBundle>(Rng&)>;

GradSuiteResult run_case(const std::string& name, const CaseBuilder& build, int seeds, std::uint64_t stream,
                         std::size_t max_entries = 0) {
  GradSuiteResult r;
  r.name = name;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(derive_seed(stream, static_cast<std::uint64_t>(s)));
    auto [graph, point] = build(rng);
    nn::GradCheckOptions opt;
    opt.max_entries = max_entries;
    opt.seed = derive_seed(stream ^ 0x5eedULL, static_cast<std::uint64_t>(s));
    const nn::GradCheckReport rep = nn::grad_check(graph, point, opt);
    ++r.cases;
    r.entries += rep.checked;
    r.refined += rep.refined;
    if (r.cases == 1 || rep.max_rel_error > r.max_rel_error) {
      r.max_rel_error = rep.max_rel_error;
      r.worst = std::to_string(s) + ":" + rep.worst.name + "[" + std::to_string(rep.worst.index) + "]";
    }
  }
  return r;
}

std::uint64_t stream_of(const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  return h;
}

void add(std::vector<GradSuiteResult>& out, const std::string& name, const CaseBuilder& build, int seeds,
         std::size_t max_entries = 0) {
  out.push_back(run_case(name, build, seeds, stream_of(name), max_entries));
}

}  // namespace

std::vector<GradSuiteResult> gradcheck_layers(int seeds) {
  std::vector<GradSuiteResult> out;

  add(out, "dense", [](Rng& rng) {
    ParamBundle p;
    p.tensors.emplace("in", random_tensor({4, 3}, rng, -1, 1));
    p.tensors.emplace("weight", random_tensor({3, 2}, rng, -1, 1));
    p.tensors.emplace("bias", random_tensor({2}, rng, -1, 1));
    const Tensor c = random_tensor({4, 2}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c](Tape&, const BoundParams& b) {
                       return probe(nn::dense(b.at("in"), b.at("weight"), b.at("bias")), c);
                     }),
                     p};
  }, seeds);

  add(out, "relu", [](Rng& rng) {
    ParamBundle p;
    p.tensors.emplace("in", off_kink_tensor({4, 5}, rng));
    const Tensor c = random_tensor({4, 5}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c](Tape&, const BoundParams& b) { return probe(nn::relu(b.at("in")), c); }), p};
  }, seeds);

  add(out, "softplus", [](Rng& rng) {
    ParamBundle p;
    p.tensors.emplace("in", random_tensor({4, 5}, rng, -6, 6));
    const Tensor c = random_tensor({4, 5}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c](Tape&, const BoundParams& b) { return probe(nn::softplus(b.at("in")), c); }),
                     p};
  }, seeds);

  add(out, "exp", [](Rng& rng) {
    ParamBundle p;
    p.tensors.emplace("in", random_tensor({3, 4}, rng, -2, 2));
    const Tensor c = random_tensor({3, 4}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c](Tape&, const BoundParams& b) { return probe(nn::exp(b.at("in")), c); }), p};
  }, seeds);

  add(out, "group_norm", [](Rng& rng) {
    ParamBundle p;
    p.tensors.emplace("in", random_tensor({4, 8}, rng, -2, 2));
    p.tensors.emplace("gain", random_tensor({8}, rng, 0.5, 1.5));
    p.tensors.emplace("shift", random_tensor({8}, rng, -0.5, 0.5));
    const Tensor c = random_tensor({4, 8}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c](Tape&, const BoundParams& b) {
                       return probe(nn::group_norm(b.at("in"), b.at("gain"), b.at("shift"), 4), c);
                     }),
                     p};
  }, seeds);

  add(out, "max_pool", [](Rng& rng) {
    // Distinct values on a 0.05 grid plus jitter: no ties within 1e-6.
    ParamBundle p;
    Tensor in({6, 4});
    std::vector<int> slots(24);
    for (int i = 0; i < 24; ++i) slots[static_cast<std::size_t>(i)] = i;
    rng.shuffle(slots.begin(), slots.end());
    for (std::size_t i = 0; i < 24; ++i) in[i] = 0.05 * slots[i] + rng.uniform(0.0, 0.01);
    p.tensors.emplace("in", std::move(in));
    const Tensor c = random_tensor({4}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c](Tape&, const BoundParams& b) { return probe(nn::max_pool(b.at("in")), c); }),
                     p};
  }, seeds);

  add(out, "segment_max_pool", [](Rng& rng) {
    ParamBundle p;
    Tensor in({7, 3});
    std::vector<int> slots(21);
    for (int i = 0; i < 21; ++i) slots[static_cast<std::size_t>(i)] = i;
    rng.shuffle(slots.begin(), slots.end());
    for (std::size_t i = 0; i < 21; ++i) in[i] = 0.05 * slots[i] + rng.uniform(0.0, 0.01);
    p.tensors.emplace("in", std::move(in));
    const Tensor c = random_tensor({3, 3}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c](Tape&, const BoundParams& b) {
                       return probe(nn::segment_max_pool(b.at("in"), {0, 2, 5, 7}), c);
                     }),
                     p};
  }, seeds);

  add(out, "l2_normalize", [](Rng& rng) {
    ParamBundle p;
    p.tensors.emplace("in", off_kink_tensor({4, 5}, rng));
    const Tensor c = random_tensor({4, 5}, rng, -1, 1);
    return std::pair{
        nn::ScalarGraph([c](Tape&, const BoundParams& b) { return probe(nn::l2_normalize(b.at("in")), c); }), p};
  }, seeds);

  add(out, "pairwise_sq_dist", [](Rng& rng) {
    ParamBundle p;
    p.tensors.emplace("a", random_tensor({4, 3}, rng, -1, 1));
    p.tensors.emplace("b", random_tensor({5, 3}, rng, -1, 1));
    const Tensor c = random_tensor({4, 5}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c](Tape&, const BoundParams& b) {
                       return probe(nn::pairwise_sq_dist(b.at("a"), b.at("b")), c);
                     }),
                     p};
  }, seeds);

  add(out, "dense_relu_sum", [](Rng& rng) {
    ParamBundle p;
    p.tensors.emplace("in", random_tensor({5, 4}, rng, -1, 1));
    p.tensors.emplace("weight", random_tensor({4, 6}, rng, -1, 1));
    p.tensors.emplace("bias", random_tensor({6}, rng, -1, 1));
    return std::pair{nn::ScalarGraph([](Tape&, const BoundParams& b) {
                       return nn::sum(nn::relu(nn::dense(b.at("in"), b.at("weight"), b.at("bias"))));
                     }),
                     p};
  }, seeds);

  add(out, "anneal_affinity", [](Rng& rng) {
    ParamBundle p;
    p.tensors.emplace("dist", random_tensor({4, 5}, rng, 0, 4));
    p.tensors.emplace("anneal", random_tensor({2}, rng, 0.2, 3));
    const Tensor c = random_tensor({4, 5}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c](Tape&, const BoundParams& b) {
                       return probe(ops::anneal_affinity(b.at("dist"), b.at("anneal")), c);
                     }),
                     p};
  }, seeds);

  add(out, "sinkhorn_log", [](Rng& rng) {
    ParamBundle p;
    p.tensors.emplace("logits", random_tensor({4, 5}, rng, -3, 3));
    const Tensor c = random_tensor({5, 6}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c](Tape&, const BoundParams& b) {
                       return probe(nn::exp(ops::sinkhorn_log(b.at("logits"), 5, SlackMode::kWithSlack)), c);
                     }),
                     p};
  }, seeds);

  add(out, "correspondences", [](Rng& rng) {
    ParamBundle p;
    p.tensors.emplace("match", random_tensor({5, 6}, rng, 0.05, 1));
    Points y(5, 3);
    for (Eigen::Index i = 0; i < 5; ++i) {
      for (int k = 0; k < 3; ++k) y(i, k) = rng.uniform(-1, 1);
    }
    const Tensor c = random_tensor({4, 4}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c, y](Tape&, const BoundParams& b) {
                       return probe(ops::correspondences(b.at("match"), y, true), c);
                     }),
                     p};
  }, seeds);

  return out;
}

std::vector<GradSuiteResult> gradcheck_procrustes(int seeds) {
  std::vector<GradSuiteResult> out;
  add(out, "weighted_procrustes", [](Rng& rng) {
    ParamBundle p;
    Tensor x = random_tensor({6, 3}, rng, -1, 1);
    const RigidTransform T = sample_transform(rng, 90.0, 0.5);
    Tensor y({6, 3});
    y.matrix() = apply_transform(Points(x.matrix()), T);
    for (double& v : y.values()) v += rng.normal(0.0, 0.05);
    p.tensors.emplace("x", std::move(x));
    p.tensors.emplace("targets", std::move(y));
    p.tensors.emplace("weights", random_tensor({6}, rng, 0.2, 1.0));
    const Tensor c = random_tensor({4, 3}, rng, -1, 1);
    return std::pair{nn::ScalarGraph([c](Tape&, const BoundParams& b) {
                       return probe(ops::weighted_procrustes(b.at("x"), b.at("targets"), b.at("weights")), c);
                     }),
                     p};
  }, seeds);
  return out;
}

std::vector<GradSuiteResult> gradcheck_full(int seeds, int n_points, std::size_t max_entries) {
  std::vector<GradSuiteResult> out;
  add(out, "pipeline_loss", [n_points](Rng& rng) {
    const std::uint64_t s = rng.next_u64();
    DatasetConfig dc;
    dc.n_model = 64;
    dc.kinds = {PrimitiveKind::kTwoLobe, PrimitiveKind::kBox};
    dc.master_seed = s;
    dc.pair.mode = PairMode::kNoisy;
    dc.pair.n_points = n_points;
    dc.pair.normal_k = std::min(n_points, 8);
    const RegistrationPair pair = synthesize_pair(dc, 0);
    ArchitectureConfig arch;
    const ParamBundle params = init_params(arch, derive_seed(s, 1));
    const PairNeighborhoods nbrs = pair_neighborhoods(pair.source, pair.reference, arch.features, 0);
    // Finite differences must see the same detached start transforms as the tape.
    LossReport report;
    {
      Tape probe;
      probe.set_grad_enabled(false);
      rpmnet_pair_loss(probe, nn::bind(probe, params), pair, nbrs, arch, 2, kDefaultInlierLambda, RpmNetOptions{},
                       &report);
    }
    return std::pair{nn::ScalarGraph([pair, arch, nbrs, starts = report.start_transforms](Tape& tape,
                                                                                          const BoundParams& b) {
                       return rpmnet_pair_loss(tape, b, pair, nbrs, arch, 2, kDefaultInlierLambda, RpmNetOptions{},
                                               nullptr, nullptr, &starts);
                     }),
                     params};
  }, seeds, max_entries);
  return out;
}

std::vector<GradSuiteResult> run_gradcheck(const std::string& scope, int seeds) {
  if (scope == "layers") return gradcheck_layers(seeds);
  if (scope == "procrustes") return gradcheck_procrustes(seeds);
  if (scope == "full") return gradcheck_full(seeds);
  if (scope == "all") {
    auto r = gradcheck_layers(seeds);
    for (auto& v : gradcheck_procrustes(seeds)) r.push_back(std::move(v));
    for (auto& v : gradcheck_full(seeds)) r.push_back(std::move(v));
    return r;
  }
  throw ConfigError("unknown gradcheck scope '" + scope + "' (expected layers, procrustes, full or all)");
}

}  // namespace rpm_align
