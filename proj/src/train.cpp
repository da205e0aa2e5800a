#include "rpm_align/train.hpp"

#include "rpm_align/errors.hpp"
#include "rpm_align/random.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

namespace rpm_align {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;

bool finite_bundle(const nn::ParamBundle& b) {
  for (const auto& [name, t] : b.tensors) {
    if (!t.all_finite()) return false;
  }
  return true;
}

}  // namespace

void TrainConfig::validate() const {
  arch.validate();
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
  if (n_iter_train < 1 || n_iter_eval < 1) throw ConfigError("iteration counts must be >= 1");
  if (sinkhorn_iters < 1) throw ConfigError("sinkhorn_iters must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (val_fallback < 1) throw ConfigError("val_fallback must be >= 1");
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return {{"architecture", architecture_to_json(cfg.arch)},
          {"lr", cfg.lr},
          {"lambda", cfg.lambda},
          {"n_iter_train", cfg.n_iter_train},
          {"n_iter_eval", cfg.n_iter_eval},
          {"sinkhorn_iters", cfg.sinkhorn_iters},
          {"epochs", cfg.epochs},
          {"seed", cfg.seed},
          {"val_fallback", cfg.val_fallback}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("training config must be an object");
  TrainConfig cfg;
  std::set<std::string> seen;
  auto get = [&](const char* key, auto& out) {
    seen.insert(key);
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  };
  seen.insert("architecture");
  if (j.contains("architecture")) cfg.arch = architecture_from_json(j.at("architecture"));
  get("lr", cfg.lr);
  get("lambda", cfg.lambda);
  get("n_iter_train", cfg.n_iter_train);
  get("n_iter_eval", cfg.n_iter_eval);
  get("sinkhorn_iters", cfg.sinkhorn_iters);
  get("epochs", cfg.epochs);
  get("seed", cfg.seed);
  get("val_fallback", cfg.val_fallback);
  for (const auto& [k, v] : j.items()) {
    if (!seen.count(k)) throw ConfigError("unknown training key '" + k + "'");
  }
  cfg.validate();
  return cfg;
}

nlohmann::json epoch_log_to_json(const EpochLog& log) {
  return {{"epoch", log.epoch},
          {"mean_l_reg", log.mean_l_reg},
          {"mean_l_inlier", log.mean_l_inlier},
          {"val_iso_rot_deg", log.val_iso_rot_deg},
          {"val_chamfer", log.val_chamfer},
          {"seconds", log.seconds}};
}

ValidationScore validate_checkpoint(const std::vector<RegistrationPair>& pairs, const nn::ParamBundle& params,
                                    const ArchitectureConfig& arch, int n_iters, int sinkhorn_iters) {
  ValidationScore s;
  if (pairs.empty()) return s;
  RpmNetOptions opt;
  opt.sinkhorn_iters = sinkhorn_iters;
  for (const RegistrationPair& p : pairs) {
    RigidTransform pred = RigidTransform::identity();
    try {
      pred = rpmnet_register(p.source, p.reference, params, arch, n_iters, opt).final_transform;
    } catch (const SolverError&) {
      // Scored as no motion.
    }
    const MetricsReport m =
        compute_metrics(p.gt, pred, p.source.points(), p.reference.points(), p.source_clean.points(),
                        p.reference_clean.points());
    s.mean_iso_rot_deg += m.iso_rot_deg;
    s.mean_chamfer += m.chamfer_mod;
  }
  s.mean_iso_rot_deg /= static_cast<double>(pairs.size());
  s.mean_chamfer /= static_cast<double>(pairs.size());
  return s;
}

nn::ParamBundle initial_params(const TrainConfig& cfg) {
  return init_params(cfg.arch, derive_seed(cfg.seed, kInitStream));
}

Checkpoint train(const std::vector<RegistrationPair>& data, const std::vector<RegistrationPair>& val_in,
                 const TrainConfig& cfg, const std::optional<Checkpoint>& resume, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.empty()) throw InvalidArgument("training set is empty");

  Checkpoint ckpt;
  ckpt.arch = cfg.arch;
  int epochs_done = 0;
  if (resume) {
    if (architecture_to_json(resume->arch) != architecture_to_json(cfg.arch))
      throw ConfigError("resume checkpoint architecture differs from the training configuration");
    ckpt.params = resume->params;
    ckpt.adam = resume->adam;
    if (resume->training.contains("epochs_done")) epochs_done = resume->training.at("epochs_done").get<int>();
  } else {
    ckpt.params = initial_params(cfg);
  }
  if (!ckpt.adam) ckpt.adam = nn::AdamState::zeros_like(ckpt.params);

  std::vector<RegistrationPair> val = val_in;
  if (val.empty()) {
    const std::size_t n = std::min<std::size_t>(data.size(), static_cast<std::size_t>(cfg.val_fallback));
    val.assign(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n));
  }

  RpmNetOptions opt;
  opt.sinkhorn_iters = cfg.sinkhorn_iters;
  std::vector<PairNeighborhoods> nbrs;
  nbrs.reserve(data.size());
  for (const auto& p : data) nbrs.push_back(pair_neighborhoods(p.source, p.reference, cfg.arch.features, opt.neighbor_seed));

  nn::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;

  auto record_progress = [&](int done) {
    ckpt.training = {{"config", train_config_to_json(cfg)}, {"epochs_done", done}};
  };
  record_progress(epochs_done);

  for (int epoch = epochs_done; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(derive_seed(cfg.seed, kShuffleStream), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());

    const auto t0 = std::chrono::steady_clock::now();
    double sum_reg = 0.0, sum_inl = 0.0;
    for (std::size_t step = 0; step < order.size(); ++step) {
      const RegistrationPair& pair = data[order[step]];
      nn::Tape tape;
      const nn::BoundParams bound = nn::bind(tape, ckpt.params);
      LossReport report;
      std::vector<AnnealParams> anneal;
      auto snapshot = [&](int iteration) {
        nlohmann::json ab = nlohmann::json::array();
        for (const auto& a : anneal) ab.push_back({{"alpha", a.alpha}, {"beta", a.beta}});
        return nlohmann::json{{"epoch", epoch + 1}, {"step", step}, {"pair_id", pair.pair_id},
                              {"iteration", iteration}, {"anneal", ab}};
      };
      nn::Var loss;
      try {
        loss = rpmnet_pair_loss(tape, bound, pair, nbrs[order[step]], cfg.arch, cfg.n_iter_train, cfg.lambda, opt,
                                &report, &anneal);
      } catch (const SolverError& e) {
        throw NonFiniteLoss("solver failure on pair " + pair.pair_id + ": " + e.what(), snapshot(e.iteration()));
      }
      for (std::size_t i = 0; i < report.l_total.size(); ++i) {
        if (!std::isfinite(report.l_total[i]))
          throw NonFiniteLoss("non-finite loss on pair " + pair.pair_id, snapshot(static_cast<int>(i) + 1));
      }
      tape.backward(loss);
      const nn::ParamBundle grads = nn::collect_grads(bound, ckpt.params);
      if (!finite_bundle(grads))
        throw NonFiniteLoss("non-finite gradient on pair " + pair.pair_id, snapshot(cfg.n_iter_train));
      nn::adam_step(ckpt.params, grads, *ckpt.adam, adam_cfg);
      sum_reg += report.l_reg.back();
      sum_inl += report.l_inlier.back();
    }

    EpochLog log;
    log.epoch = epoch + 1;
    log.mean_l_reg = sum_reg / static_cast<double>(data.size());
    log.mean_l_inlier = sum_inl / static_cast<double>(data.size());
    const ValidationScore v = validate_checkpoint(val, ckpt.params, cfg.arch, cfg.n_iter_eval, cfg.sinkhorn_iters);
    log.val_iso_rot_deg = v.mean_iso_rot_deg;
    log.val_chamfer = v.mean_chamfer;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_progress(epoch + 1);
    if (on_epoch) on_epoch(log, ckpt);
  }
  return ckpt;
}

}  // namespace rpm_align
