#pragma once

#include "rpm_align/errors.hpp"
#include "rpm_align/pipeline.hpp"

#include "json.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace rpm_align {

struct TrainConfig {
  ArchitectureConfig arch;
  double lr = 1e-4;
  double lambda = kDefaultInlierLambda;
  int n_iter_train = 2;
  int n_iter_eval = 5;
  int sinkhorn_iters = 5;
  int epochs = 1;
  std::uint64_t seed = 0;
  /// Validation pairs taken from the head of the training set when no
  /// separate validation set is given.
  int val_fallback = 16;

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
/// Missing keys keep defaults; unknown keys raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochLog {
  int epoch = 0;  ///< 1-based
  double mean_l_reg = 0.0;
  double mean_l_inlier = 0.0;
  double val_iso_rot_deg = 0.0;
  double val_chamfer = 0.0;
  double seconds = 0.0;  ///< wall time of the epoch including validation
};
nlohmann::json epoch_log_to_json(const EpochLog& log);

/// Raised when a training loss or gradient is not finite. `snapshot` holds
/// the epoch, step, pair id, iteration and the predicted alpha/beta values.
class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(const std::string& what, nlohmann::json snapshot)
      : Error(what), snapshot_(std::move(snapshot)) {}
  const nlohmann::json& snapshot() const { return snapshot_; }

 private:
  nlohmann::json snapshot_;
};

struct ValidationScore {
  double mean_iso_rot_deg = 0.0;
  double mean_chamfer = 0.0;
};
ValidationScore validate_checkpoint(const std::vector<RegistrationPair>& pairs, const nn::ParamBundle& params,
                                    const ArchitectureConfig& arch, int n_iters, int sinkhorn_iters);

using EpochCallback = std::function<void(const EpochLog&, const Checkpoint&)>;

/// One Adam step per pair; pairs are shuffled each epoch with a stream
/// derived from (seed, epoch). With `resume` the parameters, Adam state and
/// completed epoch count are taken from the checkpoint, so an interrupted run
/// continues on the same trajectory.
Checkpoint train(const std::vector<RegistrationPair>& data, const std::vector<RegistrationPair>& val,
                 const TrainConfig& cfg, const std::optional<Checkpoint>& resume = std::nullopt,
                 const EpochCallback& on_epoch = {});

/// Parameters used when training starts from scratch.
nn::ParamBundle initial_params(const TrainConfig& cfg);

}  // namespace rpm_align
