#pragma once

#include "rpm_align/nn/tape.hpp"
#include "rpm_align/nn/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace rpm_align::nn {

/// Named parameter tensors. Names are '/'-separated paths such as
/// "feat/pre0/weight"; std::map keeps iteration order deterministic.
struct ParamBundle {
  std::map<std::string, Tensor> tensors;
  std::string version = "1";

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return tensors.count(name) > 0; }
  std::size_t total_size() const;
  /// Same names and shapes as `other`.
  bool same_layout(const ParamBundle& other) const;
  /// Zero tensors with the same layout.
  ParamBundle zeros_like() const;
};

using BoundParams = std::map<std::string, Var>;

/// Records every tensor as a parameter leaf on `tape`.
BoundParams bind(Tape& tape, const ParamBundle& params);

/// Gradients accumulated on the bound leaves; zeros where nothing flowed.
ParamBundle collect_grads(const BoundParams& bound, const ParamBundle& params);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  std::int64_t step = 0;

  static AdamState zeros_like(const ParamBundle& params);
};

/// Bias-corrected Adam update, in place.
void adam_step(ParamBundle& params, const ParamBundle& grads, AdamState& state, const AdamConfig& cfg);

nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);
nlohmann::json params_to_json(const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> params_from_json(const nlohmann::json& j);
nlohmann::json adam_to_json(const AdamState& state);
AdamState adam_from_json(const nlohmann::json& j);

}  // namespace rpm_align::nn
