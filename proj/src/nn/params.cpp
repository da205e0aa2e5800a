#include "rpm_align/nn/params.hpp"

#include "rpm_align/errors.hpp"

#include <cmath>

namespace rpm_align::nn {

const Tensor& ParamBundle::at(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw InvalidArgument("missing parameter '" + name + "'");
  return it->second;
}

Tensor& ParamBundle::at(const std::string& name) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw InvalidArgument("missing parameter '" + name + "'");
  return it->second;
}

std::size_t ParamBundle::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

bool ParamBundle::same_layout(const ParamBundle& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  for (const auto& [name, t] : tensors) {
    const auto it = other.tensors.find(name);
    if (it == other.tensors.end() || !it->second.same_shape(t)) return false;
  }
  return true;
}

ParamBundle ParamBundle::zeros_like() const {
  ParamBundle z;
  z.version = version;
  for (const auto& [name, t] : tensors) z.tensors.emplace(name, Tensor(t.shape(), 0.0));
  return z;
}

BoundParams bind(Tape& tape, const ParamBundle& params) {
  BoundParams out;
  for (const auto& [name, t] : params.tensors) out.emplace(name, tape.parameter(t));
  return out;
}

ParamBundle collect_grads(const BoundParams& bound, const ParamBundle& params) {
  ParamBundle grads = params.zeros_like();
  for (auto& [name, g] : grads.tensors) {
    const auto it = bound.find(name);
    if (it == bound.end()) continue;
    const Tensor& src = it->second.grad();
    if (!src.empty()) g = src;
  }
  return grads;
}

AdamState AdamState::zeros_like(const ParamBundle& params) {
  AdamState s;
  for (const auto& [name, t] : params.tensors) {
    s.first_moment.emplace(name, Tensor(t.shape(), 0.0));
    s.second_moment.emplace(name, Tensor(t.shape(), 0.0));
  }
  return s;
}

void adam_step(ParamBundle& params, const ParamBundle& grads, AdamState& state, const AdamConfig& cfg) {
  if (!params.same_layout(grads)) throw InvalidArgument("adam_step: gradient layout mismatch");
  if (state.first_moment.empty() && state.second_moment.empty()) state = AdamState::zeros_like(params);
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params.tensors) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.first_moment.at(name);
    Tensor& v = state.second_moment.at(name);
    if (!m.same_shape(p) || !v.same_shape(p)) throw InvalidArgument("adam_step: moment shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
  try {
    return Tensor(j.at("shape").get<std::vector<std::size_t>>(), j.at("values").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed tensor: ") + e.what());
  }
}

nlohmann::json params_to_json(const std::map<std::string, Tensor>& tensors) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, t] : tensors) j[name] = tensor_to_json(t);
  return j;
}

std::map<std::string, Tensor> params_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("parameters must be a JSON object");
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : j.items()) out.emplace(name, tensor_from_json(v));
  return out;
}

nlohmann::json adam_to_json(const AdamState& state) {
  return {{"step", state.step},
          {"first_moment", params_to_json(state.first_moment)},
          {"second_moment", params_to_json(state.second_moment)}};
}

AdamState adam_from_json(const nlohmann::json& j) {
  AdamState s;
  try {
    s.step = j.at("step").get<std::int64_t>();
    s.first_moment = params_from_json(j.at("first_moment"));
    s.second_moment = params_from_json(j.at("second_moment"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed adam_state: ") + e.what());
  }
  return s;
}

}  // namespace rpm_align::nn
