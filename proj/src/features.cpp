#include "rpm_align/features.hpp"

#include "rpm_align/errors.hpp"
#include "rpm_align/kdtree.hpp"
#include "rpm_align/nn/ops.hpp"
#include "rpm_align/random.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace rpm_align {

namespace {

using nn::Tensor;
using nn::Var;

double angle_between(const Vec3& a, const Vec3& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::acos(std::clamp(a.dot(b) / (na * nb), -1.0, 1.0));
}

std::string layer_name(const std::string& prefix, std::size_t i) { return prefix + std::to_string(i); }

struct LayerSpec {
  std::string name;
  int in = 0;
  int out = 0;
  bool norm = false;  // group norm + relu after the affine map
};

std::vector<LayerSpec> feature_layers(const FeatureConfig& f) {
  std::vector<LayerSpec> layers;
  int in = 10;
  for (std::size_t i = 0; i < f.pre_widths.size(); ++i) {
    layers.push_back({layer_name("feat/pre", i), in, f.pre_widths[i], true});
    in = f.pre_widths[i];
  }
  for (std::size_t i = 0; i < f.post_widths.size(); ++i) {
    const bool last = i + 1 == f.post_widths.size();
    layers.push_back({layer_name("feat/post", i), in, f.post_widths[i], !last});
    in = f.post_widths[i];
  }
  return layers;
}

std::vector<LayerSpec> param_layers(const ParamNetConfig& p) {
  std::vector<LayerSpec> layers;
  if (!p.learned_annealing) return layers;
  int in = 4;
  for (std::size_t i = 0; i < p.pre_widths.size(); ++i) {
    layers.push_back({layer_name("param/pre", i), in, p.pre_widths[i], true});
    in = p.pre_widths[i];
  }
  for (std::size_t i = 0; i < p.head_widths.size(); ++i) {
    const bool last = i + 1 == p.head_widths.size();
    layers.push_back({layer_name("param/head", i), in, p.head_widths[i], !last});
    in = p.head_widths[i];
  }
  return layers;
}

Var apply_layer(const nn::BoundParams& p, const LayerSpec& l, Var x, int groups) {
  Var y = nn::dense(x, p.at(l.name + "/weight"), p.at(l.name + "/bias"));
  if (!l.norm) return y;
  y = nn::group_norm(y, p.at(l.name + "/gn_gain"), p.at(l.name + "/gn_shift"), effective_groups(groups, l.out));
  return nn::relu(y);
}

void check_widths(const std::vector<int>& w, const char* what) {
  if (w.empty()) throw ConfigError(std::string(what) + " must not be empty");
  for (int v : w) {
    if (v <= 0) throw ConfigError(std::string(what) + " entries must be positive");
  }
}

}  // namespace

void ArchitectureConfig::validate() const {
  if (!(features.radius > 0.0)) throw ConfigError("radius must be positive");
  if (features.max_neighbors < 1) throw ConfigError("max_neighbors must be >= 1");
  if (features.groups < 1 || param_net.groups < 1) throw ConfigError("groups must be >= 1");
  check_widths(features.pre_widths, "features.pre_widths");
  check_widths(features.post_widths, "features.post_widths");
  check_widths(param_net.pre_widths, "param_net.pre_widths");
  check_widths(param_net.head_widths, "param_net.head_widths");
  if (param_net.head_widths.back() != 2) throw ConfigError("param_net.head_widths must end in 2");
}

nlohmann::json architecture_to_json(const ArchitectureConfig& cfg) {
  const FeatureConfig& f = cfg.features;
  const ParamNetConfig& p = cfg.param_net;
  return {{"features",
           {{"radius", f.radius},
            {"max_neighbors", f.max_neighbors},
            {"pre_widths", f.pre_widths},
            {"post_widths", f.post_widths},
            {"groups", f.groups},
            {"use_xc", f.use_xc},
            {"use_dx", f.use_dx},
            {"use_ppf", f.use_ppf}}},
          {"param_net",
           {{"pre_widths", p.pre_widths},
            {"head_widths", p.head_widths},
            {"groups", p.groups},
            {"learned_annealing", p.learned_annealing}}}};
}

namespace {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out, std::set<std::string>& seen) {
  seen.insert(key);
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& seen, const char* where) {
  for (const auto& [k, v] : j.items()) {
    if (!seen.count(k)) throw ConfigError(std::string("unknown key '") + k + "' in " + where);
  }
}

}  // namespace

ArchitectureConfig architecture_from_json(const nlohmann::json& j) {
  ArchitectureConfig cfg;
  if (!j.is_object()) throw ConfigError("architecture config must be an object");
  std::set<std::string> top{"features", "param_net"};
  reject_unknown(j, top, "architecture");
  if (j.contains("features")) {
    const auto& f = j.at("features");
    std::set<std::string> seen;
    read_key(f, "radius", cfg.features.radius, seen);
    read_key(f, "max_neighbors", cfg.features.max_neighbors, seen);
    read_key(f, "pre_widths", cfg.features.pre_widths, seen);
    read_key(f, "post_widths", cfg.features.post_widths, seen);
    read_key(f, "groups", cfg.features.groups, seen);
    read_key(f, "use_xc", cfg.features.use_xc, seen);
    read_key(f, "use_dx", cfg.features.use_dx, seen);
    read_key(f, "use_ppf", cfg.features.use_ppf, seen);
    reject_unknown(f, seen, "features");
  }
  if (j.contains("param_net")) {
    const auto& p = j.at("param_net");
    std::set<std::string> seen;
    read_key(p, "pre_widths", cfg.param_net.pre_widths, seen);
    read_key(p, "head_widths", cfg.param_net.head_widths, seen);
    read_key(p, "groups", cfg.param_net.groups, seen);
    read_key(p, "learned_annealing", cfg.param_net.learned_annealing, seen);
    reject_unknown(p, seen, "param_net");
  }
  cfg.validate();
  return cfg;
}

NeighborhoodSet radius_neighbors(const Points& points, double radius, int max_neighbors, std::uint64_t seed) {
  if (!(radius > 0.0)) throw InvalidArgument("radius_neighbors: radius must be positive");
  if (max_neighbors < 1) throw InvalidArgument("radius_neighbors: max_neighbors must be >= 1");
  const KdTree tree(points);
  NeighborhoodSet out;
  out.offsets.reserve(static_cast<std::size_t>(points.rows()) + 1);
  for (Eigen::Index c = 0; c < points.rows(); ++c) {
    std::vector<Eigen::Index> nb = tree.radius_search(points.row(c).transpose(), radius);
    if (static_cast<int>(nb.size()) > max_neighbors) {
      std::vector<Eigen::Index> others;
      others.reserve(nb.size());
      for (Eigen::Index i : nb) {
        if (i != c) others.push_back(i);
      }
      // Partial Fisher-Yates: the first max_neighbors - 1 slots are a uniform sample.
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
      const std::size_t keep = static_cast<std::size_t>(max_neighbors - 1);
      for (std::size_t i = 0; i < keep; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(others.size() - i));
        std::swap(others[i], others[j]);
      }
      others.resize(keep);
      others.push_back(c);
      std::sort(others.begin(), others.end());
      nb = std::move(others);
    }
    out.indices.insert(out.indices.end(), nb.begin(), nb.end());
    out.offsets.push_back(out.indices.size());
  }
  return out;
}

Eigen::Vector4d ppf(const Vec3& x_c, const Vec3& n_c, const Vec3& x_i, const Vec3& n_i) {
  const Vec3 d = x_i - x_c;
  const double dist = d.norm();
  if (dist == 0.0) return Eigen::Vector4d::Zero();
  return {angle_between(n_c, d), angle_between(n_i, d), angle_between(n_c, n_i), dist};
}

Matrix assemble_inputs(const PointCloud& cloud, const NeighborhoodSet& nbrs) {
  if (nbrs.centers() != static_cast<std::size_t>(cloud.size()))
    throw InvalidArgument("assemble_inputs: neighborhood set does not match the cloud");
  Matrix rows(static_cast<Eigen::Index>(nbrs.total()), 10);
  Eigen::Index r = 0;
  for (std::size_t c = 0; c < nbrs.centers(); ++c) {
    const Vec3 xc = cloud.point(static_cast<Eigen::Index>(c));
    const Vec3 nc = cloud.normal(static_cast<Eigen::Index>(c));
    for (Eigen::Index i : nbrs.of(c)) {
      const Vec3 xi = cloud.point(i);
      rows.block<1, 3>(r, 0) = xc.transpose();
      rows.block<1, 3>(r, 3) = (xi - xc).transpose();
      rows.block<1, 4>(r, 6) = ppf(xc, nc, xi, cloud.normal(i)).transpose();
      ++r;
    }
  }
  return rows;
}

void mask_channels(Matrix& rows, const FeatureConfig& cfg) {
  if (!cfg.use_xc) rows.middleCols(0, 3).setZero();
  if (!cfg.use_dx) rows.middleCols(3, 3).setZero();
  if (!cfg.use_ppf) rows.middleCols(6, 4).setZero();
}

int effective_groups(int requested, int channels) {
  const int g = std::min(requested, channels);
  return g >= 1 && channels % g == 0 ? g : 1;
}

nn::ParamBundle init_params(const ArchitectureConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  nn::ParamBundle out;
  Rng rng(seed);
  auto add_layers = [&](const std::vector<LayerSpec>& layers) {
    for (const LayerSpec& l : layers) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
      Tensor w({static_cast<std::size_t>(l.in), static_cast<std::size_t>(l.out)});
      for (double& v : w.values()) v = rng.uniform(-bound, bound);
      Tensor b({static_cast<std::size_t>(l.out)});
      for (double& v : b.values()) v = rng.uniform(-bound, bound);
      out.tensors.emplace(l.name + "/weight", std::move(w));
      out.tensors.emplace(l.name + "/bias", std::move(b));
      if (l.norm) {
        out.tensors.emplace(l.name + "/gn_gain", Tensor({static_cast<std::size_t>(l.out)}, 1.0));
        out.tensors.emplace(l.name + "/gn_shift", Tensor({static_cast<std::size_t>(l.out)}, 0.0));
      }
    }
  };
  add_layers(feature_layers(cfg.features));
  add_layers(param_layers(cfg.param_net));
  if (!cfg.param_net.learned_annealing) {
    // softplus(0) = ln 2 for both alpha and beta.
    out.tensors.emplace("param/raw_alpha", Tensor({1}, 0.0));
    out.tensors.emplace("param/raw_beta", Tensor({1}, 0.0));
  }
  return out;
}

void check_params(const nn::ParamBundle& params, const ArchitectureConfig& cfg) {
  const nn::ParamBundle expected = init_params(cfg, 0);
  for (const auto& [name, t] : expected.tensors) {
    if (!params.contains(name)) throw ConfigError("checkpoint is missing parameter '" + name + "'");
    if (!params.at(name).same_shape(t))
      throw ConfigError("parameter '" + name + "' has shape " + params.at(name).shape_string() + ", expected " +
                        t.shape_string());
  }
  for (const auto& [name, t] : params.tensors) {
    if (!expected.contains(name)) throw ConfigError("unexpected parameter '" + name + "'");
  }
}

Var hybrid_features(nn::Tape& tape, const nn::BoundParams& params, const PointCloud& cloud,
                    const NeighborhoodSet& nbrs, const FeatureConfig& cfg) {
  Matrix rows = assemble_inputs(cloud, nbrs);
  mask_channels(rows, cfg);
  Var x = tape.constant(Tensor::from_matrix(rows));
  const std::vector<LayerSpec> layers = feature_layers(cfg);
  const std::size_t n_pre = cfg.pre_widths.size();
  for (std::size_t i = 0; i < n_pre; ++i) x = apply_layer(params, layers[i], x, cfg.groups);
  x = nn::segment_max_pool(x, nbrs.offsets);
  for (std::size_t i = n_pre; i < layers.size(); ++i) x = apply_layer(params, layers[i], x, cfg.groups);
  return nn::l2_normalize(x);
}

Matrix extract_hybrid_features(const PointCloud& cloud, const nn::ParamBundle& params,
                               const ArchitectureConfig& cfg, const NeighborhoodSet* nbrs) {
  check_params(params, cfg);
  NeighborhoodSet own;
  if (!nbrs) {
    own = radius_neighbors(cloud.points(), cfg.features.radius, cfg.features.max_neighbors, 0);
    nbrs = &own;
  }
  nn::Tape tape;
  tape.set_grad_enabled(false);
  const Var f = hybrid_features(tape, nn::bind(tape, params), cloud, *nbrs, cfg.features);
  return f.value().matrix();
}

Var anneal_params(nn::Tape& tape, const nn::BoundParams& params, const Points& x, const Points& y,
                  const ParamNetConfig& cfg) {
  if (!cfg.learned_annealing) {
    Tensor zero({2});
    Var raw = tape.constant(zero);
    // [raw_alpha, raw_beta] assembled through two one-hot affine maps.
    Tensor ea({1, 2}, std::vector<double>{1.0, 0.0});
    Tensor eb({1, 2}, std::vector<double>{0.0, 1.0});
    raw = nn::add(nn::dense(params.at("param/raw_alpha"), tape.constant(ea), raw),
                  nn::dense(params.at("param/raw_beta"), tape.constant(eb), tape.constant(zero)));
    return nn::softplus(raw);
  }
  const Eigen::Index J = x.rows(), K = y.rows();
  Matrix in(J + K, 4);
  in.topLeftCorner(J, 3) = x;
  in.col(3).head(J).setZero();
  in.bottomLeftCorner(K, 3) = y;
  in.col(3).tail(K).setOnes();
  Var h = tape.constant(Tensor::from_matrix(in));
  const std::vector<LayerSpec> layers = param_layers(cfg);
  const std::size_t n_pre = cfg.pre_widths.size();
  for (std::size_t i = 0; i < n_pre; ++i) h = apply_layer(params, layers[i], h, cfg.groups);
  h = nn::max_pool(h);
  for (std::size_t i = n_pre; i < layers.size(); ++i) h = apply_layer(params, layers[i], h, cfg.groups);
  return nn::softplus(h);
}

AnnealParams predict_anneal_params(const PointCloud& x, const PointCloud& y, const nn::ParamBundle& params,
                                   const ArchitectureConfig& cfg) {
  check_params(params, cfg);
  nn::Tape tape;
  tape.set_grad_enabled(false);
  const Var ab = anneal_params(tape, nn::bind(tape, params), x.points(), y.points(), cfg.param_net);
  return {ab.value()[0], ab.value()[1]};
}

}  // namespace rpm_align
