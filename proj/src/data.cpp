#include "rpm_align/data.hpp"

#include "rpm_align/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

namespace rpm_align {

namespace {

Vec3 random_unit(Rng& rng) {
  Vec3 v;
  do {
    v = Vec3(rng.normal(), rng.normal(), rng.normal());
  } while (v.norm() < 1e-12);
  return v.normalized();
}

struct Ellipsoid {
  Vec3 center;
  Vec3 axes;
  Mat3 rotation;  // body to world

  double area() const {
    // Thomsen's approximation; only used to split the sample budget.
    constexpr double p = 1.6075;
    const double a = std::pow(axes(0), p), b = std::pow(axes(1), p), c = std::pow(axes(2), p);
    return 4.0 * std::numbers::pi * std::pow((a * b + a * c + b * c) / 3.0, 1.0 / p);
  }

  bool contains(const Vec3& p) const {
    const Vec3 q = rotation.transpose() * (p - center);
    return q.cwiseQuotient(axes).squaredNorm() < 1.0;
  }

  /// Area-uniform surface point by rejection against the stretch factor.
  void sample(Rng& rng, Vec3& point, Vec3& normal) const {
    const double a = axes(0), b = axes(1), c = axes(2);
    const double g_max = std::max({b * c, a * c, a * b});
    for (;;) {
      const Vec3 u = random_unit(rng);
      const double g = std::sqrt(std::pow(b * c * u(0), 2) + std::pow(a * c * u(1), 2) + std::pow(a * b * u(2), 2));
      if (rng.uniform() * g_max > g) continue;
      point = center + rotation * Vec3(a * u(0), b * u(1), c * u(2));
      normal = (rotation * Vec3(u(0) / a, u(1) / b, u(2) / c)).normalized();
      return;
    }
  }
};

PointCloud make_cloud(std::vector<Vec3>& pts, std::vector<Vec3>& nrm) {
  Points P(static_cast<Eigen::Index>(pts.size()), 3), N(static_cast<Eigen::Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    P.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
    N.row(static_cast<Eigen::Index>(i)) = nrm[i].transpose();
  }
  return PointCloud(std::move(P), std::move(N));
}

PointCloud sample_sphere(int n, Rng& rng) {
  std::vector<Vec3> pts, nrm;
  for (int i = 0; i < n; ++i) {
    const Vec3 u = random_unit(rng);
    pts.push_back(u);
    nrm.push_back(u);
  }
  return make_cloud(pts, nrm);
}

PointCloud sample_box(int n, Rng& rng) {
  const Vec3 ext(rng.uniform(0.9, 1.3), rng.uniform(0.55, 0.8), rng.uniform(0.25, 0.45));
  const Vec3 half = ext / 2.0;
  // Face pairs perpendicular to x, y, z with areas ext_y*ext_z, ext_x*ext_z, ext_x*ext_y.
  const double areas[3] = {ext(1) * ext(2), ext(0) * ext(2), ext(0) * ext(1)};
  const double total = areas[0] + areas[1] + areas[2];
  std::vector<Vec3> pts, nrm;
  for (int i = 0; i < n; ++i) {
    double r = rng.uniform() * total;
    int axis = 0;
    while (axis < 2 && r >= areas[axis]) r -= areas[axis++];
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    Vec3 p;
    for (int k = 0; k < 3; ++k) p(k) = rng.uniform(-half(k), half(k));
    p(axis) = sign * half(axis);
    Vec3 nv = Vec3::Zero();
    nv(axis) = sign;
    pts.push_back(p);
    nrm.push_back(nv);
  }
  return make_cloud(pts, nrm);
}

PointCloud sample_cylinder(int n, Rng& rng) {
  const double radius = rng.uniform(0.3, 0.5);
  const double height = rng.uniform(1.0, 1.6);
  const double side = 2.0 * std::numbers::pi * radius * height;
  const double cap = std::numbers::pi * radius * radius;
  std::vector<Vec3> pts, nrm;
  for (int i = 0; i < n; ++i) {
    const double r = rng.uniform() * (side + 2.0 * cap);
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    if (r < side) {
      pts.emplace_back(radius * std::cos(phi), radius * std::sin(phi), rng.uniform(-height / 2, height / 2));
      nrm.emplace_back(std::cos(phi), std::sin(phi), 0.0);
    } else {
      const double sign = r < side + cap ? 1.0 : -1.0;
      const double rho = radius * std::sqrt(rng.uniform());
      pts.emplace_back(rho * std::cos(phi), rho * std::sin(phi), sign * height / 2);
      nrm.emplace_back(0.0, 0.0, sign);
    }
  }
  return make_cloud(pts, nrm);
}

PointCloud sample_two_lobe(int n, Rng& rng) {
  Ellipsoid a{Vec3(-0.35, 0.0, 0.0), Vec3(rng.uniform(0.55, 0.7), rng.uniform(0.35, 0.45), rng.uniform(0.25, 0.32)),
              Mat3::Identity()};
  Ellipsoid b{Vec3(0.45, 0.12, 0.05), Vec3(rng.uniform(0.3, 0.4), rng.uniform(0.2, 0.26), rng.uniform(0.14, 0.18)),
              rotation_from_euler_zyx(rng.uniform(30.0, 60.0), rng.uniform(10.0, 25.0), 0.0)};
  const double pa = a.area() / (a.area() + b.area());
  std::vector<Vec3> pts, nrm;
  while (static_cast<int>(pts.size()) < n) {
    const bool first = rng.uniform() < pa;
    const Ellipsoid& lobe = first ? a : b;
    const Ellipsoid& other = first ? b : a;
    Vec3 p, nv;
    lobe.sample(rng, p, nv);
    if (other.contains(p)) continue;
    pts.push_back(p);
    nrm.push_back(nv);
  }
  return make_cloud(pts, nrm);
}

std::vector<Eigen::Index> sample_indices(Eigen::Index n_model, int n_points, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n_model));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  rng.shuffle(idx.begin(), idx.end());
  if (n_points < n_model) idx.resize(static_cast<std::size_t>(n_points));
  return idx;
}

PointCloud shuffled(const PointCloud& cloud, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(cloud.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  rng.shuffle(idx.begin(), idx.end());
  return cloud.subset(idx);
}

}  // namespace

std::string to_string(PairMode mode) {
  switch (mode) {
    case PairMode::kClean: return "clean";
    case PairMode::kNoisy: return "noisy";
    case PairMode::kPartial: return "partial";
  }
  return "?";
}

std::string to_string(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::kSphere: return "sphere";
    case PrimitiveKind::kBox: return "box";
    case PrimitiveKind::kCylinder: return "cylinder";
    case PrimitiveKind::kTwoLobe: return "two_lobe";
  }
  return "?";
}

PairMode parse_mode(const std::string& name) {
  if (name == "clean") return PairMode::kClean;
  if (name == "noisy") return PairMode::kNoisy;
  if (name == "partial") return PairMode::kPartial;
  throw ConfigError("unknown mode '" + name + "' (expected clean, noisy or partial)");
}

PrimitiveKind parse_primitive(const std::string& name) {
  if (name == "sphere") return PrimitiveKind::kSphere;
  if (name == "box") return PrimitiveKind::kBox;
  if (name == "cylinder") return PrimitiveKind::kCylinder;
  if (name == "two_lobe") return PrimitiveKind::kTwoLobe;
  throw ConfigError("unknown primitive '" + name + "'");
}

RigidTransform sample_transform(Rng& rng, double rot_max_deg, double trans_max) {
  if (!(rot_max_deg > 0.0 && rot_max_deg < 180.0)) throw InvalidArgument("rot_max_deg must be in (0, 180)");
  if (!(trans_max > 0.0)) throw InvalidArgument("trans_max must be positive");
  const double yaw = rng.uniform(0.0, rot_max_deg);
  const double pitch = rng.uniform(0.0, rot_max_deg);
  const double roll = rng.uniform(0.0, rot_max_deg);
  RigidTransform T;
  T.rotation = rotation_from_euler_zyx(yaw, pitch, roll);
  for (int k = 0; k < 3; ++k) T.translation(k) = rng.uniform(-trans_max, trans_max);
  return T;
}

Points jitter_points(const Points& points, Rng& rng, double sigma, double clip) {
  if (!(sigma > 0.0) || !(clip > 0.0)) throw InvalidArgument("jitter requires sigma > 0 and clip > 0");
  Points out = points;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (int k = 0; k < 3; ++k) out(i, k) += std::clamp(rng.normal(0.0, sigma), -clip, clip);
  }
  return out;
}

PointCloud jitter(const PointCloud& cloud, Rng& rng, double sigma, double clip) {
  return PointCloud(jitter_points(cloud.points(), rng, sigma, clip), cloud.normals());
}

std::vector<Eigen::Index> halfspace_indices(const Points& points, const Vec3& direction, double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw InvalidArgument("keep_ratio must be in (0, 1]");
  const Eigen::Index n = points.rows();
  const auto keep = static_cast<Eigen::Index>(std::ceil(keep_ratio * static_cast<double>(n) - 1e-9));
  const Eigen::VectorXd proj = points * direction;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return proj(a) > proj(b); });
  order.resize(static_cast<std::size_t>(keep));
  std::sort(order.begin(), order.end());
  return order;
}

PointCloud crop_halfspace(const PointCloud& cloud, Rng& rng, double keep_ratio) {
  const Vec3 dir = random_unit(rng);
  return cloud.subset(halfspace_indices(cloud.points(), dir, keep_ratio));
}

PointCloud gen_primitive_raw(PrimitiveKind kind, int n, Rng& rng) {
  if (n < 16) throw InvalidArgument("gen_primitive requires n >= 16");
  switch (kind) {
    case PrimitiveKind::kSphere: return sample_sphere(n, rng);
    case PrimitiveKind::kBox: return sample_box(n, rng);
    case PrimitiveKind::kCylinder: return sample_cylinder(n, rng);
    case PrimitiveKind::kTwoLobe: return sample_two_lobe(n, rng);
  }
  throw InvalidArgument("unknown primitive kind");
}

PointCloud normalize_unit_sphere(const PointCloud& cloud) {
  const Vec3 c = cloud.points().colwise().mean().transpose();
  Points p = cloud.points().rowwise() - c.transpose();
  const double r = p.rowwise().norm().maxCoeff();
  if (r > 0.0) p /= r;
  return PointCloud(std::move(p), cloud.normals());
}

PointCloud gen_primitive(PrimitiveKind kind, int n, Rng& rng) {
  return normalize_unit_sphere(gen_primitive_raw(kind, n, rng));
}

RegistrationPair make_pair(const PointCloud& model, const PairConfig& cfg, std::uint64_t seed, std::string pair_id) {
  if (model.empty()) throw InvalidArgument("make_pair: empty model");
  if (cfg.n_points < 1) throw InvalidArgument("make_pair: n_points must be >= 1");
  Rng rng(seed);
  RegistrationPair pair;
  pair.pair_id = std::move(pair_id);
  pair.seed = seed;
  pair.gt = sample_transform(rng, cfg.rot_max_deg, cfg.trans_max);
  const RigidTransform to_source = invert(pair.gt);

  pair.reference_clean = model;
  pair.source_clean = apply_transform(model, to_source);

  const auto src_idx = sample_indices(model.size(), cfg.n_points, rng);
  const auto ref_idx = cfg.mode == PairMode::kClean ? src_idx : sample_indices(model.size(), cfg.n_points, rng);
  PointCloud src = model.subset(src_idx);
  PointCloud ref = model.subset(ref_idx);

  if (cfg.mode == PairMode::kPartial) {
    src = crop_halfspace(src, rng, cfg.keep_ratio);
    ref = crop_halfspace(ref, rng, cfg.keep_ratio);
  }
  src = apply_transform(src, to_source);
  if (cfg.mode != PairMode::kClean) {
    Points ps = jitter_points(src.points(), rng, cfg.sigma, cfg.clip);
    Points pr = jitter_points(ref.points(), rng, cfg.sigma, cfg.clip);
    if (cfg.reestimate_normals) {
      const int ks = static_cast<int>(std::min<Eigen::Index>(cfg.normal_k, ps.rows()));
      const int kr = static_cast<int>(std::min<Eigen::Index>(cfg.normal_k, pr.rows()));
      Points ns = estimate_normals(ps, ks).normals;
      Points nr = estimate_normals(pr, kr).normals;
      src = PointCloud(std::move(ps), std::move(ns));
      ref = PointCloud(std::move(pr), std::move(nr));
    } else {
      src = PointCloud(std::move(ps), src.normals());
      ref = PointCloud(std::move(pr), ref.normals());
    }
  }
  pair.source = shuffled(src, rng);
  pair.reference = shuffled(ref, rng);
  return pair;
}

std::string pair_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%05zu.json", index);
  return buf;
}

RegistrationPair synthesize_pair(const DatasetConfig& cfg, std::size_t index) {
  if (cfg.kinds.empty()) throw ConfigError("dataset needs at least one primitive kind");
  Rng model_rng(derive_seed(cfg.master_seed, 2 * index));
  const PrimitiveKind kind = cfg.kinds[model_rng.below(cfg.kinds.size())];
  const PointCloud model = gen_primitive(kind, cfg.n_model, model_rng);
  std::string id = pair_file_name(index);
  id.resize(id.size() - 5);  // strip ".json"
  return make_pair(model, cfg.pair, derive_seed(cfg.master_seed, 2 * index + 1), id);
}

}  // namespace rpm_align
