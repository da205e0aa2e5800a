#include "doctest.h"
#include "test_util.hpp"

#include "rpm_align/data.hpp"
#include "rpm_align/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>

using namespace rpm_align;
using namespace rpm_align::testing;

namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;

// Rz(yaw) Ry(pitch) Rx(roll) read back off the matrix entries, valid for |pitch| < 90.
Vec3 zyx_angles(const Mat3& R) {
  return Vec3(std::atan2(R(1, 0), R(0, 0)), -std::asin(R(2, 0)), std::atan2(R(2, 1), R(2, 2))) * kDeg;
}

// Exhaustive set-equality of rows up to `tol`.
bool same_rows(const Points& a, const Points& b, double tol) {
  if (a.rows() != b.rows()) return false;
  std::vector<bool> used(static_cast<std::size_t>(b.rows()), false);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    bool found = false;
    for (Eigen::Index j = 0; j < b.rows() && !found; ++j) {
      if (!used[static_cast<std::size_t>(j)] && (a.row(i) - b.row(j)).cwiseAbs().maxCoeff() <= tol) {
        used[static_cast<std::size_t>(j)] = true;
        found = true;
      }
    }
    if (!found) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("sample_transform") {
  Rng tiny(1);
  const RigidTransform near = sample_transform(tiny, 1e-12, 1e-12);
  CHECK(rotation_angle_deg(near.rotation) < 1e-9);
  CHECK(near.translation.norm() < 1e-11);

  Rng rng(2);
  Vec3 angle_sum = Vec3::Zero(), trans_sum = Vec3::Zero();
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const RigidTransform T = sample_transform(rng);
    REQUIRE(T.is_valid());
    const Vec3 a = zyx_angles(T.rotation);
    for (int k = 0; k < 3; ++k) {
      CHECK(a(k) >= -1e-9);
      CHECK(a(k) <= 45.0 + 1e-9);
      CHECK(std::abs(T.translation(k)) <= 0.5);
    }
    angle_sum += a;
    trans_sum += T.translation;
  }
  for (int k = 0; k < 3; ++k) {
    CHECK(std::abs(angle_sum(k) / n - 22.5) <= 1.0);
    CHECK(std::abs(trans_sum(k) / n) <= 0.02);
  }

  Rng a(3), b(3);
  const RigidTransform ta = sample_transform(a), tb = sample_transform(b);
  CHECK(ta.rotation == tb.rotation);
  CHECK(ta.translation == tb.translation);

  CHECK_THROWS_AS(sample_transform(rng, 0.0, 0.5), InvalidArgument);
  CHECK_THROWS_AS(sample_transform(rng, 180.0, 0.5), InvalidArgument);
  CHECK_THROWS_AS(sample_transform(rng, 45.0, 0.0), InvalidArgument);
}

TEST_CASE("jitter") {
  Rng rng(4);
  const PointCloud cloud = random_cloud(rng, 500);
  const PointCloud still = jitter(cloud, rng, 1e-15);
  CHECK((still.points() - cloud.points()).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(still.normals() == cloud.normals());

  // Heavy noise so the clip is actually exercised. At the origin the bound is
  // exact; elsewhere only the rounding of p + d is added.
  const Points origin = jitter_points(Points::Zero(500, 3), rng, 0.2, 0.05);
  CHECK(origin.cwiseAbs().maxCoeff() == 0.05);
  const Points wide = jitter_points(cloud.points(), rng, 0.2, 0.05);
  const double ulp = 4.0 * std::numeric_limits<double>::epsilon() * cloud.points().cwiseAbs().maxCoeff();
  CHECK((wide - cloud.points()).cwiseAbs().maxCoeff() <= 0.05 + ulp);

  const Points zero = Points::Zero(1000000 / 3 + 1, 3);
  const Points noise = jitter_points(zero, rng);
  for (int k = 0; k < 3; ++k) {
    const Eigen::VectorXd c = noise.col(k);
    const double mean = c.mean();
    const double sd = std::sqrt((c.array() - mean).square().sum() / static_cast<double>(c.size() - 1));
    CHECK(std::abs(sd - 0.01) <= 0.02 * 0.01);
  }
  const Eigen::VectorXd all = noise.reshaped();
  CHECK(all.size() >= 1000000);
  CHECK(std::sqrt(all.squaredNorm() / static_cast<double>(all.size())) == doctest::Approx(0.01).epsilon(0.02));
  CHECK_THROWS_AS(jitter_points(zero, rng, 0.0), InvalidArgument);
}

TEST_CASE("crop_halfspace") {
  Rng rng(5);
  const PointCloud cloud = random_cloud(rng, 1024);
  const PointCloud full = crop_halfspace(cloud, rng, 1.0);
  CHECK(full.points() == cloud.points());
  CHECK(full.normals() == cloud.normals());
  CHECK(crop_halfspace(cloud, rng, 0.7).size() == 717);

  for (int t = 0; t < 50; ++t) {
    const Eigen::Index n = 16 + static_cast<Eigen::Index>(rng.below(300));
    const double keep = rng.uniform(0.05, 1.0);
    const Points p = random_points(rng, n);
    const Vec3 dir = random_unit(rng);
    const auto got = halfspace_indices(p, dir, keep);
    const auto expect_count = static_cast<std::size_t>(std::ceil(keep * static_cast<double>(n) - 1e-9));
    CHECK(got.size() == expect_count);
    CHECK(std::is_sorted(got.begin(), got.end()));

    // Brute-force oracle: the k largest projections.
    std::vector<std::pair<double, Eigen::Index>> proj;
    for (Eigen::Index i = 0; i < n; ++i) proj.emplace_back(-p.row(i).dot(dir.transpose()), i);
    std::sort(proj.begin(), proj.end());
    std::set<Eigen::Index> top;
    for (std::size_t i = 0; i < expect_count; ++i) top.insert(proj[i].second);
    CHECK(std::set<Eigen::Index>(got.begin(), got.end()) == top);
  }
  CHECK_THROWS_AS(crop_halfspace(cloud, rng, 0.0), InvalidArgument);
  CHECK_THROWS_AS(crop_halfspace(cloud, rng, 1.5), InvalidArgument);
}

TEST_CASE("primitives") {
  Rng rng(6);
  const PointCloud sphere = gen_primitive_raw(PrimitiveKind::kSphere, 300, rng);
  for (Eigen::Index i = 0; i < sphere.size(); ++i) {
    CHECK(std::abs(sphere.points().row(i).norm() - 1.0) <= 1e-12);
    CHECK((sphere.normals().row(i) - sphere.points().row(i)).norm() <= 1e-12);
  }
  const PointCloud box = gen_primitive_raw(PrimitiveKind::kBox, 300, rng);
  for (Eigen::Index i = 0; i < box.size(); ++i) {
    const auto nrm = box.normals().row(i);
    CHECK(nrm.cwiseAbs().maxCoeff() == 1.0);
    CHECK(nrm.cwiseAbs().sum() == 1.0);
  }
  for (auto kind : {PrimitiveKind::kSphere, PrimitiveKind::kBox, PrimitiveKind::kCylinder, PrimitiveKind::kTwoLobe}) {
    const PointCloud c = gen_primitive(kind, 256, rng);
    CHECK(c.size() == 256);
    CHECK(c.points().rowwise().norm().maxCoeff() <= 1.0 + 1e-12);
    CHECK(c.points().colwise().mean().norm() <= 1e-12);
    for (Eigen::Index i = 0; i < c.size(); ++i) CHECK(std::abs(c.normals().row(i).norm() - 1.0) <= 1e-9);
    CHECK(parse_primitive(to_string(kind)) == kind);
  }
  CHECK_THROWS_AS(gen_primitive(PrimitiveKind::kBox, 15, rng), InvalidArgument);
  CHECK_THROWS_AS(parse_primitive("torus"), ConfigError);
  CHECK_THROWS_AS(parse_mode("dirty"), ConfigError);
}

TEST_CASE("make_pair") {
  Rng mr(7);
  const PointCloud model = gen_primitive(PrimitiveKind::kTwoLobe, 512, mr);
  PairConfig cfg;
  cfg.n_points = 200;

  SUBCASE("clean mode shares indices") {
    const RegistrationPair p = make_pair(model, cfg, 11, "c");
    CHECK(p.source.size() == 200);
    CHECK(same_rows(apply_transform(p.source.points(), p.gt), p.reference.points(), 1e-12));
    CHECK(same_rows(p.reference.points(), p.reference.points(), 0.0));
  }
  SUBCASE("noisy mode samples independently") {
    cfg.mode = PairMode::kNoisy;
    const RegistrationPair p = make_pair(model, cfg, 12, "n");
    CHECK(p.source.size() == 200);
    CHECK(p.reference.size() == 200);
    // Jitter bounds the distance from each point to its clean model point.
    const Points back = apply_transform(p.source.points(), p.gt);
    int within = 0;
    for (Eigen::Index i = 0; i < back.rows(); ++i) {
      Eigen::Index best = 0;
      (model.points().rowwise() - back.row(i)).rowwise().squaredNorm().minCoeff(&best);
      if ((model.points().row(best) - back.row(i)).cwiseAbs().maxCoeff() <= 0.05 + 1e-12) ++within;
    }
    CHECK(within == back.rows());
    CHECK_FALSE(same_rows(back, p.reference.points(), 0.05));
  }
  SUBCASE("partial mode") {
    cfg.mode = PairMode::kPartial;
    cfg.n_points = 1024;
    Rng big(8);
    const PointCloud m = gen_primitive(PrimitiveKind::kBox, 1024, big);
    double floor = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      const RegistrationPair p = make_pair(m, cfg, 100 + s);
      CHECK(p.source.size() == 717);
      CHECK(p.reference.size() == 717);
      CHECK(p.source_clean.size() == 1024);
      floor += modified_chamfer(apply_transform(p.source.points(), p.gt), p.reference.points(),
                                apply_transform(p.source_clean.points(), p.gt), p.reference_clean.points());
    }
    floor /= 10.0;
    CHECK(floor > 1e-4);
    CHECK(floor < 2e-3);
  }
}

TEST_CASE("pair consistency and determinism") {
  for (auto mode : {PairMode::kClean, PairMode::kNoisy, PairMode::kPartial}) {
    DatasetConfig cfg;
    cfg.pair.mode = mode;
    cfg.pair.n_points = 128;
    cfg.n_model = 256;
    cfg.master_seed = 31;
    for (std::size_t i = 0; i < 8; ++i) {
      const RegistrationPair p = synthesize_pair(cfg, i);
      CHECK(p.gt.is_valid());
      CHECK((apply_transform(p.source_clean.points(), p.gt) - p.reference_clean.points()).cwiseAbs().maxCoeff() <=
            1e-12);
      CHECK(p.reference_clean.size() == 256);
      const RegistrationPair q = synthesize_pair(cfg, i);
      CHECK(q.source.points() == p.source.points());
      CHECK(q.reference.normals() == p.reference.normals());
      CHECK(q.gt.rotation == p.gt.rotation);
      CHECK(q.pair_id == p.pair_id);
    }
    CHECK(synthesize_pair(cfg, 0).source.points() != synthesize_pair(cfg, 1).source.points());
  }
  CHECK(pair_file_name(3) == "pair_00003.json");
}
