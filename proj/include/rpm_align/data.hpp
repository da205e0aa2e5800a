#pragma once

#include "rpm_align/geom.hpp"
#include "rpm_align/random.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace rpm_align {

enum class PairMode { kClean, kNoisy, kPartial };
enum class PrimitiveKind { kSphere, kBox, kCylinder, kTwoLobe };

std::string to_string(PairMode mode);
std::string to_string(PrimitiveKind kind);
/// Throw ConfigError on unknown names.
PairMode parse_mode(const std::string& name);
PrimitiveKind parse_primitive(const std::string& name);

/// Euler angles uniform on [0, rot_max_deg] composed Z-Y-X, translation
/// components uniform on [-trans_max, trans_max].
RigidTransform sample_transform(Rng& rng, double rot_max_deg = 45.0, double trans_max = 0.5);

/// Per-axis N(0, sigma^2) noise clamped to [-clip, clip]. Normals pass through.
Points jitter_points(const Points& points, Rng& rng, double sigma = 0.01, double clip = 0.05);
PointCloud jitter(const PointCloud& cloud, Rng& rng, double sigma = 0.01, double clip = 0.05);

/// Keeps the ceil(keep_ratio * N) points with the largest projection on a
/// direction drawn uniformly from the sphere (ties by smaller index). Points
/// keep their relative order.
PointCloud crop_halfspace(const PointCloud& cloud, Rng& rng, double keep_ratio = 0.7);
/// Same selection for a given direction; returns the kept indices in order.
std::vector<Eigen::Index> halfspace_indices(const Points& points, const Vec3& direction, double keep_ratio);

/// Uniform surface sample with analytic normals, before normalisation.
/// Shape parameters (box extents, cylinder proportions, lobe axes) are drawn
/// from `rng`.
PointCloud gen_primitive_raw(PrimitiveKind kind, int n, Rng& rng);
/// Centroid at the origin, max |p| = 1.
PointCloud normalize_unit_sphere(const PointCloud& cloud);
/// gen_primitive_raw followed by normalize_unit_sphere. Requires n >= 16.
PointCloud gen_primitive(PrimitiveKind kind, int n, Rng& rng);

struct PairConfig {
  PairMode mode = PairMode::kClean;
  int n_points = 1024;
  double rot_max_deg = 45.0;
  double trans_max = 0.5;
  double sigma = 0.01;
  double clip = 0.05;
  double keep_ratio = 0.7;
  /// Noisy and partial modes re-estimate normals after jitter unless false.
  bool reestimate_normals = true;
  int normal_k = 20;
};

/// `source` maps onto `reference` under `gt`. The clean clouds are the full
/// model in each frame: reference_clean = apply_transform(source_clean, gt).
struct RegistrationPair {
  PointCloud source;
  PointCloud reference;
  PointCloud source_clean;
  PointCloud reference_clean;
  RigidTransform gt;
  std::string pair_id;
  std::uint64_t seed = 0;
};

/// Draws n_points model indices (shared in clean mode, independent otherwise),
/// applies invert(gt) to the source side, then crop / jitter / normals per
/// mode, then shuffles both clouds.
RegistrationPair make_pair(const PointCloud& model, const PairConfig& cfg, std::uint64_t seed,
                           std::string pair_id = {});

struct DatasetConfig {
  PairConfig pair;
  int n_pairs = 64;
  int n_model = 1024;
  std::vector<PrimitiveKind> kinds{PrimitiveKind::kSphere, PrimitiveKind::kBox, PrimitiveKind::kCylinder,
                                   PrimitiveKind::kTwoLobe};
  std::uint64_t master_seed = 0;
};

/// Pair `index` of the dataset: the model and the pair draw from separate
/// streams derived from master_seed.
RegistrationPair synthesize_pair(const DatasetConfig& cfg, std::size_t index);

std::string pair_file_name(std::size_t index);

struct DatasetManifest {
  static constexpr int kFormatVersion = 1;
  DatasetConfig config;
  /// Relative to the manifest's directory.
  std::vector<std::string> pair_files;
};

}  // namespace rpm_align
