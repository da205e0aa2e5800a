#pragma once

#include "rpm_align/data.hpp"
#include "rpm_align/geom.hpp"

#include "json.hpp"

#include <cstddef>
#include <filesystem>
#include <string>

namespace rpm_align {

/// Normals that were rescaled to unit length while loading.
struct LoadStats {
  std::size_t normalized_normals = 0;
};

/// "x y z nx ny nz" per line, '#' comments and blank lines ignored.
PointCloud load_xyzn(const std::filesystem::path& path, LoadStats* stats = nullptr);
void save_xyzn(const PointCloud& cloud, const std::filesystem::path& path);

/// ASCII PLY with a single vertex element carrying float/double x y z nx ny nz.
/// Anything else raises UnsupportedFeature.
PointCloud load_ply(const std::filesystem::path& path, LoadStats* stats = nullptr);
void save_ply(const PointCloud& cloud, const std::filesystem::path& path);

/// Dispatch on extension: .ply or .xyzn (also .xyz / .txt).
PointCloud load_cloud(const std::filesystem::path& path, LoadStats* stats = nullptr);
void save_cloud(const PointCloud& cloud, const std::filesystem::path& path);

/// Shortest decimal that round-trips (at most 17 significant digits).
std::string format_double(double v);

nlohmann::json transform_to_json(const RigidTransform& T);
RigidTransform transform_from_json(const nlohmann::json& j);

nlohmann::json cloud_to_json(const PointCloud& cloud);
PointCloud cloud_from_json(const nlohmann::json& j, LoadStats* stats = nullptr);

inline constexpr int kPairFormatVersion = 1;
nlohmann::json pair_to_json(const RegistrationPair& pair);
RegistrationPair pair_from_json(const nlohmann::json& j);
void save_pair(const RegistrationPair& pair, const std::filesystem::path& path);
RegistrationPair load_pair(const std::filesystem::path& path);

nlohmann::json dataset_config_to_json(const DatasetConfig& cfg);
/// Missing keys keep defaults; unknown keys raise ConfigError.
DatasetConfig dataset_config_from_json(const nlohmann::json& j);

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Pairs listed by a manifest, resolved relative to its directory, in order.
std::vector<RegistrationPair> load_dataset(const std::filesystem::path& manifest_path);

/// Writes pair files and manifest.json into `dir`; returns the manifest.
DatasetManifest synthesize_dataset(const DatasetConfig& cfg, const std::filesystem::path& dir, int jobs = 1);

/// Parses a JSON file; FormatError with the parser's byte offset on failure.
nlohmann::json read_json_file(const std::filesystem::path& path);
/// Pretty-printed with a trailing newline.
void write_json_file(const nlohmann::json& j, const std::filesystem::path& path);
void write_text_file(const std::string& text, const std::filesystem::path& path);

}  // namespace rpm_align
