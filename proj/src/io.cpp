#include "rpm_align/io.hpp"

#include "rpm_align/errors.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <algorithm>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace rpm_align {

namespace fs = std::filesystem;

namespace {

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return in;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t b = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > b) out.push_back(line.substr(b, i - b));
  }
  return out;
}

double parse_number(std::string_view tok, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw FormatError("invalid number '" + std::string(tok) + "'", line);
  if (!std::isfinite(v)) throw FormatError("non-finite coordinate", line);
  return v;
}

/// Rescales a loaded normal to unit length, counting the ones that needed it.
Vec3 unit_normal(const Vec3& n, std::size_t line, LoadStats* stats) {
  const double len = n.norm();
  if (!(len > 0.0)) throw FormatError("zero-length normal", line);
  if (std::abs(len - 1.0) <= 1e-6) return n;
  if (stats) ++stats->normalized_normals;
  return n / len;
}

PointCloud build(const std::vector<Vec3>& pts, const std::vector<Vec3>& nrm) {
  if (pts.empty()) throw FormatError("point cloud has no points");
  Points P(static_cast<Eigen::Index>(pts.size()), 3), N(static_cast<Eigen::Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    P.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
    N.row(static_cast<Eigen::Index>(i)) = nrm[i].transpose();
  }
  return PointCloud(std::move(P), std::move(N));
}

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  for (char& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw Error("format_double failed");
  return std::string(buf, ptr);
}

PointCloud load_xyzn(const fs::path& path, LoadStats* stats) {
  std::ifstream in = open_in(path);
  std::vector<Vec3> pts, nrm;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    const auto toks = split_ws(std::string_view(line).substr(0, hash));
    if (toks.empty()) continue;
    if (toks.size() != 6)
      throw FormatError("expected 6 values (x y z nx ny nz), got " + std::to_string(toks.size()), line_no);
    Vec3 p, n;
    for (int k = 0; k < 3; ++k) {
      p(k) = parse_number(toks[static_cast<std::size_t>(k)], line_no);
      n(k) = parse_number(toks[static_cast<std::size_t>(k + 3)], line_no);
    }
    pts.push_back(p);
    nrm.push_back(unit_normal(n, line_no, stats));
  }
  return build(pts, nrm);
}

void save_xyzn(const PointCloud& cloud, const fs::path& path) {
  std::ostringstream out;
  out << "# x y z nx ny nz\n";
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    for (int k = 0; k < 3; ++k) out << format_double(cloud.points()(i, k)) << ' ';
    for (int k = 0; k < 3; ++k) out << format_double(cloud.normals()(i, k)) << (k == 2 ? '\n' : ' ');
  }
  write_text_file(out.str(), path);
}

PointCloud load_ply(const fs::path& path, LoadStats* stats) {
  std::ifstream in = open_in(path);
  std::string line;
  std::size_t line_no = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++line_no;
    return true;
  };
  if (!next() || split_ws(line) != std::vector<std::string_view>{"ply"}) throw FormatError("missing 'ply' magic", 1);

  long long n_vertices = -1;
  bool in_vertex = false;
  std::vector<std::string> props;
  bool header_done = false;
  while (next()) {
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks[0] == "format") {
      if (toks.size() < 2 || toks[1] != "ascii")
        throw UnsupportedFeature("only ASCII PLY is supported", line_no);
    } else if (toks[0] == "comment" || toks[0] == "obj_info") {
      continue;
    } else if (toks[0] == "element") {
      if (toks.size() != 3) throw FormatError("malformed element line", line_no);
      if (toks[1] != "vertex") throw UnsupportedFeature("unsupported element '" + std::string(toks[1]) + "'", line_no);
      if (n_vertices >= 0) throw UnsupportedFeature("repeated vertex element", line_no);
      n_vertices = static_cast<long long>(parse_number(toks[2], line_no));
      in_vertex = true;
    } else if (toks[0] == "property") {
      if (!in_vertex) throw FormatError("property before element", line_no);
      if (toks.size() != 3) throw UnsupportedFeature("unsupported property declaration", line_no);
      static const std::set<std::string_view> kTypes{"float", "double", "float32", "float64"};
      if (!kTypes.count(toks[1]))
        throw UnsupportedFeature("unsupported property type '" + std::string(toks[1]) + "'", line_no);
      props.emplace_back(toks[2]);
    } else if (toks[0] == "end_header") {
      header_done = true;
      break;
    } else {
      throw FormatError("unexpected header line", line_no);
    }
  }
  if (!header_done) throw FormatError("missing end_header", line_no);
  if (n_vertices < 1) throw FormatError("vertex element missing or empty", line_no);
  const std::vector<std::string> wanted{"x", "y", "z", "nx", "ny", "nz"};
  int slot[6];
  if (props.size() != 6) throw UnsupportedFeature("vertex properties must be exactly x y z nx ny nz", line_no);
  for (int k = 0; k < 6; ++k) {
    const auto it = std::find(props.begin(), props.end(), wanted[static_cast<std::size_t>(k)]);
    if (it == props.end())
      throw UnsupportedFeature("vertex property '" + wanted[static_cast<std::size_t>(k)] + "' missing", line_no);
    slot[k] = static_cast<int>(it - props.begin());
  }

  std::vector<Vec3> pts, nrm;
  while (static_cast<long long>(pts.size()) < n_vertices) {
    if (!next()) throw FormatError("unexpected end of file: wrong vertex count", line_no);
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() != 6) throw FormatError("expected 6 vertex values", line_no);
    double v[6];
    for (int k = 0; k < 6; ++k) v[k] = parse_number(toks[static_cast<std::size_t>(k)], line_no);
    pts.emplace_back(v[slot[0]], v[slot[1]], v[slot[2]]);
    nrm.push_back(unit_normal(Vec3(v[slot[3]], v[slot[4]], v[slot[5]]), line_no, stats));
  }
  while (next()) {
    if (!split_ws(line).empty()) throw FormatError("trailing data after vertices", line_no);
  }
  return build(pts, nrm);
}

void save_ply(const PointCloud& cloud, const fs::path& path) {
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n";
  for (const char* p : {"x", "y", "z", "nx", "ny", "nz"}) out << "property double " << p << "\n";
  out << "end_header\n";
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    for (int k = 0; k < 3; ++k) out << format_double(cloud.points()(i, k)) << ' ';
    for (int k = 0; k < 3; ++k) out << format_double(cloud.normals()(i, k)) << (k == 2 ? '\n' : ' ');
  }
  write_text_file(out.str(), path);
}

PointCloud load_cloud(const fs::path& path, LoadStats* stats) {
  return lower_ext(path) == ".ply" ? load_ply(path, stats) : load_xyzn(path, stats);
}

void save_cloud(const PointCloud& cloud, const fs::path& path) {
  if (lower_ext(path) == ".ply") save_ply(cloud, path);
  else save_xyzn(cloud, path);
}

nlohmann::json transform_to_json(const RigidTransform& T) {
  std::vector<double> r;
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) r.push_back(T.rotation(i, k));
  }
  return {{"rotation", r}, {"translation", {T.translation(0), T.translation(1), T.translation(2)}}};
}

RigidTransform transform_from_json(const nlohmann::json& j) {
  try {
    const auto r = j.at("rotation").get<std::vector<double>>();
    const auto t = j.at("translation").get<std::vector<double>>();
    if (r.size() != 9 || t.size() != 3) throw FormatError("transform needs 9 rotation and 3 translation values");
    RigidTransform T;
    for (int i = 0; i < 9; ++i) T.rotation(i / 3, i % 3) = r[static_cast<std::size_t>(i)];
    for (int i = 0; i < 3; ++i) T.translation(i) = t[static_cast<std::size_t>(i)];
    if (!T.is_valid(1e-6)) throw FormatError("transform rotation is not in SO(3)");
    return T;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed transform: ") + e.what());
  }
}

nlohmann::json cloud_to_json(const PointCloud& cloud) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    arr.push_back({cloud.points()(i, 0), cloud.points()(i, 1), cloud.points()(i, 2), cloud.normals()(i, 0),
                   cloud.normals()(i, 1), cloud.normals()(i, 2)});
  }
  return arr;
}

PointCloud cloud_from_json(const nlohmann::json& j, LoadStats* stats) {
  if (!j.is_array()) throw FormatError("cloud must be an array of [x,y,z,nx,ny,nz]");
  std::vector<Vec3> pts, nrm;
  std::size_t row = 0;
  for (const auto& e : j) {
    ++row;
    if (!e.is_array() || e.size() != 6 || !std::all_of(e.begin(), e.end(), [](const auto& v) { return v.is_number(); }))
      throw FormatError("cloud row " + std::to_string(row) + " must hold 6 numbers");
    pts.emplace_back(e[0].get<double>(), e[1].get<double>(), e[2].get<double>());
    nrm.push_back(unit_normal(Vec3(e[3].get<double>(), e[4].get<double>(), e[5].get<double>()), 0, stats));
  }
  return build(pts, nrm);
}

nlohmann::json pair_to_json(const RegistrationPair& pair) {
  nlohmann::json gt = transform_to_json(pair.gt);
  return {{"format_version", kPairFormatVersion},
          {"pair_id", pair.pair_id},
          {"seed", pair.seed},
          {"gt_rotation", gt["rotation"]},
          {"gt_translation", gt["translation"]},
          {"source", cloud_to_json(pair.source)},
          {"reference", cloud_to_json(pair.reference)},
          {"source_clean", cloud_to_json(pair.source_clean)},
          {"reference_clean", cloud_to_json(pair.reference_clean)}};
}

RegistrationPair pair_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kPairFormatVersion) throw FormatError("unsupported pair format_version");
    RegistrationPair p;
    p.pair_id = j.at("pair_id").get<std::string>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.gt = transform_from_json({{"rotation", j.at("gt_rotation")}, {"translation", j.at("gt_translation")}});
    p.source = cloud_from_json(j.at("source"));
    p.reference = cloud_from_json(j.at("reference"));
    p.source_clean = cloud_from_json(j.at("source_clean"));
    p.reference_clean = cloud_from_json(j.at("reference_clean"));
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed pair file: ") + e.what());
  }
}

void save_pair(const RegistrationPair& pair, const fs::path& path) {
  write_text_file(pair_to_json(pair).dump() + "\n", path);
}

RegistrationPair load_pair(const fs::path& path) {
  try {
    return pair_from_json(read_json_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

nlohmann::json dataset_config_to_json(const DatasetConfig& cfg) {
  std::vector<std::string> kinds;
  for (PrimitiveKind k : cfg.kinds) kinds.push_back(to_string(k));
  const PairConfig& p = cfg.pair;
  return {{"mode", to_string(p.mode)},
          {"n_pairs", cfg.n_pairs},
          {"n_model", cfg.n_model},
          {"n_points", p.n_points},
          {"rot_max_deg", p.rot_max_deg},
          {"trans_max", p.trans_max},
          {"noise_sigma", p.sigma},
          {"noise_clip", p.clip},
          {"keep_ratio", p.keep_ratio},
          {"reestimate_normals", p.reestimate_normals},
          {"normal_k", p.normal_k},
          {"kinds", kinds},
          {"master_seed", cfg.master_seed}};
}

DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("dataset config must be an object");
  DatasetConfig cfg;
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
  std::string mode = to_string(cfg.pair.mode);
  std::vector<std::string> kinds;
  for (PrimitiveKind k : cfg.kinds) kinds.push_back(to_string(k));
  get("mode", mode);
  get("n_pairs", cfg.n_pairs);
  get("n_model", cfg.n_model);
  get("n_points", cfg.pair.n_points);
  get("rot_max_deg", cfg.pair.rot_max_deg);
  get("trans_max", cfg.pair.trans_max);
  get("noise_sigma", cfg.pair.sigma);
  get("noise_clip", cfg.pair.clip);
  get("keep_ratio", cfg.pair.keep_ratio);
  get("reestimate_normals", cfg.pair.reestimate_normals);
  get("normal_k", cfg.pair.normal_k);
  get("kinds", kinds);
  get("master_seed", cfg.master_seed);
  for (const auto& [k, v] : j.items()) {
    if (!seen.count(k)) throw ConfigError("unknown dataset key '" + k + "'");
  }
  cfg.pair.mode = parse_mode(mode);
  cfg.kinds.clear();
  for (const auto& k : kinds) cfg.kinds.push_back(parse_primitive(k));
  if (cfg.kinds.empty()) throw ConfigError("kinds must not be empty");
  if (cfg.n_pairs < 1) throw ConfigError("n_pairs must be >= 1");
  if (cfg.n_model < 16) throw ConfigError("n_model must be >= 16");
  if (cfg.pair.n_points < 3) throw ConfigError("n_points must be >= 3");
  if (!(cfg.pair.rot_max_deg > 0.0 && cfg.pair.rot_max_deg < 180.0)) throw ConfigError("rot_max_deg must be in (0, 180)");
  if (!(cfg.pair.trans_max > 0.0)) throw ConfigError("trans_max must be positive");
  if (!(cfg.pair.sigma > 0.0) || !(cfg.pair.clip > 0.0)) throw ConfigError("noise sigma and clip must be positive");
  if (!(cfg.pair.keep_ratio > 0.0 && cfg.pair.keep_ratio <= 1.0)) throw ConfigError("keep_ratio must be in (0, 1]");
  if (cfg.pair.normal_k < 3) throw ConfigError("normal_k must be >= 3");
  return cfg;
}

nlohmann::json manifest_to_json(const DatasetManifest& m) {
  return {{"format_version", DatasetManifest::kFormatVersion},
          {"generation", dataset_config_to_json(m.config)},
          {"pairs", m.pair_files}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != DatasetManifest::kFormatVersion)
      throw FormatError("unsupported manifest format_version");
    DatasetManifest m;
    m.config = dataset_config_from_json(j.at("generation"));
    m.pair_files = j.at("pairs").get<std::vector<std::string>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
}

void save_manifest(const DatasetManifest& m, const fs::path& path) { write_json_file(manifest_to_json(m), path); }

DatasetManifest load_manifest(const fs::path& path) { return manifest_from_json(read_json_file(path)); }

std::vector<RegistrationPair> load_dataset(const fs::path& manifest_path) {
  const DatasetManifest m = load_manifest(manifest_path);
  std::vector<RegistrationPair> pairs;
  pairs.reserve(m.pair_files.size());
  for (const auto& f : m.pair_files) pairs.push_back(load_pair(manifest_path.parent_path() / f));
  return pairs;
}

DatasetManifest synthesize_dataset(const DatasetConfig& cfg, const fs::path& dir, int jobs) {
  fs::create_directories(dir);
  DatasetManifest m;
  m.config = cfg;
  const auto n = static_cast<std::size_t>(cfg.n_pairs);
  for (std::size_t i = 0; i < n; ++i) m.pair_files.push_back(pair_file_name(i));

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        save_pair(synthesize_pair(cfg, i), dir / m.pair_files[i]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  save_manifest(m, dir / "manifest.json");
  return m;
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in = open_in(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
}

void write_json_file(const nlohmann::json& j, const fs::path& path) { write_text_file(j.dump(2) + "\n", path); }

void write_text_file(const std::string& text, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace rpm_align
