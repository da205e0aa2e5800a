#include "doctest.h"
#include "test_util.hpp"

#include "rpm_align/errors.hpp"
#include "rpm_align/io.hpp"
#include "rpm_align/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace rpm_align;
using namespace rpm_align::testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("rpm_align_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& f) const { return path / f; }
};

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Coordinates with awkward binary expansions.
PointCloud awkward_cloud(Rng& rng, Eigen::Index n) {
  PointCloud c = random_cloud(rng, n);
  Points p = c.points();
  p(0, 0) = 0.1;
  p(0, 1) = 1.0 / 3.0;
  p(0, 2) = -5e-300;
  p(1, 0) = 1e300;
  return PointCloud(std::move(p), c.normals());
}

// Key-level conformance to the committed schema: required keys present, no
// undeclared keys where the schema forbids them, recursing through $ref.
void check_keys(const nlohmann::json& doc, const nlohmann::json& node, const nlohmann::json& root, const std::string& at) {
  if (node.contains("$ref")) {
    const std::string ref = node.at("$ref");
    return check_keys(doc, root.at(nlohmann::json::json_pointer(ref.substr(1))), root, at);
  }
  if (doc.is_array() && node.contains("items"))
    for (const auto& item : doc) check_keys(item, node.at("items"), root, at + "[]");
  if (!doc.is_object()) return;
  for (const auto& r : node.value("required", nlohmann::json::array())) {
    const std::string where = at;
    INFO(where);
    CHECK(doc.contains(r.get<std::string>()));
  }
  const nlohmann::json props = node.value("properties", nlohmann::json::object());
  for (const auto& [key, value] : doc.items()) {
    if (props.contains(key)) {
      check_keys(value, props.at(key), root, at + "." + key);
    } else if (node.contains("additionalProperties") && node.at("additionalProperties").is_object()) {
      check_keys(value, node.at("additionalProperties"), root, at + "." + key);
    } else {
      const std::string where = at + "." + key;
      INFO(where);
      CHECK(node.value("additionalProperties", true) != false);
    }
  }
}

void check_schema(const nlohmann::json& doc, const std::string& name) {
  const nlohmann::json schema = read_json_file(fs::path(RPM_ALIGN_SOURCE_DIR) / "schema" / (name + ".schema.json"));
  check_keys(doc, schema, schema, name);
}

}  // namespace

TEST_CASE("format_double round trips") {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double v = rng.normal() * std::pow(10.0, rng.uniform(-30, 30));
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1.0) == "1");
}

TEST_CASE("xyzn and ply round trips are bitwise") {
  TempDir dir("roundtrip");
  Rng rng(2);
  const PointCloud c = awkward_cloud(rng, 50);
  for (const char* name : {"a.xyzn", "a.ply", "a.xyz", "a.txt"}) {
    save_cloud(c, dir / name);
    LoadStats st;
    const PointCloud back = load_cloud(dir / name, &st);
    CHECK(back.points() == c.points());
    CHECK(back.normals() == c.normals());
    CHECK(st.normalized_normals == 0);
  }
  CHECK_THROWS_AS(load_cloud(dir / "a.obj"), Error);
  CHECK_THROWS_AS(load_cloud(dir / "missing.xyzn"), Error);
}

TEST_CASE("xyzn parsing") {
  TempDir dir("xyzn");
  write(dir / "ok.xyzn", "# header\n\n0 0 0 0 0 2\n1 2 3 0 1 0\n  # indented comment\n4 5 6 3 0 4\n");
  LoadStats st;
  const PointCloud c = load_xyzn(dir / "ok.xyzn", &st);
  CHECK(c.size() == 3);
  CHECK(st.normalized_normals == 2);
  CHECK(c.normals()(0, 2) == 1.0);
  CHECK(c.normals()(2, 0) == doctest::Approx(0.6));
  CHECK(c.normals()(2, 2) == doctest::Approx(0.8));

  write(dir / "short.xyzn", "0 0 0 0 0 1\n1 2 3 0 1\n");
  try {
    load_xyzn(dir / "short.xyzn");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.line() == 2);
  }
  write(dir / "bad.xyzn", "0 0 0 0 0 1\n0 0 0 0 0 1\n1 2 x 0 1 0\n");
  try {
    load_xyzn(dir / "bad.xyzn");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.line() == 3);
  }
  write(dir / "zero.xyzn", "0 0 0 0 0 0\n");
  CHECK_THROWS_AS(load_xyzn(dir / "zero.xyzn"), FormatError);
  write(dir / "empty.xyzn", "# nothing\n");
  CHECK_THROWS_AS(load_xyzn(dir / "empty.xyzn"), FormatError);
  write(dir / "nan.xyzn", "nan 0 0 0 0 1\n");
  CHECK_THROWS_AS(load_xyzn(dir / "nan.xyzn"), FormatError);
}

TEST_CASE("ply parsing") {
  TempDir dir("ply");
  const std::string head = "ply\nformat ascii 1.0\nelement vertex 2\n";
  const std::string props =
      "property float x\nproperty float y\nproperty float z\n"
      "property double nx\nproperty double ny\nproperty double nz\n";
  write(dir / "ok.ply", head + "comment hi\n" + props + "end_header\n0 0 0 0 0 1\n1 1 1 0 2 0\n");
  LoadStats st;
  CHECK(load_ply(dir / "ok.ply", &st).size() == 2);
  CHECK(st.normalized_normals == 1);

  write(dir / "face.ply", head + props + "element face 1\nproperty list uchar int vertex_indices\nend_header\n");
  try {
    load_ply(dir / "face.ply");
    FAIL("expected UnsupportedFeature");
  } catch (const UnsupportedFeature& e) {
    CHECK(e.line() == 10);
  }
  write(dir / "bin.ply", "ply\nformat binary_little_endian 1.0\nelement vertex 1\n" + props + "end_header\n");
  CHECK_THROWS_AS(load_ply(dir / "bin.ply"), UnsupportedFeature);
  write(dir / "rgb.ply", head + props + "property uchar red\nend_header\n");
  CHECK_THROWS_AS(load_ply(dir / "rgb.ply"), UnsupportedFeature);
  write(dir / "int.ply", head + "property int x\nend_header\n");
  CHECK_THROWS_AS(load_ply(dir / "int.ply"), UnsupportedFeature);
  write(dir / "few.ply", head + props + "end_header\n0 0 0 0 0 1\n");
  CHECK_THROWS_AS(load_ply(dir / "few.ply"), FormatError);
  write(dir / "many.ply", head + props + "end_header\n0 0 0 0 0 1\n0 0 0 0 0 1\n0 0 0 0 0 1\n");
  CHECK_THROWS_AS(load_ply(dir / "many.ply"), FormatError);
  write(dir / "magic.ply", "plx\n");
  CHECK_THROWS_AS(load_ply(dir / "magic.ply"), FormatError);
  write(dir / "noend.ply", head + props);
  CHECK_THROWS_AS(load_ply(dir / "noend.ply"), FormatError);
}

TEST_CASE("pair and transform json") {
  TempDir dir("pair");
  Rng rng(3);
  RegistrationPair p;
  p.source = awkward_cloud(rng, 20);
  p.reference = random_cloud(rng, 25);
  p.source_clean = random_cloud(rng, 30);
  p.reference_clean = random_cloud(rng, 30);
  p.gt = random_transform(rng);
  p.pair_id = "pair_x";
  p.seed = 0xffffffffffffffffULL;
  save_pair(p, dir / "p.json");
  const RegistrationPair q = load_pair(dir / "p.json");
  CHECK(q.source.points() == p.source.points());
  CHECK(q.reference.normals() == p.reference.normals());
  CHECK(q.reference_clean.points() == p.reference_clean.points());
  CHECK(q.gt.rotation == p.gt.rotation);
  CHECK(q.gt.translation == p.gt.translation);
  CHECK(q.pair_id == p.pair_id);
  CHECK(q.seed == p.seed);

  const nlohmann::json j = pair_to_json(p);
  CHECK(j.at("format_version") == kPairFormatVersion);
  CHECK(j.at("gt_rotation").size() == 9);
  CHECK(j.at("gt_rotation")[1].get<double>() == p.gt.rotation(0, 1));

  nlohmann::json bad = j;
  bad["format_version"] = 99;
  CHECK_THROWS_AS(pair_from_json(bad), FormatError);
  nlohmann::json improper = transform_to_json(p.gt);
  improper["rotation"][0] = 2.0;
  CHECK_THROWS_AS(transform_from_json(improper), FormatError);

  write(dir / "broken.json", "{\"a\": [1, 2,, 3]}");
  try {
    read_json_file(dir / "broken.json");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte 13") != std::string::npos);
  }
}

TEST_CASE("dataset config and manifest") {
  DatasetConfig cfg;
  cfg.pair.mode = PairMode::kPartial;
  cfg.pair.n_points = 64;
  cfg.pair.sigma = 0.02;
  cfg.n_model = 128;
  cfg.n_pairs = 5;
  cfg.kinds = {PrimitiveKind::kBox};
  cfg.master_seed = 77;
  CHECK(dataset_config_to_json(dataset_config_from_json(dataset_config_to_json(cfg))) == dataset_config_to_json(cfg));
  CHECK(dataset_config_from_json(nlohmann::json::object()).n_pairs == DatasetConfig{}.n_pairs);
  CHECK_THROWS_AS(dataset_config_from_json({{"colour", "red"}}), ConfigError);
  CHECK_THROWS_AS(dataset_config_from_json({{"mode", "dirty"}}), ConfigError);

  TempDir a("manifest_a"), b("manifest_b");
  const DatasetManifest m = synthesize_dataset(cfg, a.path, 1);
  CHECK(m.pair_files.size() == 5);
  synthesize_dataset(cfg, b.path, 3);
  for (const auto& f : m.pair_files) CHECK(slurp(a / f) == slurp(b / f));
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));

  const DatasetManifest back = load_manifest(a / "manifest.json");
  CHECK(back.pair_files == m.pair_files);
  CHECK(dataset_config_to_json(back.config) == dataset_config_to_json(cfg));

  // Regenerating from the loaded manifest reproduces the files byte-for-byte.
  TempDir c("manifest_c");
  synthesize_dataset(back.config, c.path, 2);
  for (const auto& f : m.pair_files) CHECK(slurp(a / f) == slurp(c / f));

  const auto pairs = load_dataset(a / "manifest.json");
  REQUIRE(pairs.size() == 5);
  CHECK(pairs[2].source.points() == synthesize_pair(cfg, 2).source.points());

  write(a / "bad_manifest.json", "{\"format_version\": 1}");
  CHECK_THROWS_AS(load_manifest(a / "bad_manifest.json"), Error);
}

TEST_CASE("documents follow the committed schemas") {
  TempDir dir("schema");
  DatasetConfig cfg;
  cfg.pair.mode = PairMode::kNoisy;
  cfg.pair.n_points = 32;
  cfg.n_model = 64;
  cfg.n_pairs = 2;
  const DatasetManifest m = synthesize_dataset(cfg, dir.path, 1);
  check_schema(read_json_file(dir / "manifest.json"), "manifest");
  check_schema(read_json_file(dir / m.pair_files[0]), "pair");

  Checkpoint c;
  c.arch.features.pre_widths = {8};
  c.arch.features.post_widths = {8};
  c.arch.param_net.pre_widths = {4};
  c.arch.param_net.head_widths = {4, 2};
  c.params = init_params(c.arch, 1);
  c.adam = nn::AdamState::zeros_like(c.params);
  c.training = {{"epochs_done", 0}};
  check_schema(checkpoint_to_json(c), "checkpoint");
}
