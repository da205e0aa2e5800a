// rpm_align: dataset synthesis, registration, training, evaluation and
// gradient checks from the command line.
//
// Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.

#include "rpm_align/errors.hpp"
#include "rpm_align/evaluation.hpp"
#include "rpm_align/gradcheck_suites.hpp"
#include "rpm_align/io.hpp"
#include "rpm_align/runtime.hpp"
#include "rpm_align/train.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rpm_align;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

int default_jobs() {
  if (const char* env = std::getenv("RPM_ALIGN_JOBS")) {
    try {
      const int v = std::stoi(env);
      if (v >= 1) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("RPM_ALIGN_JOBS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j;
  try {
    j = read_json_file(path);
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  return j;
}

/// Section `key` of a config file, or an empty object.
json section(const json& cfg, const char* key) { return cfg.contains(key) ? cfg.at(key) : json::object(); }

void echo_config(const json& resolved, const fs::path& out_dir) {
  write_json_file(resolved, out_dir / "config.resolved.json");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

json result_to_json(const RegistrationResult& r) {
  json iters = json::array();
  for (const auto& it : r.per_iteration) {
    iters.push_back({{"transform", transform_to_json(it.transform)},
                     {"alpha", it.anneal.alpha},
                     {"beta", it.anneal.beta},
                     {"inlier_mass", it.inlier_mass}});
  }
  return {{"transform", transform_to_json(r.final_transform)},
          {"per_iteration", iters},
          {"converged", r.converged},
          {"iterations_run", r.iterations_run}};
}

json metrics_to_json(const MetricsReport& m) {
  return {{"aniso_rot", m.aniso_rot_deg}, {"aniso_trans", m.aniso_trans}, {"iso_rot", m.iso_rot_deg},
          {"iso_trans", m.iso_trans},     {"chamfer_mod", m.chamfer_mod},  {"gimbal_lock", m.gimbal_lock}};
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string config, out, mode, kinds;
  int pairs = 0, n_points = 0, n_model = 0, normal_k = 0;
  std::uint64_t seed = 0;
  double rot_max = 0, trans_max = 0, sigma = 0, clip = 0, keep = 0;
  bool pass_normals = false;
  int jobs = 1;
};

int cmd_synth(const SynthArgs& a, const CLI::App& app) {
  json cfg = section(load_config(a.config), "dataset");
  auto given = [&](const char* name) { return app.count(name) > 0; };
  if (given("--mode")) cfg["mode"] = a.mode;
  if (given("--pairs")) cfg["n_pairs"] = a.pairs;
  if (given("--seed")) cfg["master_seed"] = a.seed;
  if (given("--n-points")) cfg["n_points"] = a.n_points;
  if (given("--n-model")) cfg["n_model"] = a.n_model;
  if (given("--kinds")) cfg["kinds"] = split_list(a.kinds);
  if (given("--rot-max")) cfg["rot_max_deg"] = a.rot_max;
  if (given("--trans-max")) cfg["trans_max"] = a.trans_max;
  if (given("--sigma")) cfg["noise_sigma"] = a.sigma;
  if (given("--clip")) cfg["noise_clip"] = a.clip;
  if (given("--keep")) cfg["keep_ratio"] = a.keep;
  if (given("--normal-k")) cfg["normal_k"] = a.normal_k;
  if (a.pass_normals) cfg["reestimate_normals"] = false;
  const DatasetConfig dc = dataset_config_from_json(cfg);
  const fs::path out(a.out);
  fs::create_directories(out);
  echo_config({{"command", "synth"}, {"dataset", dataset_config_to_json(dc)}, {"jobs", a.jobs}}, out);
  const DatasetManifest m = synthesize_dataset(dc, out, a.jobs);
  std::cout << "wrote " << m.pair_files.size() << " pairs and " << (out / "manifest.json").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// register / eval shared method setup

struct MethodArgs {
  std::string checkpoint, config;
  int iters = 5;
  int icp_max_iters = 100;
};

MethodConfig make_method(Method m, const MethodArgs& a, const json& cfg, const CLI::App& app) {
  MethodConfig mc;
  mc.method = m;
  const json rpm = section(cfg, "rpm");
  try {
    mc.rpm.alpha = rpm.value("alpha", mc.rpm.alpha);
    mc.rpm.beta0 = rpm.value("beta0", mc.rpm.beta0);
    mc.rpm.rate = rpm.value("rate", mc.rpm.rate);
    mc.rpm.n_outer = rpm.value("n_outer", mc.rpm.n_outer);
    mc.rpm.sinkhorn_iters = rpm.value("sinkhorn_iters", mc.rpm.sinkhorn_iters);
    mc.rpm.slack = rpm.value("slack", mc.rpm.slack);
    const json ic = section(cfg, "icp");
    mc.icp.max_iters = ic.value("max_iters", mc.icp.max_iters);
    mc.icp.tol_deg = ic.value("tol_deg", mc.icp.tol_deg);
    const json rn = section(cfg, "rpmnet");
    mc.rpmnet_iters = rn.value("iters", mc.rpmnet_iters);
    mc.rpmnet.sinkhorn_iters = rn.value("sinkhorn_iters", mc.rpmnet.sinkhorn_iters);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (app.count("--iters")) {
    mc.rpmnet_iters = a.iters;
    mc.rpm.n_outer = a.iters;
  }
  if (app.count("--icp-max-iters")) mc.icp.max_iters = a.icp_max_iters;
  if (mc.rpmnet_iters < 1 || mc.rpm.n_outer < 1 || mc.icp.max_iters < 1) throw ConfigError("iteration counts must be >= 1");
  if (m == Method::kRpmNet) {
    if (a.checkpoint.empty()) throw ConfigError("method rpmnet requires --checkpoint");
    mc.checkpoint = std::make_shared<const Checkpoint>(load_checkpoint(a.checkpoint));
    mc.rpmnet.sinkhorn_iters = mc.rpmnet.sinkhorn_iters;
  }
  return mc;
}

json method_config_json(const MethodConfig& mc, const std::string& checkpoint) {
  return {{"method", to_string(mc.method)},
          {"rpm",
           {{"alpha", mc.rpm.alpha},
            {"beta0", mc.rpm.beta0},
            {"rate", mc.rpm.rate},
            {"n_outer", mc.rpm.n_outer},
            {"sinkhorn_iters", mc.rpm.sinkhorn_iters},
            {"slack", mc.rpm.slack}}},
          {"icp", {{"max_iters", mc.icp.max_iters}, {"tol_deg", mc.icp.tol_deg}}},
          {"rpmnet", {{"iters", mc.rpmnet_iters}, {"sinkhorn_iters", mc.rpmnet.sinkhorn_iters}}},
          {"checkpoint", checkpoint}};
}

struct RegisterArgs : MethodArgs {
  std::string method, pair, out;
};

int cmd_register(const RegisterArgs& a, const CLI::App& app) {
  const Method m = parse_method(a.method);
  if (m == Method::kGroundTruth || m == Method::kIdentity) throw ConfigError("register supports icp, rpm and rpmnet");
  const json cfg = load_config(a.config);
  const MethodConfig mc = make_method(m, a, cfg, app);
  const fs::path out(a.out);
  fs::create_directories(out);
  echo_config({{"command", "register"}, {"pair", a.pair}, {"method_config", method_config_json(mc, a.checkpoint)}},
              out);
  const RegistrationPair pair = load_pair(a.pair);
  json result = {{"method", a.method}, {"pair_id", pair.pair_id}};
  try {
    const RegistrationResult r = run_method(mc, pair);
    result.update(result_to_json(r));
    result["metrics"] = metrics_to_json(pair_metrics(pair, r.final_transform));
  } catch (const SolverError& e) {
    result["error"] = e.what();
    result["iteration"] = e.iteration();
    write_json_file(result, out / "result.json");
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  write_json_file(result, out / "result.json");
  std::cout << "wrote " << (out / "result.json").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string manifest, val, config, out, resume;
  int epochs = 0, n_iter_train = 0, n_iter_eval = 0, sinkhorn = 0;
  double lr = 0, lambda = 0;
  std::uint64_t seed = 0;
  bool no_xc = false, no_dx = false, no_ppf = false, fixed_annealing = false;
};

int cmd_train(const TrainArgs& a, const CLI::App& app) {
  json cfg = section(load_config(a.config), "train");
  auto given = [&](const char* name) { return app.count(name) > 0; };
  if (given("--epochs")) cfg["epochs"] = a.epochs;
  if (given("--lr")) cfg["lr"] = a.lr;
  if (given("--lambda")) cfg["lambda"] = a.lambda;
  if (given("--seed")) cfg["seed"] = a.seed;
  if (given("--n-iter-train")) cfg["n_iter_train"] = a.n_iter_train;
  if (given("--n-iter-eval")) cfg["n_iter_eval"] = a.n_iter_eval;
  if (given("--sinkhorn-iters")) cfg["sinkhorn_iters"] = a.sinkhorn;
  TrainConfig tc = train_config_from_json(cfg);
  if (a.no_xc) tc.arch.features.use_xc = false;
  if (a.no_dx) tc.arch.features.use_dx = false;
  if (a.no_ppf) tc.arch.features.use_ppf = false;
  if (a.fixed_annealing) tc.arch.param_net.learned_annealing = false;
  tc.validate();

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    if (!resume->adam) throw ConfigError("resume checkpoint has no adam_state");
  }

  const DatasetManifest manifest = load_manifest(a.manifest);
  if (manifest.pair_files.empty()) throw ConfigError("manifest lists no pairs");
  const std::vector<RegistrationPair> data = load_dataset(a.manifest);
  std::vector<RegistrationPair> val;
  if (!a.val.empty()) val = load_dataset(a.val);

  const fs::path out(a.out);
  fs::create_directories(out);
  echo_config({{"command", "train"},
               {"manifest", a.manifest},
               {"val", a.val},
               {"resume", a.resume},
               {"train", train_config_to_json(tc)}},
              out);

  const fs::path log_path = out / "train.log.jsonl";
  // On resume keep the records of completed epochs and continue the file.
  std::string kept;
  if (resume && fs::exists(log_path)) {
    const int done = resume->training.value("epochs_done", 0);
    std::ifstream in(log_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (json::parse(line).value("epoch", 0) <= done) kept += line + "\n";
    }
  }
  write_text_file(kept, log_path);

  const auto on_epoch = [&](const EpochLog& log, const Checkpoint& ckpt) {
    std::ofstream(log_path, std::ios::app) << epoch_log_to_json(log).dump() << "\n";
    save_checkpoint(ckpt, out / "checkpoint.json");
    std::cout << "epoch " << log.epoch << " l_reg " << log.mean_l_reg << " val_iso_rot " << log.val_iso_rot_deg
              << " val_chamfer " << log.val_chamfer << std::endl;
  };
  try {
    const Checkpoint ckpt = train(data, val, tc, resume, on_epoch);
    save_checkpoint(ckpt, out / "checkpoint.json");
  } catch (const NonFiniteLoss& e) {
    const fs::path snap = out / "nonfinite_snapshot.json";
    write_json_file(e.snapshot(), snap);
    std::cerr << "error: " << e.what() << " (snapshot: " << snap.string() << ")\n";
    return kExitRuntime;
  }
  std::cout << "wrote " << (out / "checkpoint.json").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs : MethodArgs {
  std::string manifest, methods, out;
  int jobs = 1;
};

int cmd_eval(const EvalArgs& a, const CLI::App& app) {
  const json cfg = load_config(a.config);
  std::vector<Method> methods;
  for (const auto& name : split_list(a.methods)) methods.push_back(parse_method(name));
  if (methods.empty()) throw ConfigError("--methods lists no methods");
  std::vector<MethodConfig> configs;
  json echo = json::array();
  for (Method m : methods) {
    configs.push_back(make_method(m, a, cfg, app));
    echo.push_back(method_config_json(configs.back(), a.checkpoint));
  }
  const DatasetManifest manifest = load_manifest(a.manifest);
  if (manifest.pair_files.empty()) throw ConfigError("manifest lists no pairs");
  const std::vector<RegistrationPair> pairs = load_dataset(a.manifest);

  const fs::path out(a.out);
  fs::create_directories(out);
  echo_config({{"command", "eval"}, {"manifest", a.manifest}, {"methods", echo}, {"jobs", a.jobs}}, out);

  std::ostringstream csv, detail;
  csv << "method,aniso_rot,aniso_trans,iso_rot,iso_trans,chamfer_mod\n";
  detail << "method,pair_id,aniso_rot,aniso_trans,iso_rot,iso_trans,chamfer_mod,initial_angle,failed\n";
  json summary = json::array();
  for (const MethodConfig& mc : configs) {
    const std::string name = to_string(mc.method);
    const std::vector<PairEvaluation> evals = evaluate_pairs(pairs, mc, a.jobs);
    const MethodSummary s = summarize(name, evals);
    csv << name << ',' << format_double(s.mean.aniso_rot_deg) << ',' << format_double(s.mean.aniso_trans) << ','
        << format_double(s.mean.iso_rot_deg) << ',' << format_double(s.mean.iso_trans) << ','
        << format_double(s.mean.chamfer_mod) << "\n";
    for (const auto& e : evals) {
      detail << name << ',' << e.pair_id << ',' << format_double(e.metrics.aniso_rot_deg) << ','
             << format_double(e.metrics.aniso_trans) << ',' << format_double(e.metrics.iso_rot_deg) << ','
             << format_double(e.metrics.iso_trans) << ',' << format_double(e.metrics.chamfer_mod) << ','
             << format_double(e.initial_angle_deg) << ',' << (e.failed ? 1 : 0) << "\n";
    }
    summary.push_back({{"method", name},
                       {"pairs", s.pairs},
                       {"failures", s.failures},
                       {"mean", metrics_to_json(s.mean)},
                       {"mean_initial_angle", s.mean_initial_angle_deg},
                       {"mean_chamfer_per_iteration", s.mean_chamfer_per_iteration}});
  }
  write_text_file(csv.str(), out / "metrics.csv");
  write_text_file(detail.str(), out / "pairs.csv");
  write_json_file({{"manifest", a.manifest}, {"methods", summary}}, out / "metrics.json");
  std::cout << csv.str();
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(const std::string& scope, int seeds, const std::string& out) {
  const std::vector<GradSuiteResult> results = run_gradcheck(scope, seeds);
  bool ok = true;
  json report = json::array();
  for (const auto& r : results) {
    ok = ok && r.passed();
    std::cout << (r.passed() ? "PASS " : "FAIL ") << r.name << " cases=" << r.cases << " entries=" << r.entries
              << " refined=" << r.refined << " max_rel_error=" << r.max_rel_error << " worst=" << r.worst << "\n";
    report.push_back({{"name", r.name},
                      {"cases", r.cases},
                      {"entries", r.entries},
                      {"refined", r.refined},
                      {"max_rel_error", r.max_rel_error},
                      {"worst", r.worst},
                      {"passed", r.passed()}});
  }
  if (!out.empty()) {
    fs::create_directories(out);
    echo_config({{"command", "gradcheck"}, {"scope", scope}, {"seeds", seeds}, {"tolerance", kGradCheckTolerance}},
                out);
    write_json_file({{"suites", report}, {"passed", ok}}, fs::path(out) / "result.json");
  }
  return ok ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rigid point-cloud registration: RPM-Net, classical RPM and ICP"};
  app.require_subcommand(1);
  tune_allocator();

  int jobs = 1;
  SynthArgs synth;
  RegisterArgs reg;
  TrainArgs tr;
  EvalArgs ev;
  std::string gc_scope, gc_out;
  int gc_seeds = 50;

  try {
    jobs = default_jobs();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  auto* s = app.add_subcommand("synth", "generate a synthetic registration dataset");
  s->add_option("--config", synth.config, "JSON config file (section \"dataset\")");
  s->add_option("-o,--out", synth.out, "output directory")->required();
  s->add_option("--mode", synth.mode, "clean, noisy or partial");
  s->add_option("--pairs", synth.pairs, "number of pairs");
  s->add_option("--seed", synth.seed, "master seed");
  s->add_option("--n-points", synth.n_points, "points sampled per cloud before cropping");
  s->add_option("--n-model", synth.n_model, "points in the clean model");
  s->add_option("--kinds", synth.kinds, "comma-separated primitives: sphere,box,cylinder,two_lobe");
  s->add_option("--rot-max", synth.rot_max, "max Euler angle in degrees");
  s->add_option("--trans-max", synth.trans_max, "max translation per axis");
  s->add_option("--sigma", synth.sigma, "noise standard deviation");
  s->add_option("--clip", synth.clip, "noise clip per axis");
  s->add_option("--keep", synth.keep, "partial keep ratio");
  s->add_option("--normal-k", synth.normal_k, "neighbors for normal re-estimation");
  s->add_flag("--pass-normals", synth.pass_normals, "keep analytic normals in noisy modes");
  s->add_option("--jobs", jobs, "worker threads (default: RPM_ALIGN_JOBS or 1)");

  auto* r = app.add_subcommand("register", "register one pair");
  r->add_option("--method", reg.method, "icp, rpm or rpmnet")->required();
  r->add_option("--pair", reg.pair, "pair JSON file")->required();
  r->add_option("--checkpoint", reg.checkpoint, "checkpoint JSON (rpmnet)");
  r->add_option("--iters", reg.iters, "outer iterations (rpmnet, rpm)");
  r->add_option("--icp-max-iters", reg.icp_max_iters, "ICP iteration cap");
  r->add_option("--config", reg.config, "JSON config file (sections rpm, icp, rpmnet)");
  r->add_option("-o,--out", reg.out, "output directory")->required();

  auto* t = app.add_subcommand("train", "train RPM-Net");
  t->add_option("--manifest", tr.manifest, "training manifest")->required();
  t->add_option("--val", tr.val, "validation manifest");
  t->add_option("--config", tr.config, "JSON config file (section \"train\")");
  t->add_option("-o,--out", tr.out, "output directory")->required();
  t->add_option("--resume", tr.resume, "checkpoint with adam_state to resume from");
  t->add_option("--epochs", tr.epochs, "epochs");
  t->add_option("--lr", tr.lr, "Adam learning rate");
  t->add_option("--lambda", tr.lambda, "inlier loss weight");
  t->add_option("--seed", tr.seed, "seed");
  t->add_option("--n-iter-train", tr.n_iter_train, "outer iterations per training step");
  t->add_option("--n-iter-eval", tr.n_iter_eval, "outer iterations for validation");
  t->add_option("--sinkhorn-iters", tr.sinkhorn, "unrolled Sinkhorn iterations");
  t->add_flag("--no-xc", tr.no_xc, "ablation: drop the absolute position channel");
  t->add_flag("--no-dx", tr.no_dx, "ablation: drop the neighbor offset channel");
  t->add_flag("--no-ppf", tr.no_ppf, "ablation: drop the point pair feature channel");
  t->add_flag("--fixed-annealing", tr.fixed_annealing, "ablation: learn alpha, beta as free scalars");

  auto* e = app.add_subcommand("eval", "evaluate methods on a dataset");
  e->add_option("--manifest", ev.manifest, "dataset manifest")->required();
  e->add_option("--methods", ev.methods, "comma-separated: icp,rpm,rpmnet,gt,identity")->required();
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint JSON (rpmnet)");
  e->add_option("--iters", ev.iters, "outer iterations (rpmnet, rpm)");
  e->add_option("--icp-max-iters", ev.icp_max_iters, "ICP iteration cap");
  e->add_option("--config", ev.config, "JSON config file (sections rpm, icp, rpmnet)");
  e->add_option("-o,--out", ev.out, "output directory")->required();
  e->add_option("--jobs", jobs, "worker threads (default: RPM_ALIGN_JOBS or 1)");

  auto* g = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  g->add_option("scope", gc_scope, "layers, procrustes, full or all")->required();
  g->add_option("--seeds", gc_seeds, "seeds per case");
  g->add_option("-o,--out", gc_out, "optional output directory for result.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (jobs < 1) throw ConfigError("--jobs must be >= 1");
    if (s->parsed()) {
      synth.jobs = jobs;
      return cmd_synth(synth, *s);
    }
    if (r->parsed()) return cmd_register(reg, *r);
    if (t->parsed()) return cmd_train(tr, *t);
    if (e->parsed()) {
      ev.jobs = jobs;
      return cmd_eval(ev, *e);
    }
    if (g->parsed()) {
      if (gc_seeds < 1) throw ConfigError("--seeds must be >= 1");
      return cmd_gradcheck(gc_scope, gc_seeds, gc_out);
    }
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
