#pragma once

// Command-line front end. `run_cli` is the whole program; tools/mgslab.cpp only forwards argv.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mgslab/config.hpp"
#include "mgslab/container.hpp"
#include "mgslab/datasets.hpp"
#include "mgslab/trainer.hpp"

#ifndef MGSLAB_DEFAULTS_FILE
#define MGSLAB_DEFAULTS_FILE "config/tuned_defaults.conf"
#endif
#ifndef MGSLAB_DATA_DIR
#define MGSLAB_DATA_DIR "data/mnist5k"
#endif

namespace mgslab::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { ok = 0, failure = 1, config_error = 2, numerical_abort = 3 };

struct Key {
  const char* name;
  const char* fallback;
  const char* help;
};

// Every setting accepted on the command line or in a config file.
inline const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      {"dataset", "two-circles", "two-circles | mnist | regression"},
      {"arch", "fcn", "fcn | lenet"},
      {"regulariser", "none", "none | weight | dropout | lossgrad-param | lossgrad-input | mgs-trace | mgs-logdet"},
      {"alpha", "", "penalty factor (dropout: rate); empty = tuned default"},
      {"train-size", "400", "number of training points"},
      {"test-size", "0", "number of test points (0 = dataset default)"},
      {"label-noise", "0", "fraction of training labels flipped"},
      {"epochs", "1", "training epochs"},
      {"batch-size", "32", "mini-batch size"},
      {"lr", "0.1", "initial learning rate"},
      {"lr-decay", "0.99", "learning-rate factor per epoch"},
      {"seed", "", "run seed (fallback: MGSLAB_SEED, then 0)"},
      {"metric-samples", "100", "metric rows per run"},
      {"width", "300", "fcn hidden width"},
      {"layers", "6", "fcn hidden layers"},
      {"noise-std", "0.08", "two-circles point noise"},
      {"radius-inner", "0.5", "two-circles inner radius"},
      {"radius-outer", "1.0", "two-circles outer radius"},
      {"blur-length", "5", "mnist motion-blur length (1 = off)"},
      {"blur-angle", "45", "mnist motion-blur angle in degrees"},
      {"data-dir", MGSLAB_DATA_DIR, "directory with IDX files"},
      {"regression-dim", "8", "regression input dimension"},
      {"regression-outputs", "3", "regression output dimension"},
      {"regression-noise", "0.1", "regression target noise scale"},
      {"probe-batch", "0", "fixed probe batch size for kernel metrics (0 = current batch)"},
      {"rank-tol", "1e-10", "relative eigenvalue floor for log-determinants"},
      {"runs", "3", "runs per scenario (bench, sweep, tune)"},
      {"scenarios", "", "bench scenarios: size:noise:regulariser[:alpha],..."},
      {"methods", "", "sweep methods: regulariser[:alpha],..."},
      {"axes", "", "sweep axes: axis=v1,v2;axis=v1"},
      {"grid", "", "tune grid: v1,v2,..."},
  };
  return k;
}

inline Settings default_settings() {
  Settings s;
  for (const auto& k : keys()) s[k.name] = k.fallback;
  return s;
}

// ---------------------------------------------------------------------------
// Data

struct DataSpec {
  std::string dataset;
  std::size_t test_size = 0;
  double noise_std = 0.08, radius_inner = 0.5, radius_outer = 1.0;
  std::size_t blur_length = 5;
  double blur_angle = 45.0;
  std::string data_dir;
  std::size_t reg_dim = 8, reg_outputs = 3;
  double reg_noise = 0.1;
};

inline DataSpec data_spec(const ResolvedSettings& s) {
  DataSpec d;
  d.dataset = s.str("dataset");
  if (d.dataset == "two_circles") d.dataset = "two-circles";
  if (d.dataset != "two-circles" && d.dataset != "mnist" && d.dataset != "regression") {
    throw ConfigError("unknown dataset '" + d.dataset + "' (expected two-circles, mnist or regression)");
  }
  d.test_size = s.count("test-size");
  d.noise_std = s.num("noise-std");
  d.radius_inner = s.num("radius-inner");
  d.radius_outer = s.num("radius-outer");
  d.blur_length = s.count("blur-length");
  d.blur_angle = s.num("blur-angle");
  d.data_dir = s.str("data-dir");
  d.reg_dim = s.count("regression-dim");
  d.reg_outputs = s.count("regression-outputs");
  d.reg_noise = s.num("regression-noise");
  return d;
}

// The test split never depends on the run seed.
inline constexpr std::uint64_t kTestSeed = 0x7e57da7a;

/// Data for one run: training data is resampled from `seed`, the test split is fixed.
inline DataFactory make_factory(const DataSpec& spec) {
  struct MnistCache {
    std::optional<Dataset> train, test;
  };
  auto cache = std::make_shared<MnistCache>();
  return [spec, cache](std::size_t train_size, double label_noise, std::uint64_t seed) {
    Dataset tr, te;
    if (spec.dataset == "two-circles") {
      tr = two_circles(train_size, spec.radius_inner, spec.radius_outer, spec.noise_std, derive_seed(seed, 10));
      te = two_circles(spec.test_size ? spec.test_size : 1000, spec.radius_inner, spec.radius_outer, spec.noise_std,
                       kTestSeed, Split::test);
    } else if (spec.dataset == "regression") {
      if (label_noise != 0.0) throw ConfigError("label noise applies to classification datasets only");
      tr = synthetic_regression(train_size, spec.reg_dim, spec.reg_outputs, spec.reg_noise, derive_seed(seed, 10));
      te = synthetic_regression(spec.test_size ? spec.test_size : 1000, spec.reg_dim, spec.reg_outputs, 0.0,
                                kTestSeed, Split::test);
      return std::pair{tr, te};
    } else {
      if (!cache->train) {
        cache->train = load_mnist_dir(spec.data_dir, Split::train);
        cache->test = load_mnist_dir(spec.data_dir, Split::test);
        if (spec.blur_length > 1) {
          motion_blur(*cache->train, spec.blur_length, spec.blur_angle);
          motion_blur(*cache->test, spec.blur_length, spec.blur_angle);
        }
      }
      tr = stratified_sample(*cache->train, train_size, derive_seed(seed, 12));
      te = *cache->test;
      if (spec.test_size && spec.test_size < te.size()) {
        std::vector<std::size_t> idx(spec.test_size);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        te = select(te, idx);
        te.provenance.push_back({{"op", "head"}, {"n", spec.test_size}});
      }
    }
    if (label_noise > 0.0) flip_labels(tr, label_noise, derive_seed(seed, 11));
    return std::pair{tr, te};
  };
}

// ---------------------------------------------------------------------------
// Settings -> configs

struct Resolved {
  ResolvedSettings settings;
  TrainConfig train;
  DataSpec data;
  std::size_t train_size = 0;
  double label_noise = 0.0;
  std::string alpha_source;
};

inline std::uint64_t resolve_seed(const ResolvedSettings& s) {
  if (!s.str("seed").empty()) return s.u64("seed");
  if (const char* env = std::getenv("MGSLAB_SEED"); env && *env) return to_u64("MGSLAB_SEED", env);
  return 0;
}

/// Alpha for a regulariser: explicit value, else the tuned-defaults file.
inline std::pair<double, std::string> resolve_alpha(const std::string& alpha, RegulariserKind kind,
                                                    const std::string& dataset, const std::string& defaults_path) {
  if (!alpha.empty()) return {to_double("alpha", alpha), "explicit"};
  if (kind == RegulariserKind::none) return {0.0, "unused"};
  if (!std::filesystem::exists(defaults_path)) {
    throw ConfigError("no --alpha given and defaults file '" + defaults_path + "' does not exist");
  }
  const auto tuned = load_config_file(defaults_path);
  if (auto a = tuned_alpha(tuned, dataset, std::string(to_string(kind)))) {
    return {*a, "tuned-defaults:" + defaults_path};
  }
  throw ConfigError("no --alpha given and no tuned default for '" + dataset + "." + std::string(to_string(kind)) +
                    "' in " + defaults_path);
}

inline Resolved resolve(ResolvedSettings s, const std::string& defaults_path, bool alpha_required = true) {
  TrainConfig c;
  c.arch.kind = parse_arch(s.str("arch"));
  c.arch.width = s.count("width");
  c.arch.hidden_layers = s.count("layers");
  c.learning_rate = s.num("lr");
  c.lr_decay = s.num("lr-decay");
  c.batch_size = s.count("batch-size");
  c.epochs = s.count("epochs");
  c.metric_samples = s.count("metric-samples");
  c.probe_batch = s.count("probe-batch");
  c.rank_tol = s.num("rank-tol");
  c.seed = resolve_seed(s);
  s.set("seed", std::to_string(c.seed));
  DataSpec d = data_spec(s);
  const RegulariserKind kind = parse_regulariser(s.str("regulariser"));
  double alpha = 0.0;
  std::string source = "unused";
  if (alpha_required || !s.str("alpha").empty()) {
    std::tie(alpha, source) = resolve_alpha(s.str("alpha"), kind, d.dataset, defaults_path);
  }
  c.regulariser = {kind, alpha};
  if (kind != RegulariserKind::none) s.set("alpha", detail::num(alpha));
  c.validate();
  const double noise = s.num("label-noise");
  if (!(noise >= 0.0 && noise <= 1.0)) throw ConfigError("label-noise must lie in [0, 1]");
  const std::size_t n = s.count("train-size");
  if (n == 0) throw ConfigError("train-size must be >= 1");
  return {std::move(s), c, d, n, noise, source};
}

// ---------------------------------------------------------------------------
// Output helpers

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return o.str();
}

inline nlohmann::json settings_json(const Settings& s) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : s) j[k] = v;
  return j;
}

inline nlohmann::json base_manifest(const std::string& command, const Resolved& r, const std::string& config_path) {
  nlohmann::json m;
  m["tool"] = "mgslab";
  m["version"] = kVersion;
  m["command"] = command;
  m["config"] = settings_json(r.settings.merged());
  m["config_file"] = {{"path", config_path}, {"values", settings_json(r.settings.file())}};
  m["flags"] = settings_json(r.settings.flags());
  m["alpha_source"] = r.alpha_source;
  m["seeds"] = {{"run", r.train.seed},
                {"init", seeds::init(r.train.seed)},
                {"dropout", seeds::dropout(r.train.seed)},
                {"data", derive_seed(r.train.seed, 10)}};
  m["started"] = utc_now();
  return m;
}

inline void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::filesystem::path prepare_out(const std::string& dir) {
  std::filesystem::path p(dir.empty() ? "." : dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw ConfigError("cannot create output directory '" + p.string() + "': " + ec.message());
  return p;
}

inline nlohmann::json layout_json(const Graph& g) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : g.layout()) out.push_back({{"name", s.name}, {"offset", s.offset}, {"shape", s.shape}});
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_checkpoint(const std::string& path, const TrainResult& res, const TrainConfig& cfg,
                            const Dataset& train_set) {
  Container c;
  c.tensors.emplace_back("params", Tensor({res.params.size()}, std::vector<double>(res.params.values().begin(),
                                                                                   res.params.values().end())));
  nlohmann::json meta = {{"kind", "checkpoint"},
                         {"arch", std::string(to_string(cfg.arch.kind))},
                         {"width", cfg.arch.width},
                         {"layers", cfg.arch.hidden_layers},
                         {"dropout_rate", cfg.regulariser.dropout_rate()},
                         {"input_shape", train_set.sample_shape()},
                         {"num_outputs", train_set.num_outputs()},
                         {"num_classes", train_set.num_classes},
                         {"rank_tol", cfg.rank_tol},
                         {"layout", layout_json(res.graph)}};
  if (res.last_metric_batch) {
    const auto& mb = *res.last_metric_batch;
    c.tensors.emplace_back("batch_inputs", mb.batch.inputs);
    c.tensors.emplace_back("batch_targets", mb.batch.targets);
    meta["step"] = mb.step;
    meta["dropout"] = {{"training", mb.dropout.training}, {"seed", mb.dropout.seed}, {"step", mb.dropout.step}};
    if (!res.trace.rows.empty()) {
      const auto& row = res.trace.rows.back();
      meta["logged"] = {{"step", row.step}, {"tr_K", detail::num(row.tr_k)}, {"logdet_K", detail::num(row.logdet_k)}};
    }
  }
  c.metadata = meta;
  save_container(path, c);
}

struct Checkpoint {
  Graph graph;
  ParamVector params;
  nlohmann::json meta;
  std::optional<Batch> batch;
  DropoutContext dropout;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  Container c = load_container(path);
  if (c.metadata.value("kind", "") != "checkpoint") throw FormatError("'" + path + "' is not a checkpoint");
  Checkpoint ck;
  ck.meta = c.metadata;
  ArchSpec arch;
  arch.kind = parse_arch(c.metadata.at("arch").get<std::string>());
  arch.width = c.metadata.at("width");
  arch.hidden_layers = c.metadata.at("layers");
  arch.dropout_rate = c.metadata.at("dropout_rate");
  ck.graph = build(arch, c.metadata.at("input_shape").get<Shape>(), c.metadata.at("num_outputs"));
  const Tensor& p = c.get("params");
  ck.params = ParamVector(p.storage(), ck.graph.layout());
  if (c.metadata.contains("step")) {
    ck.batch = Batch{c.get("batch_inputs"), c.get("batch_targets")};
    const auto& d = c.metadata.at("dropout");
    ck.dropout = {d.at("training"), d.at("seed"), d.at("step"), 0};
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Commands

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::string defaults_path;
  std::string config_path;
  std::string out_dir;
};

inline int cmd_train(const Context& ctx, const Resolved& r, const std::string& checkpoint_path) {
  auto factory = make_factory(r.data);
  auto [tr, te] = factory(r.train_size, r.label_noise, r.train.seed);
  nlohmann::json manifest = base_manifest("train", r, ctx.config_path);
  manifest["data"] = {{"train", tr.provenance}, {"test", te.provenance}};
  const auto dir = prepare_out(ctx.out_dir);
  const std::string metrics = (dir / "metrics.csv").string();
  const std::string timing = (dir / "timing.csv").string();
  const std::string ckpt = checkpoint_path.empty() ? (dir / "checkpoint.mgsl").string() : checkpoint_path;
  try {
    TrainResult res = train(r.train, tr, te);
    write_text(metrics, metrics_csv(res.trace));
    write_text(timing, timing_csv(res.trace));
    save_checkpoint(ckpt, res, r.train, tr);
    manifest["param_count"] = res.graph.param_count();
    manifest["outputs"] = {{"metrics", metrics}, {"timing", timing}, {"checkpoint", ckpt}};
    manifest["status"] = "ok";
    manifest["finished"] = utc_now();
    write_json((dir / "manifest.json").string(), manifest);
    const auto& last = res.trace.rows.back();
    ctx.out << "trained " << res.graph.param_count() << " parameters for " << last.step << " steps; final test loss "
            << last.test_loss;
    if (last.test_accuracy) ctx.out << ", accuracy " << *last.test_accuracy;
    ctx.out << "\nwrote " << metrics << "\n";
    return ok;
  } catch (const NumericalError& e) {
    manifest["status"] = "numerical-abort";
    manifest["error"] = e.what();
    if (e.step() != NumericalError::npos) manifest["error_step"] = e.step();
    manifest["finished"] = utc_now();
    write_json((dir / "manifest.json").string(), manifest);
    throw;
  }
}

inline int cmd_two_circles(const Context& ctx, const Resolved& r) {
  if (r.data.dataset != "two-circles") throw ConfigError("two-circles command needs dataset = two-circles");
  auto factory = make_factory(r.data);
  auto [tr, te] = factory(r.train_size, r.label_noise, r.train.seed);
  TrainResult res = train(r.train, tr, te);
  const auto dir = prepare_out(ctx.out_dir);

  double x0 = tr.inputs(0, 0), x1 = x0, y0 = tr.inputs(0, 1), y1 = y0;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    x0 = std::min(x0, tr.inputs(i, 0));
    x1 = std::max(x1, tr.inputs(i, 0));
    y0 = std::min(y0, tr.inputs(i, 1));
    y1 = std::max(y1, tr.inputs(i, 1));
  }
  constexpr std::size_t kLattice = 201;
  Tensor grid({kLattice * kLattice, 2});
  for (std::size_t iy = 0; iy < kLattice; ++iy) {
    for (std::size_t ix = 0; ix < kLattice; ++ix) {
      grid(iy * kLattice + ix, 0) = x0 + (x1 - x0) * static_cast<double>(ix) / (kLattice - 1);
      grid(iy * kLattice + ix, 1) = y0 + (y1 - y0) * static_cast<double>(iy) / (kLattice - 1);
    }
  }
  const Tensor out = forward(res.graph, res.params, grid);
  std::string csv = "ix,iy,x,y,class\n";
  for (std::size_t k = 0; k < kLattice * kLattice; ++k) {
    const int cls = out(k, 1) > out(k, 0) ? 1 : 0;
    csv += std::to_string(k % kLattice) + "," + std::to_string(k / kLattice) + "," + detail::num(grid(k, 0)) + "," +
           detail::num(grid(k, 1)) + "," + std::to_string(cls) + "\n";
  }
  const std::string boundary = (dir / "boundary.csv").string(), metrics = (dir / "metrics.csv").string();
  write_text(boundary, csv);
  write_text(metrics, metrics_csv(res.trace));
  std::string pts = "x,y,label\n";
  for (std::size_t i = 0; i < tr.size(); ++i) {
    pts += detail::num(tr.inputs(i, 0)) + "," + detail::num(tr.inputs(i, 1)) + "," +
           std::to_string(static_cast<int>(tr.targets[i])) + "\n";
  }
  const std::string points = (dir / "points.csv").string();
  write_text(points, pts);
  nlohmann::json manifest = base_manifest("two-circles", r, ctx.config_path);
  manifest["data"] = {{"train", tr.provenance}, {"test", te.provenance}};
  manifest["lattice"] = {{"size", kLattice}, {"x", {x0, x1}}, {"y", {y0, y1}}};
  manifest["outputs"] = {{"boundary", boundary}, {"metrics", metrics}, {"points", points}};
  manifest["finished"] = utc_now();
  write_json((dir / "manifest.json").string(), manifest);
  ctx.out << "wrote " << boundary << " (" << kLattice << "x" << kLattice << " lattice)\n";
  return ok;
}

inline RegulariserConfig parse_method(const std::string& text, const Resolved& r, const std::string& defaults_path) {
  const auto parts = split(text, ':');
  if (parts.empty() || parts.size() > 2) throw ConfigError("bad method '" + text + "' (expected kind[:alpha])");
  const RegulariserKind kind = parse_regulariser(parts[0]);
  const double alpha =
      resolve_alpha(parts.size() == 2 ? parts[1] : std::string(), kind, r.data.dataset, defaults_path).first;
  RegulariserConfig rc{kind, alpha};
  rc.validate();
  return rc;
}

inline int cmd_bench(const Context& ctx, const Resolved& r) {
  const std::size_t runs = r.settings.count("runs");
  if (runs == 0) throw ConfigError("runs must be >= 1");
  std::vector<Scenario> scenarios;
  const std::string spec = r.settings.str("scenarios");
  if (spec.empty()) {
    scenarios.push_back({"s0", r.train_size, r.label_noise, r.train.regulariser, runs});
  } else {
    for (const auto& item : split(spec, ',')) {
      const auto f = split(item, ':');
      if (f.size() < 3 || f.size() > 4) {
        throw ConfigError("bad scenario '" + item + "' (expected size:noise:regulariser[:alpha])");
      }
      Scenario sc;
      sc.id = "s" + std::to_string(scenarios.size());
      sc.train_size = static_cast<std::size_t>(to_u64("scenarios", f[0]));
      sc.label_noise = to_double("scenarios", f[1]);
      sc.regulariser = parse_method(f[2] + (f.size() == 4 ? ":" + f[3] : std::string()), r, ctx.defaults_path);
      sc.runs = runs;
      scenarios.push_back(sc);
    }
  }
  const auto dir = prepare_out(ctx.out_dir);
  std::filesystem::create_directories(dir / "runs");
  auto results = run_testbench(r.train, scenarios, make_factory(r.data));
  nlohmann::json manifest = base_manifest("bench", r, ctx.config_path);
  nlohmann::json run_files = nlohmann::json::array();
  for (const auto& res : results) {
    for (std::size_t k = 0; k < res.traces.size(); ++k) {
      const std::string p = (dir / "runs" / (res.scenario.id + "_run" + std::to_string(k) + ".csv")).string();
      write_text(p, metrics_csv(res.traces[k]));
      run_files.push_back(p);
    }
    for (const auto& f : res.failures) ctx.err << res.scenario.id << ": " << f << "\n";
  }
  const std::string out = (dir / "results.csv").string();
  write_text(out, results_csv(results));
  nlohmann::json sc_json = nlohmann::json::array();
  for (const auto& res : results) {
    sc_json.push_back({{"id", res.scenario.id},
                       {"train_size", res.scenario.train_size},
                       {"label_noise", res.scenario.label_noise},
                       {"regulariser", std::string(to_string(res.scenario.regulariser.kind))},
                       {"alpha", res.scenario.regulariser.alpha},
                       {"run_seeds", [&] {
                          std::vector<std::uint64_t> s;
                          for (std::size_t k = 0; k < res.scenario.runs; ++k) s.push_back(run_seed(r.train.seed, k));
                          return s;
                        }()},
                       {"failures", res.failures}});
  }
  manifest["scenarios"] = sc_json;
  manifest["outputs"] = {{"results", out}, {"runs", run_files}};
  manifest["finished"] = utc_now();
  write_json((dir / "manifest.json").string(), manifest);
  ctx.out << "wrote " << out << " (" << results.size() << " scenarios)\n";
  return ok;
}

inline int cmd_sweep(const Context& ctx, const Resolved& r) {
  const std::size_t runs = r.settings.count("runs");
  if (runs == 0) throw ConfigError("runs must be >= 1");
  std::vector<RegulariserConfig> methods;
  const std::string mspec = r.settings.str("methods");
  if (mspec.empty()) {
    methods.push_back(r.train.regulariser);
  } else {
    for (const auto& m : split(mspec, ',')) methods.push_back(parse_method(m, r, ctx.defaults_path));
  }
  std::vector<SweepAxisValues> axes;
  for (const auto& a : split(r.settings.str("axes"), ';')) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("bad axis '" + a + "' (expected axis=v1,v2)");
    axes.push_back({parse_axis(detail::trim(a.substr(0, eq))), to_doubles("axes", a.substr(eq + 1))});
  }
  Scenario base{"base", r.train_size, r.label_noise, r.train.regulariser, runs};
  auto rows = robustness_sweep(r.train, base, methods, axes, make_factory(r.data));
  const auto dir = prepare_out(ctx.out_dir);
  const std::string out = (dir / "sweep.csv").string();
  write_text(out, sweep_csv(rows));
  nlohmann::json manifest = base_manifest("sweep", r, ctx.config_path);
  manifest["outputs"] = {{"sweep", out}};
  manifest["quantiles"] = {0.1, 0.5, 0.9};
  manifest["finished"] = utc_now();
  write_json((dir / "manifest.json").string(), manifest);
  ctx.out << "wrote " << out << " (" << rows.size() << " rows)\n";
  return ok;
}

/// Sets `key = value` in a flat config file, keeping every other line.
inline void update_defaults_file(const std::string& path, const std::string& key, const std::string& value,
                                 const std::string& comment) {
  std::vector<std::string> lines;
  if (std::ifstream in(path); in) {
    for (std::string line; std::getline(in, line);) lines.push_back(line);
  }
  bool replaced = false;
  for (auto& line : lines) {
    std::string body = line.substr(0, line.find('#'));
    const auto eq = body.find('=');
    if (eq != std::string::npos && normalise_key(detail::trim(body.substr(0, eq))) == key) {
      line = key + " = " + value + "  # " + comment;
      replaced = true;
    }
  }
  if (!replaced) lines.push_back(key + " = " + value + "  # " + comment);
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text(path, text);
}

inline int cmd_tune(const Context& ctx, const Resolved& r, bool write_defaults) {
  const RegulariserKind kind = r.train.regulariser.kind;
  if (kind == RegulariserKind::none) throw ConfigError("tune needs a regulariser other than none");
  const auto grid = to_doubles("grid", r.settings.str("grid"));
  const std::size_t runs = r.settings.count("runs");
  auto res = grid_search(r.train, kind, grid, runs, r.train_size, r.label_noise, make_factory(r.data));
  const auto dir = prepare_out(ctx.out_dir);
  std::string csv = "alpha,score";
  for (std::size_t k = 0; k < runs; ++k) csv += ",run" + std::to_string(k);
  csv += "\n";
  for (const auto& p : res.points) {
    csv += detail::num(p.alpha) + "," + detail::num(p.score);
    for (double s : p.run_scores) csv += "," + detail::num(s);
    csv += "\n";
  }
  const std::string out = (dir / "grid.csv").string();
  write_text(out, csv);
  nlohmann::json manifest = base_manifest("tune", r, ctx.config_path);
  manifest["selected_alpha"] = res.best.alpha;
  manifest["outputs"] = {{"grid", out}};
  const std::string key = r.data.dataset + "." + std::string(to_string(kind));
  if (write_defaults) {
    update_defaults_file(ctx.defaults_path, key, detail::num(res.best.alpha),
                         "grid " + r.settings.str("grid") + ", " + std::to_string(runs) + " runs, train-size " +
                             std::to_string(r.train_size) + ", label-noise " + detail::num(r.label_noise) +
                             ", epochs " + std::to_string(r.train.epochs));
    manifest["defaults_file"] = ctx.defaults_path;
  }
  manifest["finished"] = utc_now();
  write_json((dir / "manifest.json").string(), manifest);
  ctx.out << key << " = " << detail::num(res.best.alpha) << "\nwrote " << out << "\n";
  return ok;
}

inline int cmd_inspect(const Context& ctx, const std::string& checkpoint_path, const std::string& batch_path) {
  if (checkpoint_path.empty()) throw ConfigError("inspect needs --checkpoint");
  Checkpoint ck = load_checkpoint(checkpoint_path);
  Batch batch;
  DropoutContext drop = ck.dropout;
  if (!batch_path.empty()) {
    Dataset d = load_dataset(batch_path);
    batch = {d.inputs, d.targets};
    drop = {};
  } else if (ck.batch) {
    batch = *ck.batch;
  } else {
    throw ConfigError("checkpoint has no stored batch; pass --batch");
  }
  const double rank_tol = ck.meta.value("rank_tol", kDefaultRankTol);
  GradientKernel K = batch_kernel(ck.graph, ck.params, batch.inputs, drop);
  const auto& ev = K.spectrum();
  const double tr = trace_metric(K);
  const auto ld = logdet_metric(K, rank_tol);
  std::optional<double> al;
  if (ck.meta.value("num_classes", 0) > 0) al = alignment(K, batch.targets);

  const auto dir = prepare_out(ctx.out_dir);
  std::string kcsv;
  for (std::size_t a = 0; a < K.size(); ++a) {
    for (std::size_t b = 0; b < K.size(); ++b) kcsv += (b ? "," : "") + detail::num(K.matrix()(a, b));
    kcsv += "\n";
  }
  std::string scsv = "index,eigenvalue\n";
  for (std::size_t i = 0; i < ev.size(); ++i) scsv += std::to_string(i) + "," + detail::num(ev[i]) + "\n";
  std::string mcsv = "step,batch_size,num_outputs,tr_K,logdet_K,alignment\n";
  mcsv += std::to_string(ck.meta.value("step", 0)) + "," + std::to_string(K.batch_size()) + "," +
          std::to_string(K.num_outputs()) + "," + detail::num(tr) + "," + detail::num(ld) + "," + detail::num(al) +
          "\n";
  const std::string kp = (dir / "kernel.csv").string(), sp = (dir / "spectrum.csv").string(),
                    mp = (dir / "inspect.csv").string();
  write_text(kp, kcsv);
  write_text(sp, scsv);
  write_text(mp, mcsv);
  nlohmann::json manifest = {{"tool", "mgslab"},
                             {"version", kVersion},
                             {"command", "inspect"},
                             {"checkpoint", checkpoint_path},
                             {"batch", batch_path.empty() ? "checkpoint" : batch_path},
                             {"outputs", {{"kernel", kp}, {"spectrum", sp}, {"metrics", mp}}},
                             {"finished", utc_now()}};
  write_json((dir / "manifest.json").string(), manifest);
  ctx.out << mcsv;
  return ok;
}

// ---------------------------------------------------------------------------
// Entry point

/// Runs the command line `args` (without the program name). Returns the process exit code.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"mgslab: model gradient similarity training lab", "mgslab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Settings flag_values;
  std::map<std::string, std::string> raw;
  std::string config_path, defaults_path = MGSLAB_DEFAULTS_FILE, out_dir = ".", checkpoint, batch, manifest;
  bool write_defaults = false;
  std::vector<std::string> axis_flags;

  auto add_common = [&](CLI::App* sub) {
    for (const auto& k : keys()) {
      const std::string name = k.name;
      if (name == "axes") continue;
      sub->add_option("--" + name, raw[name], k.help);
    }
    sub->add_option("--config", config_path, "config file (flags override its values)");
    sub->add_option("--defaults", defaults_path, "tuned defaults file");
    sub->add_option("--out", out_dir, "output directory");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train one model and write metrics.csv");
  add_common(train_cmd);
  train_cmd->add_option("--checkpoint", checkpoint, "checkpoint path (default OUT/checkpoint.mgsl)");
  train_cmd->add_option("--manifest,--from-manifest", manifest, "re-run with the configuration of a manifest");
  CLI::App* bench_cmd = app.add_subcommand("bench", "run a scenario table and write results.csv");
  add_common(bench_cmd);
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "vary one axis at a time and write quantiles");
  add_common(sweep_cmd);
  sweep_cmd->add_option("--axis", axis_flags, "axis=v1,v2 (repeatable)");
  CLI::App* tc_cmd = app.add_subcommand("two-circles", "train on two circles and export a decision-boundary grid");
  tc_cmd->alias("two_circles");
  add_common(tc_cmd);
  CLI::App* tune_cmd = app.add_subcommand("tune", "grid-search alpha for one regulariser");
  add_common(tune_cmd);
  tune_cmd->add_flag("--write-defaults", write_defaults, "store the selected alpha in the defaults file");
  CLI::App* inspect_cmd = app.add_subcommand("inspect", "dump kernel, spectrum and metrics for a checkpoint");
  inspect_cmd->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
  inspect_cmd->add_option("--batch", batch, "dataset container to use instead of the stored batch");
  inspect_cmd->add_option("--out", out_dir, "output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return ok;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n"
        << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return config_error;
  }

  CLI::App* sub = app.get_subcommands().front();
  Context ctx{out, err, defaults_path, config_path, out_dir};
  try {
    if (sub == inspect_cmd) return cmd_inspect(ctx, checkpoint, batch);

    for (const auto& k : keys()) {
      const std::string name = k.name;
      if (name != "axes" && sub->count("--" + name) > 0) flag_values[name] = raw[name];
    }
    if (!axis_flags.empty()) {
      std::string joined;
      for (const auto& a : axis_flags) joined += (joined.empty() ? "" : ";") + a;
      flag_values["axes"] = joined;
    }
    Settings file_values;
    if (!manifest.empty()) {
      std::ifstream in(manifest);
      if (!in) throw ConfigError("cannot read manifest '" + manifest + "'");
      nlohmann::json m;
      try {
        m = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed manifest '" + manifest + "': " + e.what());
      }
      for (const auto& [k, v] : m.at("config").items()) file_values[k] = v.get<std::string>();
      ctx.config_path = manifest;
    } else if (!config_path.empty()) {
      file_values = load_config_file(config_path);
    }
    if (sub == tc_cmd && !flag_values.contains("dataset")) flag_values["dataset"] = "two-circles";
    Resolved r =
        resolve(ResolvedSettings(default_settings(), file_values, flag_values), defaults_path, sub != tune_cmd);

    if (sub == train_cmd) return cmd_train(ctx, r, checkpoint);
    if (sub == bench_cmd) return cmd_bench(ctx, r);
    if (sub == sweep_cmd) return cmd_sweep(ctx, r);
    if (sub == tc_cmd) return cmd_two_circles(ctx, r);
    if (sub == tune_cmd) return cmd_tune(ctx, r, write_defaults);
    return failure;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n\n" << sub->help();
    return config_error;
  } catch (const NumericalError& e) {
    err << "numerical abort: " << e.what();
    if (e.step() != NumericalError::npos && std::string(e.what()).find("step") == std::string::npos) {
      err << " (step " << e.step() << ")";
    }
    err << "\n";
    return numerical_abort;
  } catch (const FormatError& e) {
    err << "input error: " << e.what() << "\n";
    return config_error;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << "\n";
    return config_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return failure;
  }
}

}  // namespace mgslab::cli
