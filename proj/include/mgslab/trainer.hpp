#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mgslab/datasets.hpp"
#include "mgslab/differentiation.hpp"
#include "mgslab/kernel.hpp"
#include "mgslab/models.hpp"
#include "mgslab/regularisers.hpp"

namespace mgslab {

struct TrainConfig {
  double learning_rate = 0.1;
  double lr_decay = 0.99;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t metric_samples = 100;
  RegulariserConfig regulariser{};
  ArchSpec arch{};
  double rank_tol = kDefaultRankTol;
  bool kernel_metrics = true;     // tr K, logdet K and alignment at each sample
  std::size_t probe_batch = 0;    // > 0: fixed probe of this many training points for kernel metrics

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be > 0");
    if (!(lr_decay > 0.0) || !std::isfinite(lr_decay)) throw ConfigError("lr decay must be > 0");
    if (batch_size == 0) throw ConfigError("batch size must be >= 1");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (metric_samples == 0) throw ConfigError("metric samples must be >= 1");
    regulariser.validate();
  }
};

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

/// Steps (1-based, counted after the update) at which metrics are recorded: ceil(k T / S), k = 1..S.
/// When S > T some steps repeat.
inline std::vector<std::size_t> metric_schedule(std::size_t total_steps, std::size_t samples) {
  std::vector<std::size_t> out(samples);
  for (std::size_t k = 1; k <= samples; ++k) out[k - 1] = (k * total_steps + samples - 1) / samples;
  return out;
}

namespace seeds {
inline std::uint64_t init(std::uint64_t s) { return derive_seed(s, 1); }
inline std::uint64_t dropout(std::uint64_t s) { return derive_seed(s, 2); }
inline std::uint64_t shuffle(std::uint64_t s, std::size_t epoch) { return derive_seed(derive_seed(s, 3), epoch); }
inline std::uint64_t probe(std::uint64_t s) { return derive_seed(s, 4); }
}  // namespace seeds

/// Order in which training points are visited during `epoch`.
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  Rng rng(seeds::shuffle(seed, epoch));
  return rng.permutation(n);
}

inline Batch make_batch(const Dataset& d, const std::vector<std::size_t>& idx) {
  return {d.inputs.gather_rows(idx), d.targets.gather_rows(idx)};
}

struct TrainState {
  Graph graph;
  ParamVector params;
  TrainConfig config;
  LossKind loss = LossKind::mse;
  std::size_t step = 0;   // completed updates
  std::size_t epoch = 0;

  double current_lr() const {
    return config.learning_rate * std::pow(config.lr_decay, static_cast<double>(epoch));
  }
  DropoutContext dropout_context() const {
    return {graph.has_dropout(), seeds::dropout(config.seed), step, 0};
  }
};

inline TrainState make_state(const TrainConfig& config, const Dataset& train_set) {
  config.validate();
  ArchSpec arch = config.arch;
  arch.dropout_rate = config.regulariser.dropout_rate();
  TrainState s;
  s.graph = build(arch, train_set.sample_shape(), train_set.num_outputs());
  s.params = init(s.graph, {seeds::init(config.seed)});
  s.config = config;
  s.loss = train_set.classification() ? LossKind::softmax_cross_entropy : LossKind::mse;
  return s;
}

struct StepResult {
  double loss = 0.0;     // batch loss before the update
  double penalty = 0.0;  // penalty value before the update
};

/// theta <- theta - eta_t (grad L + grad g) on one batch.
inline StepResult sgd_step(TrainState& s, const Batch& batch) {
  const auto penalty = s.config.regulariser.penalty();
  const double alpha = s.config.regulariser.alpha;
  const bool penalised = penalty.has_value() && alpha > 0.0;
  const DropoutContext ctx = s.dropout_context();

  StepGraph g = build_step(s.graph, s.params, batch, s.loss, ctx,
                           penalised && *penalty == PenaltyKind::lossgrad_input);
  StepResult r{g.loss.item(), 0.0};
  if (!std::isfinite(r.loss)) {
    throw NumericalError("non-finite training loss at step " + std::to_string(s.step + 1), s.step + 1);
  }
  ParamVector grad = flatten_grads(s.graph, ad::grad(g.loss, g.params.slots));
  if (penalised) {
    ad::Var pv;
    try {
      pv = penalty_var(s.graph, g, *penalty, alpha, {s.loss, ctx, s.config.rank_tol});
    } catch (const SingularKernelError& e) {
      throw SingularKernelError(e.smallest_eigenvalue(), e.largest_eigenvalue(), s.step + 1);
    }
    r.penalty = pv.item();
    const ParamVector pg = flatten_grads(s.graph, ad::grad(pv, g.params.slots));
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += pg[i];
  }
  const double eta = s.current_lr();
  ParamVector next = s.params;
  for (std::size_t i = 0; i < next.size(); ++i) {
    next[i] -= eta * grad[i];
    if (!std::isfinite(next[i])) {
      throw NumericalError("non-finite parameter update at step " + std::to_string(s.step + 1) + " (batch loss " +
                               std::to_string(r.loss) + ", penalty " + std::to_string(r.penalty) + ", lr " +
                               std::to_string(eta) + ")",
                           s.step + 1);
    }
  }
  s.params = std::move(next);
  ++s.step;
  return r;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  std::optional<double> test_accuracy;
  std::optional<double> tr_k;
  std::optional<double> logdet_k;
  std::optional<double> alignment;
  double wall_ms = 0.0;
};

struct MetricTrace {
  std::vector<MetricRow> rows;
  std::size_t size() const { return rows.size(); }
};

struct Evaluation {
  double loss = 0.0;
  std::optional<double> accuracy;
};

/// Mean loss and (for classification) argmax accuracy; ties go to the lower class index.
inline Evaluation evaluate(const Graph& graph, const ParamVector& params, const Dataset& d, LossKind kind) {
  Evaluation e;
  const std::size_t n = d.size(), chunk = 500;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t end = std::min(n, b + chunk);
    Tensor x = d.inputs.slice_rows(b, end);
    Tensor y = d.targets.slice_rows(b, end);
    Tensor out = forward(graph, params, x);
    {
      ad::NoGradGuard ng;
      loss_sum += loss_var(ad::Var::constant(out), y, kind).item() * static_cast<double>(end - b);
    }
    if (d.classification()) {
      const std::size_t q = out.dim(1);
      for (std::size_t i = 0; i < end - b; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < q; ++c) {
          if (out(i, c) > out(i, best)) best = c;
        }
        correct += static_cast<double>(best) == y[i];
      }
    }
  }
  e.loss = loss_sum / static_cast<double>(n);
  if (d.classification()) e.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return e;
}

struct KernelMetrics {
  double tr_k = 0.0;
  std::optional<double> logdet_k;
  std::optional<double> alignment;
};

inline KernelMetrics kernel_metrics(const Graph& graph, const ParamVector& params, const Batch& batch,
                                    bool classification, const DropoutContext& ctx, double rank_tol) {
  GradientKernel K = batch_kernel(graph, params, batch.inputs, ctx);
  KernelMetrics km;
  km.tr_k = trace_metric(K);
  km.logdet_k = logdet_metric(K, rank_tol);
  if (classification) km.alignment = alignment(K, batch.targets);
  return km;
}

/// The batch and dropout state behind one metric row, for checkpointing.
struct MetricBatch {
  std::size_t step = 0;
  Batch batch;
  DropoutContext dropout;
};

struct TrainResult {
  Graph graph;
  ParamVector params;
  MetricTrace trace;
  LossKind loss = LossKind::mse;
  std::optional<MetricBatch> last_metric_batch;
};

/// Runs epochs * ceil(N / batch) SGD steps and samples metrics on the evenly spaced schedule.
inline TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& test_set) {
  train_set.check();
  test_set.check();
  TrainState s = make_state(config, train_set);
  const std::size_t n = train_set.size();
  if (n == 0) throw ConfigError("empty training set");
  const std::size_t per_epoch = steps_per_epoch(n, config.batch_size);
  const std::size_t total = per_epoch * config.epochs;
  const auto schedule = metric_schedule(total, config.metric_samples);

  std::optional<Batch> probe;
  if (config.probe_batch > 0) {
    Rng rng(seeds::probe(config.seed));
    auto perm = rng.permutation(n);
    perm.resize(std::min(config.probe_batch, n));
    probe = make_batch(train_set, perm);
  }

  TrainResult res;
  res.loss = s.loss;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t next_sample = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    s.epoch = epoch;
    const auto order = epoch_order(config.seed, epoch, n);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * config.batch_size, hi = std::min(n, lo + config.batch_size);
      const Batch batch = make_batch(train_set, std::vector<std::size_t>(order.begin() + lo, order.begin() + hi));
      const DropoutContext ctx = s.dropout_context();  // masks used by this update
      sgd_step(s, batch);

      if (next_sample >= schedule.size() || schedule[next_sample] != s.step) continue;
      MetricRow row;
      row.step = s.step;
      row.epoch = epoch;
      {
        ad::NoGradGuard ng;
        row.train_loss = loss_var(ad::Var::constant(forward(s.graph, s.params, batch.inputs)), batch.targets, s.loss)
                             .item();
      }
      const Evaluation ev = evaluate(s.graph, s.params, test_set, s.loss);
      row.test_loss = ev.loss;
      row.test_accuracy = ev.accuracy;
      const Batch& kb = probe ? *probe : batch;
      if (config.kernel_metrics) {
        const KernelMetrics km =
            kernel_metrics(s.graph, s.params, kb, train_set.classification(), ctx, config.rank_tol);
        row.tr_k = km.tr_k;
        row.logdet_k = km.logdet_k;
        row.alignment = km.alignment;
      }
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      while (next_sample < schedule.size() && schedule[next_sample] == s.step) {
        res.trace.rows.push_back(row);
        ++next_sample;
      }
      res.last_metric_batch = MetricBatch{s.step, kb, ctx};
    }
  }
  res.graph = std::move(s.graph);
  res.params = std::move(s.params);
  return res;
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {
inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
inline std::string num(const std::optional<double>& v) { return v && std::isfinite(*v) ? num(*v) : "NA"; }
}  // namespace detail

inline constexpr const char* kMetricsHeader =
    "step,epoch,train_loss,test_loss,test_accuracy,tr_K,logdet_K,alignment";

/// Metric rows without wall-clock time, so that repeated runs give identical files.
inline std::string metrics_csv(const MetricTrace& t) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : t.rows) {
    out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + detail::num(r.train_loss) + "," +
           detail::num(r.test_loss) + "," + detail::num(r.test_accuracy) + "," + detail::num(r.tr_k) + "," +
           detail::num(r.logdet_k) + "," + detail::num(r.alignment) + "\n";
  }
  return out;
}

inline std::string timing_csv(const MetricTrace& t) {
  std::string out = "step,wall_ms\n";
  for (const auto& r : t.rows) out += std::to_string(r.step) + "," + detail::num(r.wall_ms) + "\n";
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
}

// ---------------------------------------------------------------------------
// Aggregation

/// The quantity a scenario is judged by: test accuracy for classification, test loss otherwise.
inline double score_of(const MetricRow& r) { return r.test_accuracy ? *r.test_accuracy : r.test_loss; }

/// Mean of the last `k` sampled values.
inline double final_value(const std::vector<double>& curve, std::size_t k = 5) {
  if (curve.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t n = std::min(k, curve.size());
  double s = 0.0;
  for (std::size_t i = curve.size() - n; i < curve.size(); ++i) s += curve[i];
  return s / static_cast<double>(n);
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Linear-interpolation quantile of unsorted data, p in [0, 1].
inline double quantile(std::vector<double> v, double p) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double h = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Builds (train, test) for one run. The seed changes per run so that every run resamples its data.
using DataFactory = std::function<std::pair<Dataset, Dataset>(std::size_t train_size, double label_noise,
                                                             std::uint64_t seed)>;

inline std::uint64_t run_seed(std::uint64_t base, std::size_t run) { return derive_seed(base, 1000 + run); }

struct Scenario {
  std::string id;
  std::size_t train_size = 0;
  double label_noise = 0.0;
  RegulariserConfig regulariser{};
  std::size_t runs = 1;
};

struct ScenarioResult {
  Scenario scenario;
  std::size_t completed_runs = 0;
  double final_mean = std::numeric_limits<double>::quiet_NaN();
  double final_std = std::numeric_limits<double>::quiet_NaN();
  double best = std::numeric_limits<double>::quiet_NaN();
  bool higher_is_better = true;
  std::vector<MetricTrace> traces;
  std::vector<std::string> failures;

  std::string status() const {
    if (completed_runs == scenario.runs) return "ok";
    return completed_runs == 0 ? "failed" : "incomplete";
  }
};

/// final = mean over runs of each run's last-5 average; best = extremum of the across-run mean curve.
inline void aggregate(ScenarioResult& r) {
  std::vector<double> finals;
  std::vector<double> avg;
  for (const auto& t : r.traces) {
    std::vector<double> curve;
    for (const auto& row : t.rows) curve.push_back(score_of(row));
    finals.push_back(final_value(curve));
    if (avg.empty()) avg.assign(curve.size(), 0.0);
    for (std::size_t i = 0; i < std::min(avg.size(), curve.size()); ++i) avg[i] += curve[i];
  }
  if (finals.empty()) return;
  for (double& v : avg) v /= static_cast<double>(r.traces.size());
  r.final_mean = mean(finals);
  r.final_std = sample_std(finals);
  r.best = r.higher_is_better ? *std::max_element(avg.begin(), avg.end()) : *std::min_element(avg.begin(), avg.end());
}

inline ScenarioResult run_scenario(const TrainConfig& base, const Scenario& sc, const DataFactory& data) {
  ScenarioResult res;
  res.scenario = sc;
  for (std::size_t r = 0; r < sc.runs; ++r) {
    const std::uint64_t seed = run_seed(base.seed, r);
    TrainConfig cfg = base;
    cfg.seed = seed;
    cfg.regulariser = sc.regulariser;
    try {
      auto [tr, te] = data(sc.train_size, sc.label_noise, seed);
      res.higher_is_better = tr.classification();
      res.traces.push_back(train(cfg, tr, te).trace);
      ++res.completed_runs;
    } catch (const Error& e) {
      res.failures.push_back("run " + std::to_string(r) + ": " + e.what());
    }
  }
  aggregate(res);
  return res;
}

inline std::vector<ScenarioResult> run_testbench(const TrainConfig& base, const std::vector<Scenario>& scenarios,
                                                 const DataFactory& data) {
  std::vector<ScenarioResult> out;
  for (const auto& sc : scenarios) out.push_back(run_scenario(base, sc, data));
  return out;
}

inline constexpr const char* kResultsHeader =
    "scenario_id,train_size,label_noise,regulariser,alpha,runs,completed_runs,final_mean,final_std,best,status";

inline std::string results_csv(const std::vector<ScenarioResult>& results) {
  std::string out = std::string(kResultsHeader) + "\n";
  for (const auto& r : results) {
    const auto& s = r.scenario;
    out += s.id + "," + std::to_string(s.train_size) + "," + detail::num(s.label_noise) + "," +
           std::string(to_string(s.regulariser.kind)) + "," + detail::num(s.regulariser.alpha) + "," +
           std::to_string(s.runs) + "," + std::to_string(r.completed_runs) + "," + detail::num(r.final_mean) + "," +
           detail::num(r.final_std) + "," + detail::num(r.best) + "," + r.status() + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid search

struct GridPoint {
  double alpha = 0.0;
  double score = std::numeric_limits<double>::infinity();  // mean final test loss; +inf if any run diverged
  std::vector<double> run_scores;
};

struct GridSearchResult {
  RegulariserConfig best;
  std::vector<GridPoint> points;
};

/// Picks the alpha (or dropout rate) with the lowest mean final test loss over `runs` runs.
/// Ties keep the earlier grid value.
inline GridSearchResult grid_search(const TrainConfig& tmpl, RegulariserKind kind, const std::vector<double>& grid,
                                    std::size_t runs, std::size_t train_size, double label_noise,
                                    const DataFactory& data) {
  if (grid.empty()) throw ConfigError("grid search needs at least one value");
  if (runs == 0) throw ConfigError("grid search needs at least one run");
  GridSearchResult res;
  for (double a : grid) {
    GridPoint gp;
    gp.alpha = a;
    bool diverged = false;
    for (std::size_t r = 0; r < runs; ++r) {
      TrainConfig cfg = tmpl;
      cfg.seed = run_seed(tmpl.seed, r);
      cfg.regulariser = {kind, a};
      cfg.kernel_metrics = false;
      double score = std::numeric_limits<double>::infinity();
      try {
        auto [tr, te] = data(train_size, label_noise, cfg.seed);
        auto out = train(cfg, tr, te);
        std::vector<double> curve;
        for (const auto& row : out.trace.rows) curve.push_back(row.test_loss);
        score = final_value(curve);
        if (!std::isfinite(score)) score = std::numeric_limits<double>::infinity();
      } catch (const NumericalError&) {
      }
      diverged = diverged || !std::isfinite(score);
      gp.run_scores.push_back(score);
    }
    gp.score = diverged ? std::numeric_limits<double>::infinity() : mean(gp.run_scores);
    res.points.push_back(gp);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < res.points.size(); ++i) {
    if (res.points[i].score < res.points[best].score) best = i;
  }
  res.best = {kind, res.points[best].alpha};
  return res;
}

// ---------------------------------------------------------------------------
// Robustness sweep

enum class SweepAxis { train_size, label_noise, batch_size, learning_rate, epochs };

inline std::string_view to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::train_size: return "train_size";
    case SweepAxis::label_noise: return "label_noise";
    case SweepAxis::batch_size: return "batch_size";
    case SweepAxis::learning_rate: return "learning_rate";
    case SweepAxis::epochs: return "epochs";
  }
  return "?";
}

inline SweepAxis parse_axis(std::string_view s) {
  for (auto a : {SweepAxis::train_size, SweepAxis::label_noise, SweepAxis::batch_size, SweepAxis::learning_rate,
                 SweepAxis::epochs}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown sweep axis '" + std::string(s) +
                    "' (expected train_size, label_noise, batch_size, learning_rate or epochs)");
}

struct SweepRow {
  std::string method;
  std::string axis;  // "base" for the unperturbed scenario
  double value = 0.0;
  std::size_t completed_runs = 0;
  double q10 = 0.0, q50 = 0.0, q90 = 0.0;
};

struct SweepAxisValues {
  SweepAxis axis;
  std::vector<double> values;
};

/// Varies one axis at a time around the base scenario and summarises each method's final
/// metric across runs by its 10/50/90 % quantiles.
inline std::vector<SweepRow> robustness_sweep(const TrainConfig& base, const Scenario& base_scenario,
                                              const std::vector<RegulariserConfig>& methods,
                                              const std::vector<SweepAxisValues>& axes, const DataFactory& data) {
  std::vector<SweepRow> out;
  auto run_point = [&](const RegulariserConfig& method, const std::string& axis, double value, TrainConfig cfg,
                       Scenario sc) {
    sc.regulariser = method;
    sc.id = std::string(to_string(method.kind)) + ":" + axis;
    ScenarioResult r = run_scenario(cfg, sc, data);
    std::vector<double> finals;
    for (const auto& t : r.traces) {
      std::vector<double> curve;
      for (const auto& row : t.rows) curve.push_back(score_of(row));
      finals.push_back(final_value(curve));
    }
    out.push_back({std::string(to_string(method.kind)), axis, value, r.completed_runs, quantile(finals, 0.1),
                   quantile(finals, 0.5), quantile(finals, 0.9)});
  };
  for (const auto& method : methods) {
    if (axes.empty()) {
      run_point(method, "base", 0.0, base, base_scenario);
      continue;
    }
    for (const auto& ax : axes) {
      for (double v : ax.values) {
        TrainConfig cfg = base;
        Scenario sc = base_scenario;
        switch (ax.axis) {
          case SweepAxis::train_size: sc.train_size = static_cast<std::size_t>(v); break;
          case SweepAxis::label_noise: sc.label_noise = v; break;
          case SweepAxis::batch_size: cfg.batch_size = static_cast<std::size_t>(v); break;
          case SweepAxis::learning_rate: cfg.learning_rate = v; break;
          case SweepAxis::epochs: cfg.epochs = static_cast<std::size_t>(v); break;
        }
        run_point(method, std::string(to_string(ax.axis)), v, cfg, sc);
      }
    }
  }
  return out;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "method,axis,value,completed_runs,q10,q50,q90\n";
  for (const auto& r : rows) {
    out += r.method + "," + r.axis + "," + detail::num(r.value) + "," + std::to_string(r.completed_runs) + "," +
           detail::num(r.q10) + "," + detail::num(r.q50) + "," + detail::num(r.q90) + "\n";
  }
  return out;
}

}  // namespace mgslab
