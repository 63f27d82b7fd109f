// Acceptance checks. Prints one PASS/FAIL line per criterion; exit status 1 if any fails.
//
//   mgslab_acceptance            run all nine
//   mgslab_acceptance --only 5   run one

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "../support/oracles.hpp"
#include "../support/tempdir.hpp"
#include "mgslab/cli.hpp"
#include "mgslab/mgslab.hpp"

using namespace mgslab;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double tuned(const std::string& dataset, const std::string& kind) {
  const auto a = tuned_alpha(load_config_file(MGSLAB_DEFAULTS_FILE), dataset, kind);
  if (!a) throw ConfigError("no tuned alpha for " + dataset + "." + kind + " in " MGSLAB_DEFAULTS_FILE);
  return *a;
}

std::vector<double> column(const MetricTrace& t, const std::function<double(const MetricRow&)>& f) {
  std::vector<double> out;
  for (const auto& r : t.rows) out.push_back(f(r));
  return out;
}

// ---------------------------------------------------------------------------

// Output change after one SGD step against -eta K dL/df. The error is normalised by the
// actual change at the largest step, so a second-order remainder shows as a ratio near 4.
Verdict update_prediction() {
  Rng rng(101);
  std::vector<double> ratios;
  int draws = 0, skipped = 0;
  while (draws < 5) {
    const Graph g = build({ArchKind::fcn, 1, 32, 0.0}, {8}, 3);
    const ParamVector p = init(g, {rng.next()});
    const Batch b{oracle::random_matrix(rng, 16, 8), oracle::random_matrix(rng, 16, 3)};
    const auto lg = loss_and_grad(g, p, b, LossKind::mse);
    ParamVector far = p;
    for (std::size_t k = 0; k < p.size(); ++k) far[k] -= 1e-2 * lg.grad[k];
    if (oracle::naive_forward(g, p, b.inputs).pattern != oracle::naive_forward(g, far, b.inputs).pattern) {
      ++skipped;
      continue;
    }
    ++draws;
    const Tensor f0 = forward(g, p, b.inputs);
    Tensor gf = loss_model_gradients(f0, b.targets, LossKind::mse);
    for (double& v : gf.data()) v /= 16.0;
    const GradientKernel K = mgs_kernel(per_sample_jacobian(g, p, b.inputs));
    std::vector<double> err;
    double scale = 0.0;
    for (double eta : {1e-2, 5e-3, 2.5e-3}) {
      ParamVector next = p;
      for (std::size_t k = 0; k < p.size(); ++k) next[k] -= eta * lg.grad[k];
      const Tensor f1 = forward(g, next, b.inputs);
      const Tensor pred = predicted_update(K, gf, eta);
      double e = 0.0, d = 0.0;
      for (std::size_t k = 0; k < f0.size(); ++k) {
        e += std::pow(f1[k] - f0[k] - pred[k], 2);
        d += std::pow(f1[k] - f0[k], 2);
      }
      if (scale == 0.0) scale = std::sqrt(d);
      err.push_back(std::sqrt(e) / scale);
    }
    ratios.push_back(err[0] / err[1]);
    ratios.push_back(err[1] / err[2]);
  }

  // Linear model: the prediction is exact.
  Graph lin({8});
  lin.dense(3);
  double worst_linear = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const ParamVector p = oracle::random_params(rng, lin);
    const Batch b{oracle::random_matrix(rng, 16, 8), oracle::random_matrix(rng, 16, 3)};
    const auto lg = loss_and_grad(lin, p, b, LossKind::mse);
    const Tensor f0 = forward(lin, p, b.inputs);
    Tensor gf = loss_model_gradients(f0, b.targets, LossKind::mse);
    for (double& v : gf.data()) v /= 16.0;
    const GradientKernel K = mgs_kernel(per_sample_jacobian(lin, p, b.inputs));
    for (double eta : {1e-2, 5e-3, 2.5e-3}) {
      ParamVector next = p;
      for (std::size_t k = 0; k < p.size(); ++k) next[k] -= eta * lg.grad[k];
      const Tensor f1 = forward(lin, next, b.inputs);
      const Tensor pred = predicted_update(K, gf, eta);
      double e = 0.0, d = 0.0;
      for (std::size_t k = 0; k < f0.size(); ++k) {
        e += std::pow(f1[k] - f0[k] - pred[k], 2);
        d += std::pow(f1[k] - f0[k], 2);
      }
      worst_linear = std::max(worst_linear, std::sqrt(e / d));
    }
  }
  const auto [lo, hi] = std::minmax_element(ratios.begin(), ratios.end());
  const bool pass = *lo >= 3.0 && *hi <= 5.0 && worst_linear <= 1e-12;
  return {pass, "fcn p=" + std::to_string(build({ArchKind::fcn, 1, 32, 0.0}, {8}, 3).param_count()) +
                    ", ratios in [" + fmt("%.3f", *lo) + ", " + fmt("%.3f", *hi) + "] over " +
                    std::to_string(draws) + " draws (" + std::to_string(skipped) +
                    " skipped: step crossed a ReLU kink); linear rel err " + fmt("%.2e", worst_linear)};
}

Verdict trace_identity() {
  Rng rng(102);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng.below(10), q = 1 + rng.below(4), p = 1 + rng.below(60);
    const PerSampleJacobian J{oracle::random_matrix(rng, m * q, p, std::exp(rng.uniform(-3.0, 3.0))), m, q};
    const double alpha = std::exp(rng.uniform(-8.0, 2.0));
    const double rows = alpha * trace_metric(J);
    const double assembled = alpha * trace_metric(mgs_kernel(J));
    worst = std::max(worst, std::abs(rows - assembled) / std::abs(assembled));
  }
  return {worst <= 1e-10, "200 Jacobians, max rel diff " + fmt("%.2e", worst)};
}

Verdict spectra() {
  Rng rng(103);
  double mismatch = 0.0, violation = 0.0;
  int deficient = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 2 + rng.below(7), n = 1 + rng.below(12);
    Tensor J = oracle::random_matrix(rng, d, n);
    if (trial % 5 == 0 && d > 2) {
      // Duplicate a row so the Gram matrix is rank deficient.
      for (std::size_t c = 0; c < n; ++c) J(d - 1, c) = J(0, c);
      ++deficient;
    }
    const InterlacingReport r = interlacing_check(J);
    mismatch = std::max(mismatch, r.spectrum_mismatch);
    violation = std::max(violation, r.interlacing_violation);
  }
  return {mismatch <= 1e-8 && violation <= 1e-10,
          "1000 matrices up to 8x12 (" + std::to_string(deficient) + " rank deficient), spectrum mismatch " +
              fmt("%.2e", mismatch) + ", interlacing breach " + fmt("%.2e", violation)};
}

Verdict double_backprop() {
  Rng rng(104);
  struct Case {
    PenaltyKind kind;
    const char* name;
    double tol;
  };
  const Case cases[] = {{PenaltyKind::mgs_trace, "mgs-trace", 1e-4},
                        {PenaltyKind::mgs_logdet, "mgs-logdet", 1e-3},
                        {PenaltyKind::lossgrad_param, "lossgrad-param", 1e-4},
                        {PenaltyKind::lossgrad_input, "lossgrad-input", 1e-4}};
  bool pass = true;
  std::string detail;
  for (const auto& c : cases) {
    double worst = 0.0;
    std::size_t max_p = 0;
    int checked = 0;
    while (checked < 10) {
      Graph g({3});
      g.dense(4).relu().dense(2);  // p = 26
      const ParamVector p = oracle::random_params(rng, g, 0.8);
      const std::size_t m = c.kind == PenaltyKind::mgs_logdet ? 2 : 1 + rng.below(4);
      const Batch b{oracle::random_matrix(rng, m, 3), oracle::labels(rng, m, 2)};
      if (oracle::naive_forward(g, p, b.inputs).min_abs_preactivation < 2e-2) continue;
      if (c.kind == PenaltyKind::mgs_logdet) {
        const auto ev = batch_kernel(g, p, b.inputs).spectrum();
        if (ev.back() < 1e-2 * ev.front()) continue;
      }
      ++checked;
      max_p = std::max(max_p, p.size());
      const PenaltyOptions opts{LossKind::softmax_cross_entropy};
      const ParamVector grad = penalty_gradient(g, p, b, c.kind, 0.5, opts);
      auto f = [&](const ParamVector& q) { return penalty_value(g, q, b, c.kind, 0.5, opts); };
      worst = std::max(worst, oracle::max_rel_err(grad.values(), oracle::fd_gradient(f, p)));
    }
    pass = pass && worst <= c.tol && max_p <= 50;
    detail += std::string(detail.empty() ? "" : ", ") + c.name + " " + fmt("%.1e", worst);
  }
  return {pass, "p=26, max rel err vs central FD: " + detail};
}

cli::DataSpec spec_for(const std::string& dataset) {
  cli::DataSpec d;
  d.dataset = dataset;
  d.data_dir = MGSLAB_DATA_DIR;
  return d;
}

Verdict two_circles_behaviour() {
  const double alpha = tuned("two-circles", "mgs-trace");
  TrainConfig base;
  base.arch = {ArchKind::fcn, 3, 64, 0.0};
  base.epochs = 200;
  base.seed = 1;
  const auto data = cli::make_factory(spec_for("two-circles"));
  const ScenarioResult plain = run_scenario(base, {"none", 400, 0.2, {}, 5}, data);
  const ScenarioResult mgs = run_scenario(base, {"mgs", 400, 0.2, {RegulariserKind::mgs_trace, alpha}, 5}, data);
  if (plain.completed_runs != 5 || mgs.completed_runs != 5) return {false, "runs failed"};
  int lower_tr = 0, higher_acc = 0;
  std::string per_seed;
  for (std::size_t r = 0; r < 5; ++r) {
    const auto trk = [](const MetricRow& row) { return *row.tr_k; };
    const auto acc = [](const MetricRow& row) { return *row.test_accuracy; };
    const double t0 = final_value(column(plain.traces[r], trk)), t1 = final_value(column(mgs.traces[r], trk));
    const double a0 = final_value(column(plain.traces[r], acc)), a1 = final_value(column(mgs.traces[r], acc));
    lower_tr += t1 < t0;
    higher_acc += a1 > a0;
    per_seed += " [" + fmt("%.3g", t0) + "/" + fmt("%.3g", t1) + " " + fmt("%.3f", a0) + "/" + fmt("%.3f", a1) + "]";
  }
  return {lower_tr >= 4 && higher_acc >= 4,
          "alpha " + fmt("%g", alpha) + ": lower tr_K " + std::to_string(lower_tr) + "/5, higher accuracy " +
              std::to_string(higher_acc) + "/5; per seed [trK none/mgs acc none/mgs]" + per_seed};
}

Verdict mnist_behaviour() {
  const double alpha = tuned("mnist", "mgs-trace");
  TrainConfig base;
  base.epochs = 50;
  base.seed = 1;
  base.kernel_metrics = false;
  const auto data = cli::make_factory(spec_for("mnist"));
  const ScenarioResult plain = run_scenario(base, {"none", 1000, 0.4, {}, 3}, data);
  const ScenarioResult mgs = run_scenario(base, {"mgs", 1000, 0.4, {RegulariserKind::mgs_trace, alpha}, 3}, data);
  if (plain.completed_runs != 3 || mgs.completed_runs != 3) {
    std::string why;
    for (const auto& f : plain.failures) why += " " + f;
    for (const auto& f : mgs.failures) why += " " + f;
    return {false, "runs failed:" + why};
  }
  const double gain = mgs.final_mean - plain.final_mean;
  const double mgs_gap = mgs.best - mgs.final_mean, plain_gap = plain.best - plain.final_mean;
  const bool a = gain >= 0.10, b = mgs_gap <= 0.03, c = plain_gap >= 0.10;
  return {a && b && c, "alpha " + fmt("%g", alpha) + ": final none " + fmt("%.3f", plain.final_mean) + " (max " +
                           fmt("%.3f", plain.best) + "), mgs " + fmt("%.3f", mgs.final_mean) + " (max " +
                           fmt("%.3f", mgs.best) + "); (a) gain " + fmt("%.3f", gain) + (a ? " ok" : " FAIL") +
                           ", (b) mgs gap " + fmt("%.3f", mgs_gap) + (b ? " ok" : " FAIL") + ", (c) none gap " +
                           fmt("%.3f", plain_gap) + (c ? " ok" : " FAIL")};
}

Verdict singular_kernel() {
  Rng rng(107);
  const Graph g = build({ArchKind::fcn, 2, 16, 0.0}, {4}, 3);
  const ParamVector p = init(g, {7});
  Tensor x = oracle::random_matrix(rng, 6, 4);
  for (std::size_t c = 0; c < 4; ++c) x(5, c) = x(2, c);
  const Batch b{x, oracle::labels(rng, 6, 3)};
  const bool missing = !logdet_metric(batch_kernel(g, p, x)).has_value();
  std::string message;
  try {
    penalty_gradient(g, p, b, PenaltyKind::mgs_logdet, 1.0, {LossKind::softmax_cross_entropy});
  } catch (const SingularKernelError& e) {
    message = e.what();
  }
  const bool named = message.find("singular kernel") != std::string::npos;
  // The same batch without the duplicate is fine.
  const Tensor unique = x.slice_rows(0, 5);
  const bool healthy = logdet_metric(batch_kernel(g, p, unique)).has_value();
  return {missing && named && healthy, std::string("metric mode ") + (missing ? "missing" : "PRESENT") +
                                           ", penalty mode: " + (message.empty() ? "no error" : message) +
                                           "; deduplicated batch logdet " + (healthy ? "finite" : "missing")};
}

Verdict lossgrad_bound_check() {
  Rng rng(108);
  double min_slack = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 100; ++trial) {
    const bool ce = trial % 2 == 0;
    const std::size_t m = 1 + rng.below(10), d = 1 + rng.below(6), q = 1 + rng.below(4) + (ce ? 1 : 0);
    const Graph g = oracle::random_mlp(rng, d, q);
    const ParamVector p = oracle::random_params(rng, g, 0.2 + rng.uniform());
    const Batch b{oracle::random_matrix(rng, m, d), ce ? oracle::labels(rng, m, q) : oracle::random_matrix(rng, m, q)};
    const auto bound = lossgrad_bound(g, p, b, ce ? LossKind::softmax_cross_entropy : LossKind::mse);
    min_slack = std::min(min_slack, bound.slack() / std::max(bound.rhs, 1e-300));
  }
  return {min_slack >= 0.0, "100 configurations, min relative slack " + fmt("%.3e", min_slack)};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Verdict determinism() {
  testing_support::TempDir dir;
  std::ostringstream out, err;
  std::string detail;
  bool pass = true;
  const std::vector<std::vector<std::string>> runs = {
      {"--regulariser", "mgs-trace", "--alpha", "1e-4", "--label-noise", "0.2"},
      {"--regulariser", "dropout", "--alpha", "0.2", "--label-noise", "0.2"},
      {"--dataset", "regression", "--regulariser", "mgs-logdet", "--alpha", "1e-3", "--batch-size", "4"}};
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const std::string a = dir.file("a" + std::to_string(k)), b = dir.file("b" + std::to_string(k)),
                      c = dir.file("c" + std::to_string(k));
    std::vector<std::string> args = {"train", "--train-size", "400", "--layers", "3", "--width", "64", "--epochs",
                                     "3", "--seed", "11", "--out", a};
    args.insert(args.end(), runs[k].begin(), runs[k].end());
    int code = cli::run_cli(args, out, err);
    code |= cli::run_cli({"train", "--manifest", a + "/manifest.json", "--out", b}, out, err);
    code |= cli::run_cli({"train", "--manifest", a + "/manifest.json", "--out", c}, out, err);
    const std::string first = slurp(a + "/metrics.csv");
    const bool same = code == 0 && !first.empty() && first == slurp(b + "/metrics.csv") &&
                      first == slurp(c + "/metrics.csv");
    pass = pass && same;
    detail += std::string(detail.empty() ? "" : ", ") + runs[k][1] + (same ? " identical" : " DIFFERS") + " (" +
              std::to_string(first.size()) + " bytes)";
  }
  if (!pass) detail += "; " + err.str();
  return {pass, "original + 2 manifest reruns: " + detail};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  Verdict (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mgslab acceptance criteria"};
  int only = 0;
  app.add_option("--only", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const Criterion all[] = {{1, "update prediction", 10, update_prediction},
                           {2, "trace identity", 5, trace_identity},
                           {3, "gram/scatter spectra", 30, spectra},
                           {4, "double backprop", 30, double_backprop},
                           {5, "two circles", 300, two_circles_behaviour},
                           {6, "noisy mnist", 1800, mnist_behaviour},
                           {7, "singular kernel", 5, singular_kernel},
                           {8, "loss-gradient bound", 10, lossgrad_bound_check},
                           {9, "determinism", 60, determinism}};
  bool all_pass = true;
  for (const auto& c : all) {
    if (only && c.id != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = s <= c.budget_s;
    const bool pass = v.pass && in_time;
    all_pass = all_pass && pass;
    std::cout << "criterion " << c.id << " (" << c.name << "): " << (pass ? "PASS" : "FAIL") << " - " << v.detail
              << "; " << fmt("%.1f", s) << " s of " << fmt("%g", c.budget_s) << " s" << (in_time ? "" : " OVER BUDGET")
              << std::endl;
  }
  return all_pass ? 0 : 1;
}
