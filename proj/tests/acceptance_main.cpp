// Acceptance suite: end-to-end checks of the engine against independent
// oracles, finite differences, trend experiments on the synthetic benchmark,
// and pipeline determinism. One [PASS]/[FAIL] line per criterion; exit code
// is the number of failures.

#include "flowcast/checkpoint.hpp"
#include "flowcast/cli.hpp"
#include "flowcast/config.hpp"
#include "flowcast/core.hpp"
#include "flowcast/dfilter.hpp"
#include "flowcast/forecast.hpp"
#include "flowcast/metrics.hpp"
#include "flowcast/scenario.hpp"
#include "flowcast/streamer.hpp"
#include "flowcast/training.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace flowcast;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

struct Outcome {
  bool passed = false;
  std::string detail;
};

int g_failures = 0;

void run_criterion(int id, const std::string& name, double budget_seconds,
                   const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome outcome;
  try {
    outcome = body();
  } catch (const std::exception& e) {
    outcome.passed = false;
    outcome.detail = std::string("exception: ") + e.what();
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (budget_seconds > 0.0 && seconds >= budget_seconds) {
    outcome.passed = false;
    outcome.detail += (outcome.detail.empty() ? "" : "; ") + std::string("over time budget");
  }
  std::ostringstream line;
  line << (outcome.passed ? "[PASS]" : "[FAIL]") << " criterion " << id << ": " << name << " ("
       << outcome.detail << "; " << std::fixed << std::setprecision(1) << seconds << " s";
  if (budget_seconds > 0.0) line << " of " << std::setprecision(0) << budget_seconds << " s budget";
  line << ")";
  std::cout << line.str() << std::endl;
  if (!outcome.passed) ++g_failures;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

Position2 pos(double x, double y) { return Position2{x, y, std::nullopt}; }

struct TempDir {
  std::string path;
  TempDir() {
    std::string tmpl = "/tmp/flowcast_accept_XXXXXX";
    if (mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const std::string& name) const { return (fs::path(path) / name).string(); }
};

// ---------------------------------------------------------------------------
// Criterion 1: displacement metrics against brute-force recomputation.
// ---------------------------------------------------------------------------

std::vector<Position2> absolute(const Position2& anchor, const MovementTrajectory& mode) {
  std::vector<Position2> out;
  double x = anchor.x, y = anchor.y;
  for (const Vec2& s : mode.steps()) {
    x += s.x();
    y += s.y();
    out.push_back(pos(x, y));
  }
  return out;
}

Outcome criterion_metric_oracles() {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> coord(-50.0, 50.0);
  std::uniform_real_distribution<double> step(-2.0, 2.0);
  std::uniform_real_distribution<double> conf(0.05, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  constexpr int kInstances = 1000;
  double max_err = 0.0;
  long fluct_checked = 0;
  for (int inst = 0; inst < kInstances; ++inst) {
    const int tau_f = 1 + static_cast<int>(rng() % 6);
    const int num_modes = 1 + static_cast<int>(rng() % 4);
    const int k_eval = 1 + static_cast<int>(rng() % 5);  // may exceed the mode count

    auto random_prediction = [&](FrameIndex frame) {
      std::vector<MovementTrajectory> modes;
      std::vector<double> confidences;
      for (int k = 0; k < num_modes; ++k) {
        std::vector<Vec2> steps;
        for (int j = 0; j < tau_f; ++j) steps.emplace_back(step(rng), step(rng));
        modes.emplace_back(std::move(steps));
        confidences.push_back(conf(rng));
      }
      // Exercise tie-breaking on equal confidences.
      if (num_modes > 1 && unit(rng) < 0.25) confidences[static_cast<std::size_t>(rng() % num_modes)] = confidences[0];
      return MultiModalPrediction("agent", frame, std::move(modes), std::move(confidences));
    };

    const Position2 anchor = pos(coord(rng), coord(rng));
    const MultiModalPrediction prediction = random_prediction(10);

    metrics::FutureGroundTruth gt;
    bool any = false;
    for (int j = 0; j < tau_f; ++j) {
      gt.positions.push_back(pos(coord(rng), coord(rng)));
      const bool v = unit(rng) < 0.6;
      gt.valid.push_back(v);
      any = any || v;
    }

    // Brute force: rank modes by confidence (stable, ties to lower index).
    std::vector<int> order(static_cast<std::size_t>(prediction.num_modes()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return prediction.confidences()[static_cast<std::size_t>(a)] >
             prediction.confidences()[static_cast<std::size_t>(b)];
    });
    const int take = std::min(k_eval, prediction.num_modes());

    std::optional<double> brute_fde;
    if (gt.valid.back()) {
      double best = std::numeric_limits<double>::infinity();
      for (int i = 0; i < take; ++i) {
        const auto abs = absolute(anchor, prediction.modes()[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
        const double d = (abs.back().vec() - gt.positions.back().vec()).norm();
        best = std::min(best, d);
      }
      brute_fde = best;
    }
    std::optional<double> brute_ade;
    if (any) {
      double best = std::numeric_limits<double>::infinity();
      for (int i = 0; i < take; ++i) {
        const auto abs = absolute(anchor, prediction.modes()[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
        double sum = 0.0;
        long count = 0;
        for (int j = 0; j < tau_f; ++j) {
          if (!gt.valid[static_cast<std::size_t>(j)]) continue;
          sum += (abs[static_cast<std::size_t>(j)].vec() - gt.positions[static_cast<std::size_t>(j)].vec()).norm();
          ++count;
        }
        best = std::min(best, sum / static_cast<double>(count));
      }
      brute_ade = best;
    }

    const std::optional<double> fde = metrics::min_fde(prediction, anchor, gt, k_eval);
    const std::optional<double> ade = metrics::min_ade(prediction, anchor, gt, k_eval);
    if (fde.has_value() != brute_fde.has_value() || ade.has_value() != brute_ade.has_value())
      return {false, "defined-ness mismatch at instance " + std::to_string(inst)};
    if (fde) max_err = std::max(max_err, std::abs(*fde - *brute_fde));
    if (ade) max_err = std::max(max_err, std::abs(*ade - *brute_ade));

    // Fluctuation of two adjacent-frame predictions over their overlap.
    if (tau_f >= 2) {
      const Position2 prev_anchor = pos(coord(rng), coord(rng));
      const MultiModalPrediction prev = random_prediction(9);
      const auto prev_abs = absolute(prev_anchor, prev.modes()[static_cast<std::size_t>(prev.most_confident_mode())]);
      const auto cur_abs = absolute(anchor, prediction.modes()[static_cast<std::size_t>(prediction.most_confident_mode())]);
      double sum = 0.0, sq = 0.0;
      for (int j = 0; j + 1 < tau_f; ++j) {
        const double d = (prev_abs[static_cast<std::size_t>(j + 1)].vec() -
                          cur_abs[static_cast<std::size_t>(j)].vec())
                             .norm();
        sum += d;
        sq += d * d;
      }
      const double denom = static_cast<double>(tau_f - 1);
      const double brute_mean = sum / denom;
      const double brute_stacked = std::sqrt(sq) / denom;
      max_err = std::max(max_err, std::abs(metrics::fluctuation(prev, prev_anchor, prediction, anchor, false) - brute_mean));
      max_err = std::max(max_err, std::abs(metrics::fluctuation(prev, prev_anchor, prediction, anchor, true) - brute_stacked));
      ++fluct_checked;
    }
  }
  const bool ok = max_err <= 1e-10;
  return {ok, std::to_string(kInstances) + " instances, " + std::to_string(fluct_checked) +
                  " fluctuation pairs, max |difference| " + fmt(max_err, 3)};
}

// ---------------------------------------------------------------------------
// Criterion 2: filter steps against closed forms and an information filter.
// ---------------------------------------------------------------------------

Outcome criterion_kalman_oracles() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> mean_draw(-5.0, 5.0);
  std::uniform_real_distribution<double> var_draw(0.1, 3.0);

  // Scalar case: posterior of a Gaussian product in closed form.
  double max_scalar = 0.0;
  for (int i = 0; i < 500; ++i) {
    const double m = mean_draw(rng), p = var_draw(rng);
    const double z = mean_draw(rng), r = var_draw(rng);
    df::FilterState state;
    state.mean = Eigen::VectorXd::Constant(1, m);
    state.cov = Eigen::MatrixXd::Constant(1, 1, p);
    const df::FilterState post =
        df::update_step(state, Eigen::VectorXd::Constant(1, z), Eigen::VectorXd::Constant(1, r));
    const double want_mean = (m * r + z * p) / (p + r);
    const double want_var = p * r / (p + r);
    max_scalar = std::max(max_scalar, std::abs(post.mean[0] - want_mean));
    max_scalar = std::max(max_scalar, std::abs(post.cov(0, 0) - want_var));
    // Scalar predict: shift on n=1 is the identity, so only q enters.
    const df::FilterState pred = df::predict_step(state, 0.03);
    max_scalar = std::max(max_scalar, std::abs(pred.mean[0] - m));
    max_scalar = std::max(max_scalar, std::abs(pred.cov(0, 0) - (p + 0.03)));
  }

  // Matrix case: dense information-form filter with an explicit transition
  // matrix, against the gain-form recursion.
  double max_matrix = 0.0;
  for (int seq = 0; seq < 200; ++seq) {
    const int n = 1 + static_cast<int>(rng() % 4);
    const double q = 0.001 + 0.05 * std::uniform_real_distribution<double>(0.0, 1.0)(rng);

    Eigen::MatrixXd b = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return mean_draw(rng); });
    df::FilterState state;
    state.mean = Eigen::VectorXd::NullaryExpr(n, [&] { return mean_draw(rng); });
    state.cov = b * b.transpose() / static_cast<double>(n) + 0.5 * Eigen::MatrixXd::Identity(n, n);

    Eigen::VectorXd oracle_mean = state.mean;
    Eigen::MatrixXd oracle_cov = state.cov;
    const Eigen::MatrixXd a = df::transition_matrix(n);

    for (int t = 0; t < 6; ++t) {
      state = df::predict_step(state, q);
      oracle_mean = a * oracle_mean;
      oracle_cov = a * oracle_cov * a.transpose() + q * Eigen::MatrixXd::Identity(n, n);

      const Eigen::VectorXd z = Eigen::VectorXd::NullaryExpr(n, [&] { return mean_draw(rng); });
      const Eigen::VectorXd r = Eigen::VectorXd::NullaryExpr(n, [&] { return var_draw(rng); });
      state = df::update_step(state, z, r);
      const Eigen::MatrixXd r_inv = r.cwiseInverse().asDiagonal();
      const Eigen::MatrixXd info_post = oracle_cov.inverse() + r_inv;
      const Eigen::VectorXd eta_post = oracle_cov.inverse() * oracle_mean + r_inv * z;
      oracle_cov = info_post.inverse();
      oracle_mean = oracle_cov * eta_post;

      max_matrix = std::max(max_matrix, (state.mean - oracle_mean).cwiseAbs().maxCoeff());
      max_matrix = std::max(max_matrix, (state.cov - oracle_cov).cwiseAbs().maxCoeff());
    }
  }

  const bool ok = max_scalar <= 1e-12 && max_matrix <= 1e-8;
  return {ok, "scalar closed form max |difference| " + fmt(max_scalar, 3) +
                  ", information filter max |difference| " + fmt(max_matrix, 3)};
}

// ---------------------------------------------------------------------------
// Criterion 3: reverse-mode gradients of the unrolled streaming loss against
// central finite differences, every forecaster and covariance-net parameter.
// ---------------------------------------------------------------------------

train::UnrollSpec two_frame_spec(std::mt19937_64& rng, const HorizonConfig& horizon,
                                 stream::OcclusionPolicy policy) {
  std::uniform_real_distribution<double> jitter(-0.15, 0.15);
  train::UnrollSpec spec;
  spec.policy = policy;
  for (int i = 0; i < horizon.tau_h; ++i) spec.history.push_back(pos(1.0 * i, jitter(rng)));
  const double last_x = horizon.tau_h - 1;
  // Two unrolled frames; the second is occluded, so its window depends on the
  // first frame's prediction.
  spec.occluded = {false, true};
  spec.observed = {spec.history.back(), pos(0, 0)};
  for (int f = 0; f < 2; ++f) {
    std::vector<Position2> abs;
    std::vector<bool> valid;
    for (int j = 1; j <= horizon.tau_f; ++j) {
      abs.push_back(pos(last_x + f + 0.3 + 0.9 * j, 0.4 + jitter(rng)));
      valid.push_back(j != 2 || f != 1);
    }
    spec.gt_abs.push_back(std::move(abs));
    spec.gt_valid.push_back(std::move(valid));
  }
  return spec;
}

Outcome criterion_gradients() {
  const HorizonConfig horizon{4, 5, 2};
  constexpr double kStep = 1e-6;
  constexpr int kWanted = 20;

  int instances = 0;
  long probes = 0;
  double worst_ratio = 0.0;
  for (std::uint64_t seed = 1; seed <= 400 && instances < kWanted; ++seed) {
    std::mt19937_64 rng(seed);
    forecast::LearnedForecaster model(horizon, 8, 8);
    model.init(rng);
    df::CovarianceNet net(8, {8}, horizon.tau_f);
    net.init(rng);
    const auto policy = (seed % 2 == 0) ? stream::OcclusionPolicy::kSingleModal
                                        : stream::OcclusionPolicy::kMultiModal;
    const train::UnrollSpec spec = two_frame_spec(rng, horizon, policy);

    const train::UnrollGrads grads = train::unrolled_loss_grads(model, net, spec);
    // Only instances whose selection margins make central differences valid.
    if (grads.diagnostics.min_wta_gap < 5e-3) continue;
    if (grads.diagnostics.min_kink_margin < 5e-3) continue;
    if (policy == stream::OcclusionPolicy::kMultiModal && grads.diagnostics.min_confidence_gap < 5e-3)
      continue;

    auto probe = [&](nn::ParamArena& arena, const Eigen::VectorXd& analytic) {
      for (int i = 0; i < arena.size(); ++i) {
        const double saved = arena.values()[i];
        arena.values()[i] = saved + kStep;
        train::UnrollDiagnostics dplus;
        const double up = train::unrolled_loss(model, net, spec, &dplus);
        arena.values()[i] = saved - kStep;
        train::UnrollDiagnostics dminus;
        const double down = train::unrolled_loss(model, net, spec, &dminus);
        arena.values()[i] = saved;
        if (dplus.min_wta_gap < kStep || dminus.min_wta_gap < kStep) continue;
        const double fd = (up - down) / (2 * kStep);
        const double an = analytic[i];
        const double tol = 1e-6 + 1e-4 * std::max(std::abs(fd), std::abs(an));
        worst_ratio = std::max(worst_ratio, std::abs(fd - an) / tol);
        ++probes;
      }
    };
    probe(model.arena(), grads.model_grad);
    probe(net.arena(), grads.net_grad);
    ++instances;
  }

  const bool ok = instances >= kWanted && worst_ratio <= 1.0;
  return {ok, std::to_string(instances) + " instances, " + std::to_string(probes) +
                  " parameter probes, worst error at " + fmt(100.0 * worst_ratio, 3) +
                  "% of tolerance"};
}

// ---------------------------------------------------------------------------
// Criteria 4-8: trend experiments and invariants on the synthetic suite.
// ---------------------------------------------------------------------------

struct CellRun {
  std::string label;
  stream::OcclusionPolicy policy;
  bool use_refiner = false;
};

struct SuiteResults {
  std::array<metrics::MetricsReport, 5> reports;
  double max_diag_increase = -std::numeric_limits<double>::infinity();
  long filter_updates = 0;
  long fde_without_ade = 0;      // criterion 7 violations
  long k_monotonicity_bad = 0;   // criterion 8 violations (k6 > k1)
  long queries_checked = 0;
  std::string error;
};

const std::array<CellRun, 5> kCells = {{
    {"kalman", stream::OcclusionPolicy::kKalmanBaseline, false},
    {"multi", stream::OcclusionPolicy::kMultiModal, false},
    {"multi+df", stream::OcclusionPolicy::kMultiModal, true},
    {"single", stream::OcclusionPolicy::kSingleModal, false},
    {"single+df", stream::OcclusionPolicy::kSingleModal, true},
}};

SuiteResults run_trend_suite() {
  const HorizonConfig horizon{10, 12, 6};
  scenario::GeneratorConfig gen;  // defaults: mixed layout, 3..10-frame occlusions on turns
  gen.validate();

  // Train the covariance net on held-out scenarios with the same generator.
  forecast::AnalyticForecaster model(horizon);
  df::CovarianceNet net(model.feature_size(), {16}, horizon.tau_f);
  std::mt19937_64 rng(404);
  net.init(rng);
  df::RefinerConfig refiner_config;
  {
    std::vector<scenario::Scenario> train_suite;
    for (int i = 0; i < 8; ++i) train_suite.push_back(scenario::generate_scenario(31001 + i, gen));
    train::StreamingTrainConfig cfg = train::streaming_config();
    train::streaming_train(model, net, refiner_config, train_suite, cfg);
  }

  SuiteResults results;
  std::array<std::optional<metrics::MetricsAccumulator>, 5> accs;
  for (auto& a : accs) a.emplace(horizon, metrics::MetricsConfig{});

  df::Refiner refiner(refiner_config, &net);
  for (int s = 0; s < 100; ++s) {
    const scenario::Scenario scn = scenario::generate_scenario(20001 + s, gen);
    const scenario::QuerySchedule schedule = scenario::build_schedule(scn, horizon);
    for (std::size_t c = 0; c < kCells.size(); ++c) {
      const stream::StreamResult run = stream::run_stream(
          scn, schedule, model, kCells[c].policy, kCells[c].use_refiner ? &refiner : nullptr);
      accs[c]->add_scenario(scn, schedule, run.log);
      if (kCells[c].use_refiner) {
        results.max_diag_increase = std::max(results.max_diag_increase, run.refine_stats.max_diag_increase);
        results.filter_updates += run.refine_stats.updates;
      }
      for (const stream::QueryRecord& record : run.log.records) {
        const scenario::AgentTrack* track = scn.find(record.agent_id);
        if (track == nullptr) {
          results.error = "logged agent missing from scenario";
          return results;
        }
        const metrics::FutureGroundTruth gt =
            metrics::future_ground_truth(*track, record.frame, horizon.tau_f);
        const MultiModalPrediction& scored = record.refined ? *record.refined : record.raw;
        const auto fde6 = metrics::min_fde(scored, record.anchor, gt, 6);
        const auto fde1 = metrics::min_fde(scored, record.anchor, gt, 1);
        const auto ade6 = metrics::min_ade(scored, record.anchor, gt, 6);
        const auto ade1 = metrics::min_ade(scored, record.anchor, gt, 1);
        if ((fde6 && !ade6) || (fde1 && !ade1)) ++results.fde_without_ade;
        if (fde6 && fde1 && *fde6 > *fde1) ++results.k_monotonicity_bad;
        if (ade6 && ade1 && *ade6 > *ade1) ++results.k_monotonicity_bad;
        ++results.queries_checked;
      }
    }
  }
  for (std::size_t c = 0; c < kCells.size(); ++c) results.reports[c] = accs[c]->report();
  return results;
}

double mo_fde6(const metrics::MetricsReport& r) {
  const auto v = r.subset(Subset::kMovingOccluded).min_fde_k6;
  if (!v) throw std::runtime_error("moving-occluded minFDE undefined on the suite");
  return *v;
}
double mo_fde1(const metrics::MetricsReport& r) {
  const auto v = r.subset(Subset::kMovingOccluded).min_fde_k1;
  if (!v) throw std::runtime_error("moving-occluded minFDE(k=1) undefined on the suite");
  return *v;
}

Outcome criterion_occlusion_trend(const SuiteResults& suite) {
  const double kalman = mo_fde6(suite.reports[0]);
  const double multi = mo_fde6(suite.reports[1]);
  const double multi_df = mo_fde6(suite.reports[2]);
  const bool strict = multi < kalman;
  const bool ten_percent = multi <= 0.9 * kalman;
  const bool df_helps = multi_df < multi;
  return {strict && ten_percent && df_helps,
          "moving-occluded minFDE: kalman " + fmt(kalman) + ", multi " + fmt(multi) + " (" +
              fmt(100.0 * (1.0 - multi / kalman), 3) + "% lower), +df " + fmt(multi_df)};
}

Outcome criterion_multimodality_trend(const SuiteResults& suite) {
  // Four comparisons: k in {6, 1} x refiner in {none, df}.
  const double m6n = mo_fde6(suite.reports[1]), s6n = mo_fde6(suite.reports[3]);
  const double m6d = mo_fde6(suite.reports[2]), s6d = mo_fde6(suite.reports[4]);
  const double m1n = mo_fde1(suite.reports[1]), s1n = mo_fde1(suite.reports[3]);
  const double m1d = mo_fde1(suite.reports[2]), s1d = mo_fde1(suite.reports[4]);
  const int held = (m6n <= s6n) + (m6d <= s6d) + (m1n <= s1n) + (m1d <= s1d);
  return {held >= 3, "multi vs single moving-occluded minFDE, k6: " + fmt(m6n) + "/" + fmt(s6n) +
                         " raw, " + fmt(m6d) + "/" + fmt(s6d) + " df; k1: " + fmt(m1n) + "/" +
                         fmt(s1n) + " raw, " + fmt(m1d) + "/" + fmt(s1d) + " df; " +
                         std::to_string(held) + "/4 hold"};
}

Outcome criterion_coherence_trend(const SuiteResults& suite) {
  const auto raw = suite.reports[1];   // multi, no refiner
  const auto df = suite.reports[2];    // multi + df
  if (!raw.overall_fluct || !df.overall_fluct) return {false, "fluctuation undefined"};
  const double drop = 1.0 - *df.overall_fluct / *raw.overall_fluct;
  const auto raw_mv = raw.subset(Subset::kMovingVisible).min_fde_k6;
  const auto df_mv = df.subset(Subset::kMovingVisible).min_fde_k6;
  if (!raw_mv || !df_mv) return {false, "moving-visible minFDE undefined"};
  const double degradation = *df_mv / *raw_mv - 1.0;
  const bool ok = drop >= 0.10 && degradation <= 0.01;
  return {ok, "fluctuation " + fmt(*raw.overall_fluct) + " -> " + fmt(*df.overall_fluct) + " (" +
                  fmt(100.0 * drop, 3) + "% lower), moving-visible minFDE " + fmt(*raw_mv) +
                  " -> " + fmt(*df_mv) + " (" + fmt(100.0 * degradation, 3) + "% change)"};
}

Outcome criterion_set_inclusion(const SuiteResults& suite) {
  return {suite.fde_without_ade == 0,
          std::to_string(suite.queries_checked) + " query records across 5 runs, " +
              std::to_string(suite.fde_without_ade) + " with minFDE defined but minADE undefined"};
}

Outcome criterion_structural_invariants(const SuiteResults& suite) {
  std::string detail;
  bool ok = true;

  if (suite.k_monotonicity_bad != 0) {
    ok = false;
    detail += std::to_string(suite.k_monotonicity_bad) + " k-monotonicity violations; ";
  }
  if (!(suite.max_diag_increase <= 1e-12)) {
    ok = false;
    detail += "posterior diagonal grew by " + fmt(suite.max_diag_increase, 3) + "; ";
  }

  // Every overall value is the mean of its defined subset values.
  double worst = 0.0;
  for (const metrics::MetricsReport& report : suite.reports) {
    const auto check = [&](const std::optional<double> metrics::SubsetReport::* field,
                           const std::optional<double>& overall) {
      double sum = 0.0;
      int defined = 0;
      for (const metrics::SubsetReport& sub : report.subsets) {
        if (sub.*field) {
          sum += *(sub.*field);
          ++defined;
        }
      }
      if (defined == 0) {
        if (overall) worst = std::numeric_limits<double>::infinity();
        return;
      }
      if (!overall) {
        worst = std::numeric_limits<double>::infinity();
        return;
      }
      worst = std::max(worst, std::abs(*overall - sum / static_cast<double>(defined)));
    };
    check(&metrics::SubsetReport::min_fde_k6, report.overall_min_fde_k6);
    check(&metrics::SubsetReport::min_ade_k6, report.overall_min_ade_k6);
    check(&metrics::SubsetReport::mr_k6, report.overall_mr_k6);
    check(&metrics::SubsetReport::min_fde_k1, report.overall_min_fde_k1);
    check(&metrics::SubsetReport::min_ade_k1, report.overall_min_ade_k1);
    check(&metrics::SubsetReport::mr_k1, report.overall_mr_k1);
    check(&metrics::SubsetReport::fluct, report.overall_fluct);

    for (const metrics::SubsetReport& sub : report.subsets) {
      if (!sub.min_fde_k6) {
        ok = false;
        detail += "a subset has no defined minFDE; ";
      }
    }
  }
  if (worst > 1e-12) {
    ok = false;
    detail += "overall deviates from subset mean by " + fmt(worst, 3) + "; ";
  }

  return {ok, detail.empty()
                  ? "zero k-monotonicity violations over " + std::to_string(suite.queries_checked) +
                        " records, max posterior diagonal increase " +
                        fmt(suite.max_diag_increase, 3) + " over " +
                        std::to_string(suite.filter_updates) +
                        " filter updates, overall-vs-subset-mean max |difference| " + fmt(worst, 3)
                  : detail};
}

// ---------------------------------------------------------------------------
// Criterion 9: pipeline determinism through the command-line interface.
// ---------------------------------------------------------------------------

int quiet_cli(std::vector<std::string> args, std::string* err_out = nullptr) {
  std::ostringstream out, err;
  const int code = cli::run(std::move(args), out, err);
  if (code != 0 && err_out != nullptr) *err_out = err.str();
  return code;
}

Outcome criterion_determinism() {
  const char* cfg_json = R"({
    "horizon": {"tau_h": 8, "tau_f": 5, "num_modes": 3},
    "forecaster": {"feature_size": 16, "hidden": 16},
    "generator": {"agents_min": 5, "agents_max": 6,
                  "duration_min": 150, "duration_max": 160,
                  "layout": "mixed"}
  })";

  TempDir dir;
  const std::string cfg = dir / "config.json";
  {
    std::ofstream f(cfg);
    f << cfg_json;
  }

  std::array<std::string, 2> first_reports;
  std::string rerun_report;
  for (int run = 0; run < 2; ++run) {
    const std::string tag = std::to_string(run);
    const std::string data = dir / ("data" + tag);
    const std::string ck = dir / ("model" + tag + ".fcck");
    std::string err;
    if (quiet_cli({"generate", "--out", data, "--seed", "7", "--count", "3", "--config", cfg},
                  &err) != 0)
      return {false, "generate failed: " + err};
    if (quiet_cli({"train", "--stage", "pretrain", "--data", data, "--out", ck, "--config", cfg,
                   "--epochs", "2", "--seed", "11"},
                  &err) != 0)
      return {false, "train failed: " + err};
    for (int attempt = 0; attempt < 2; ++attempt) {
      const std::string rep = dir / ("report" + tag + "_" + std::to_string(attempt) + ".csv");
      if (quiet_cli({"evaluate", "--data", data, "--checkpoint", ck, "--config", cfg, "--report",
                     rep, "--policy", "multi", "--refiner", "none"},
                    &err) != 0)
        return {false, "evaluate failed: " + err};
      std::ifstream in(rep, std::ios::binary);
      std::ostringstream content;
      content << in.rdbuf();
      if (attempt == 0)
        first_reports[static_cast<std::size_t>(run)] = content.str();
      else if (run == 0)
        rerun_report = content.str();
      else if (content.str() != first_reports[1])
        return {false, "repeat evaluation differs within one pipeline"};
    }
  }
  if (first_reports[0] != rerun_report) return {false, "repeat evaluation differs within one pipeline"};
  if (first_reports[0] != first_reports[1]) return {false, "the two pipelines produced different reports"};
  if (first_reports[0].empty()) return {false, "empty report"};
  return {true, "two generate/train/evaluate pipelines and repeated evaluations byte-identical, " +
                    std::to_string(first_reports[0].size()) + "-byte report"};
}

}  // namespace

int main() {
  std::cout << "acceptance suite: streaming forecasting engine" << std::endl;

  run_criterion(1, "displacement metrics match brute-force recomputation", 10.0,
                criterion_metric_oracles);
  run_criterion(2, "filter steps match closed-form and information-filter oracles", 10.0,
                criterion_kalman_oracles);
  run_criterion(3, "unrolled streaming-loss gradients match central finite differences", 60.0,
                criterion_gradients);

  SuiteResults suite;
  const auto suite_start = std::chrono::steady_clock::now();
  std::string suite_error;
  try {
    suite = run_trend_suite();
    suite_error = suite.error;
  } catch (const std::exception& e) {
    suite_error = e.what();
  }
  const double suite_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - suite_start).count();

  if (!suite_error.empty()) {
    for (int id = 4; id <= 8; ++id)
      run_criterion(id, "synthetic-suite criterion", 0.0, [&]() -> Outcome {
        return {false, "suite failed: " + suite_error};
      });
  } else {
    run_criterion(4, "occlusion reasoning beats the extrapolation baseline", 0.0,
                  [&] { return criterion_occlusion_trend(suite); });
    if (suite_seconds >= 300.0) {
      std::cout << "[FAIL] criterion 4 runtime: suite took " << fmt(suite_seconds, 3)
                << " s, budget 300 s" << std::endl;
      ++g_failures;
    }
    run_criterion(5, "multi-modal occlusion filling beats the single-trajectory head", 0.0,
                  [&] { return criterion_multimodality_trend(suite); });
    run_criterion(6, "filtering lowers fluctuation without hurting visible accuracy", 0.0,
                  [&] { return criterion_coherence_trend(suite); });
    run_criterion(7, "defined minFDE implies defined minADE", 0.0,
                  [&] { return criterion_set_inclusion(suite); });
    run_criterion(8, "k-monotonicity, filter contraction, subset averaging", 0.0,
                  [&] { return criterion_structural_invariants(suite); });
  }

  run_criterion(9, "generate/train/evaluate pipeline is byte-deterministic", 600.0,
                criterion_determinism);

  std::cout << (g_failures == 0 ? "acceptance: all criteria passed"
                                : "acceptance: " + std::to_string(g_failures) + " criteria failed")
            << std::endl;
  return g_failures == 0 ? 0 : 1;
}
