#include "flowcast/metrics.hpp"

#include "flowcast/textio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace flowcast::metrics {

bool FutureGroundTruth::any_valid() const {
  for (bool v : valid)
    if (v) return true;
  return false;
}

FutureGroundTruth future_ground_truth(const scenario::AgentTrack& track, FrameIndex t, int tau_f) {
  if (tau_f < 1) throw std::invalid_argument("future ground truth: tau_f must be >= 1");
  FutureGroundTruth gt;
  gt.positions.resize(static_cast<std::size_t>(tau_f));
  gt.valid.assign(static_cast<std::size_t>(tau_f), false);
  for (int j = 1; j <= tau_f; ++j) {
    const FrameIndex frame = t + j;
    if (!track.covers(frame)) continue;
    const scenario::TrackPoint& point = track.at(frame);
    gt.positions[static_cast<std::size_t>(j - 1)] = point.position;
    gt.valid[static_cast<std::size_t>(j - 1)] = point.visible;
  }
  return gt;
}

void MetricsConfig::validate() const {
  if (!(mr_threshold > 0.0)) throw std::invalid_argument("metrics: mr_threshold must be positive");
}

std::vector<int> top_k_modes(const MultiModalPrediction& prediction, int k_eval) {
  if (k_eval < 1) throw std::invalid_argument("metrics: k_eval must be >= 1");
  std::vector<int> order(static_cast<std::size_t>(prediction.num_modes()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return prediction.confidences()[static_cast<std::size_t>(a)] >
           prediction.confidences()[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(std::min(k_eval, prediction.num_modes())));
  return order;
}

namespace {

void check_horizon(const MultiModalPrediction& prediction, const FutureGroundTruth& gt) {
  if (prediction.horizon() != gt.horizon())
    throw std::invalid_argument("metrics: prediction and ground-truth horizons differ");
}

}  // namespace

std::optional<double> min_fde(const MultiModalPrediction& prediction, const Position2& anchor,
                              const FutureGroundTruth& gt, int k_eval) {
  check_horizon(prediction, gt);
  if (!gt.endpoint_valid()) return std::nullopt;
  const Vec2 target = gt.positions.back().vec();
  double best = std::numeric_limits<double>::infinity();
  for (int k : top_k_modes(prediction, k_eval)) {
    Vec2 end = anchor.vec();
    for (const Vec2& step : prediction.modes()[static_cast<std::size_t>(k)].steps()) end += step;
    best = std::min(best, (end - target).norm());
  }
  return best;
}

std::optional<double> min_ade(const MultiModalPrediction& prediction, const Position2& anchor,
                              const FutureGroundTruth& gt, int k_eval) {
  check_horizon(prediction, gt);
  if (!gt.any_valid()) return std::nullopt;
  double best = std::numeric_limits<double>::infinity();
  for (int k : top_k_modes(prediction, k_eval)) {
    Vec2 pos = anchor.vec();
    double sum = 0.0;
    int count = 0;
    const auto& steps = prediction.modes()[static_cast<std::size_t>(k)].steps();
    for (int j = 0; j < gt.horizon(); ++j) {
      pos += steps[static_cast<std::size_t>(j)];
      if (!gt.valid[static_cast<std::size_t>(j)]) continue;
      sum += (pos - gt.positions[static_cast<std::size_t>(j)].vec()).norm();
      ++count;
    }
    best = std::min(best, sum / count);
  }
  return best;
}

double miss_rate(const std::vector<std::optional<double>>& min_fdes, double threshold) {
  long defined = 0;
  long missed = 0;
  for (const auto& v : min_fdes) {
    if (!v) continue;
    ++defined;
    if (*v > threshold) ++missed;
  }
  if (defined == 0) return 0.0;
  return static_cast<double>(missed) / static_cast<double>(defined);
}

double fluctuation(const MultiModalPrediction& previous, const Position2& previous_anchor,
                   const MultiModalPrediction& current, const Position2& current_anchor,
                   bool stacked) {
  if (previous.agent_id() != current.agent_id())
    throw std::invalid_argument("fluctuation: predictions are for different agents");
  if (current.query_frame() != previous.query_frame() + 1)
    throw std::invalid_argument("fluctuation: predictions must be one frame apart");
  if (previous.horizon() != current.horizon())
    throw std::invalid_argument("fluctuation: horizons differ");
  const int tau_f = previous.horizon();
  if (tau_f < 2) throw std::invalid_argument("fluctuation: needs a horizon of at least 2");

  const std::vector<Position2> abs_prev = to_absolute(
      previous_anchor, previous.modes()[static_cast<std::size_t>(previous.most_confident_mode())]);
  const std::vector<Position2> abs_curr = to_absolute(
      current_anchor, current.modes()[static_cast<std::size_t>(current.most_confident_mode())]);

  // abs_prev[i] sits at frame t+i for a query at t-1; abs_curr[i-1] sits at
  // the same frame for the query at t. The overlap spans tau_f - 1 frames.
  double sum = 0.0;
  double sq_sum = 0.0;
  for (int i = 1; i < tau_f; ++i) {
    const double d = (abs_prev[static_cast<std::size_t>(i)].vec() -
                      abs_curr[static_cast<std::size_t>(i - 1)].vec())
                         .norm();
    sum += d;
    sq_sum += d * d;
  }
  if (stacked) return std::sqrt(sq_sum) / (tau_f - 1);
  return sum / (tau_f - 1);
}

MetricsAccumulator::MetricsAccumulator(HorizonConfig horizon, MetricsConfig config)
    : horizon_(horizon), config_(config) {
  horizon_.validate();
  config_.validate();
}

void MetricsAccumulator::add_scenario(const scenario::Scenario& scenario,
                                      const scenario::QuerySchedule& schedule,
                                      const stream::PredictionLog& log) {
  if (log.tau_f != horizon_.tau_f)
    throw std::invalid_argument("metrics: log horizon differs from the configured tau_f");

  std::map<std::pair<FrameIndex, std::string>, const stream::QueryRecord*> by_query;
  for (const stream::QueryRecord& r : log.records) {
    if (!by_query.emplace(std::make_pair(r.frame, r.agent_id), &r).second)
      throw std::invalid_argument("metrics: duplicate log record for frame " +
                                  std::to_string(r.frame) + " agent " + r.agent_id);
  }
  if (log.records.size() != schedule.queries.size()) {
    // Either a scheduled query is missing (named below) or the log carries
    // records nobody asked for.
    std::map<std::pair<FrameIndex, std::string>, bool> scheduled;
    for (const auto& q : schedule.queries) scheduled[{q.frame, q.agent_id}] = true;
    for (const stream::QueryRecord& r : log.records)
      if (!scheduled.count({r.frame, r.agent_id}))
        throw std::invalid_argument("metrics: unscheduled log record for frame " +
                                    std::to_string(r.frame) + " agent " + r.agent_id);
  }

  const int scenario_index = scenario_count_++;

  // Per-agent trail of the previous frame's evaluated prediction, for the
  // temporal coherence pairs.
  struct Trail {
    FrameIndex frame = -2;
    const stream::QueryRecord* record = nullptr;
  };
  std::map<std::string, Trail> trails;

  for (const scenario::Query& q : schedule.queries) {
    const auto found = by_query.find(std::make_pair(q.frame, q.agent_id));
    if (found == by_query.end())
      throw std::invalid_argument("metrics: log is missing the scheduled query at frame " +
                                  std::to_string(q.frame) + " for agent " + q.agent_id);
    const stream::QueryRecord& record = *found->second;
    if (record.subset != q.subset)
      throw std::invalid_argument("metrics: subset label mismatch at frame " +
                                  std::to_string(q.frame) + " for agent " + q.agent_id);

    const scenario::AgentTrack* track = scenario.find(q.agent_id);
    if (!track) throw std::invalid_argument("metrics: unknown agent " + q.agent_id);

    const MultiModalPrediction& final_prediction = record.refined ? *record.refined : record.raw;
    if (final_prediction.horizon() != horizon_.tau_f)
      throw std::invalid_argument("metrics: record horizon differs from tau_f");

    const FutureGroundTruth gt = future_ground_truth(*track, q.frame, horizon_.tau_f);
    AgentCell& cell =
        cells_[std::make_tuple(scenario_index, q.agent_id, static_cast<int>(q.subset))];
    cell.queries += 1;

    if (const auto fde6 = min_fde(final_prediction, record.anchor, gt, 6)) {
      const auto fde1 = min_fde(final_prediction, record.anchor, gt, 1);
      cell.fde6_sum += *fde6;
      cell.fde1_sum += *fde1;
      cell.fde_count += 1;
      if (*fde6 > config_.mr_threshold) cell.miss6 += 1;
      if (*fde1 > config_.mr_threshold) cell.miss1 += 1;
    }
    if (const auto ade6 = min_ade(final_prediction, record.anchor, gt, 6)) {
      const auto ade1 = min_ade(final_prediction, record.anchor, gt, 1);
      cell.ade6_sum += *ade6;
      cell.ade1_sum += *ade1;
      cell.ade_count += 1;
    }

    if (horizon_.tau_f >= 2) {
      Trail& trail = trails[q.agent_id];
      if (trail.record && trail.frame == q.frame - 1) {
        const stream::QueryRecord& prev = *trail.record;
        const MultiModalPrediction& prev_final = prev.refined ? *prev.refined : prev.raw;
        cell.fluct_sum += fluctuation(prev_final, prev.anchor, final_prediction, record.anchor,
                                      config_.stacked_fluctuation);
        cell.fluct_pairs += 1;
      }
      trail.frame = q.frame;
      trail.record = &record;
    }
  }
}

namespace {

struct Mean {
  double sum = 0.0;
  long n = 0;

  void add(double v) {
    sum += v;
    ++n;
  }
  std::optional<double> value() const {
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  }
};

std::optional<double> overall_of(const std::array<SubsetReport, 4>& subsets,
                                 std::optional<double> SubsetReport::*field) {
  Mean m;
  for (const SubsetReport& s : subsets)
    if (s.*field) m.add(*(s.*field));
  return m.value();
}

}  // namespace

MetricsReport MetricsAccumulator::report() const {
  MetricsReport report;
  std::array<Mean, 4> fde6, ade6, mr6, fde1, ade1, mr1, fluct;

  for (const auto& [key, cell] : cells_) {
    const int subset = std::get<2>(key);
    SubsetReport& sub = report.subsets[static_cast<std::size_t>(subset)];
    sub.queries += cell.queries;
    sub.agents += 1;
    if (cell.fde_count > 0) {
      const double n = static_cast<double>(cell.fde_count);
      fde6[static_cast<std::size_t>(subset)].add(cell.fde6_sum / n);
      fde1[static_cast<std::size_t>(subset)].add(cell.fde1_sum / n);
      mr6[static_cast<std::size_t>(subset)].add(static_cast<double>(cell.miss6) / n);
      mr1[static_cast<std::size_t>(subset)].add(static_cast<double>(cell.miss1) / n);
    }
    if (cell.ade_count > 0) {
      const double n = static_cast<double>(cell.ade_count);
      ade6[static_cast<std::size_t>(subset)].add(cell.ade6_sum / n);
      ade1[static_cast<std::size_t>(subset)].add(cell.ade1_sum / n);
    }
    if (cell.fluct_pairs > 0)
      fluct[static_cast<std::size_t>(subset)].add(cell.fluct_sum /
                                                  static_cast<double>(cell.fluct_pairs));
  }

  for (std::size_t s = 0; s < 4; ++s) {
    SubsetReport& sub = report.subsets[s];
    sub.min_fde_k6 = fde6[s].value();
    sub.min_ade_k6 = ade6[s].value();
    sub.mr_k6 = mr6[s].value();
    sub.min_fde_k1 = fde1[s].value();
    sub.min_ade_k1 = ade1[s].value();
    sub.mr_k1 = mr1[s].value();
    sub.fluct = fluct[s].value();
    report.total_queries += sub.queries;
  }

  report.overall_min_fde_k6 = overall_of(report.subsets, &SubsetReport::min_fde_k6);
  report.overall_min_ade_k6 = overall_of(report.subsets, &SubsetReport::min_ade_k6);
  report.overall_mr_k6 = overall_of(report.subsets, &SubsetReport::mr_k6);
  report.overall_min_fde_k1 = overall_of(report.subsets, &SubsetReport::min_fde_k1);
  report.overall_min_ade_k1 = overall_of(report.subsets, &SubsetReport::min_ade_k1);
  report.overall_mr_k1 = overall_of(report.subsets, &SubsetReport::mr_k1);
  report.overall_fluct = overall_of(report.subsets, &SubsetReport::fluct);
  return report;
}

namespace {

std::string csv_opt(const std::optional<double>& v) {
  if (!v) return "";
  return textio::format_double(*v);
}

std::string text_opt(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

}  // namespace

void write_report_csv(std::ostream& out, const MetricsReport& report) {
  out << "subset,queries,agents,min_fde_k6,min_ade_k6,mr_k6,min_fde_k1,min_ade_k1,mr_k1,"
         "fluctuation\n";
  for (Subset s : kAllSubsets) {
    const SubsetReport& sub = report.subset(s);
    out << to_string(s) << ',' << sub.queries << ',' << sub.agents << ',' << csv_opt(sub.min_fde_k6)
        << ',' << csv_opt(sub.min_ade_k6) << ',' << csv_opt(sub.mr_k6) << ','
        << csv_opt(sub.min_fde_k1) << ',' << csv_opt(sub.min_ade_k1) << ',' << csv_opt(sub.mr_k1)
        << ',' << csv_opt(sub.fluct) << '\n';
  }
  out << "overall," << report.total_queries << ",," << csv_opt(report.overall_min_fde_k6) << ','
      << csv_opt(report.overall_min_ade_k6) << ',' << csv_opt(report.overall_mr_k6) << ','
      << csv_opt(report.overall_min_fde_k1) << ',' << csv_opt(report.overall_min_ade_k1) << ','
      << csv_opt(report.overall_mr_k1) << ',' << csv_opt(report.overall_fluct) << '\n';
}

void write_report_text(std::ostream& out, const MetricsReport& report) {
  char line[200];
  std::snprintf(line, sizeof line, "%-16s %8s %7s %9s %9s %7s %9s %9s %7s %9s\n", "subset",
                "queries", "agents", "fde(k6)", "ade(k6)", "mr(k6)", "fde(k1)", "ade(k1)", "mr(k1)",
                "fluct");
  out << line;
  for (Subset s : kAllSubsets) {
    const SubsetReport& sub = report.subset(s);
    std::snprintf(line, sizeof line, "%-16s %8ld %7ld %9s %9s %7s %9s %9s %7s %9s\n",
                  to_string(s).c_str(), sub.queries, sub.agents, text_opt(sub.min_fde_k6).c_str(),
                  text_opt(sub.min_ade_k6).c_str(), text_opt(sub.mr_k6).c_str(),
                  text_opt(sub.min_fde_k1).c_str(), text_opt(sub.min_ade_k1).c_str(),
                  text_opt(sub.mr_k1).c_str(), text_opt(sub.fluct).c_str());
    out << line;
  }
  std::snprintf(line, sizeof line, "%-16s %8ld %7s %9s %9s %7s %9s %9s %7s %9s\n", "overall",
                report.total_queries, "", text_opt(report.overall_min_fde_k6).c_str(),
                text_opt(report.overall_min_ade_k6).c_str(), text_opt(report.overall_mr_k6).c_str(),
                text_opt(report.overall_min_fde_k1).c_str(),
                text_opt(report.overall_min_ade_k1).c_str(), text_opt(report.overall_mr_k1).c_str(),
                text_opt(report.overall_fluct).c_str());
  out << line;
}

std::string report_csv(const MetricsReport& report) {
  std::ostringstream out;
  write_report_csv(out, report);
  return out.str();
}

std::string report_text(const MetricsReport& report) {
  std::ostringstream out;
  write_report_text(out, report);
  return out.str();
}

}  // namespace flowcast::metrics
