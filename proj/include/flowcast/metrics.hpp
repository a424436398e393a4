#ifndef FLOWCAST_METRICS_HPP
#define FLOWCAST_METRICS_HPP

#include "flowcast/core.hpp"
#include "flowcast/scenario.hpp"
#include "flowcast/streamer.hpp"

#include <array>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace flowcast::metrics {

/// Absolute ground-truth positions for frames t+1 .. t+tau_f after a query
/// at frame t. positions[j] is meaningful only where valid[j]; validity
/// requires the agent to be alive and visible at that frame.
struct FutureGroundTruth {
  std::vector<Position2> positions;
  std::vector<bool> valid;

  int horizon() const { return static_cast<int>(positions.size()); }
  bool endpoint_valid() const { return !valid.empty() && valid.back(); }
  bool any_valid() const;
};

FutureGroundTruth future_ground_truth(const scenario::AgentTrack& track, FrameIndex t, int tau_f);

struct MetricsConfig {
  double mr_threshold = 2.0;  // meters
  /// Alternative fluctuation reading: l2 norm of the stacked differences
  /// divided by (tau_f - 1), instead of the mean per-frame distance.
  bool stacked_fluctuation = false;

  void validate() const;
};

/// Indices of the k highest-confidence modes, ties to the lower index,
/// clipped to the available mode count.
std::vector<int> top_k_modes(const MultiModalPrediction& prediction, int k_eval);

/// Endpoint error of the best of the top-k_eval modes; nullopt when the
/// ground truth endpoint is not visible.
std::optional<double> min_fde(const MultiModalPrediction& prediction, const Position2& anchor,
                              const FutureGroundTruth& gt, int k_eval);

/// Visibility-masked mean displacement error of the best of the top-k_eval
/// modes; nullopt when no future frame has ground truth.
std::optional<double> min_ade(const MultiModalPrediction& prediction, const Position2& anchor,
                              const FutureGroundTruth& gt, int k_eval);

/// Fraction of defined entries exceeding the threshold; 0 when none are
/// defined.
double miss_rate(const std::vector<std::optional<double>>& min_fdes, double threshold);

/// Temporal coherence of two predictions for the same agent on adjacent
/// frames: distance between their most-confident absolute trajectories over
/// the tau_f - 1 overlapped frames, in meters/frame.
double fluctuation(const MultiModalPrediction& previous, const Position2& previous_anchor,
                   const MultiModalPrediction& current, const Position2& current_anchor,
                   bool stacked = false);

struct SubsetReport {
  long queries = 0;
  long agents = 0;
  /// Aggregated per-agent means; nullopt when no agent had a defined value.
  std::optional<double> min_fde_k6;
  std::optional<double> min_ade_k6;
  std::optional<double> mr_k6;
  std::optional<double> min_fde_k1;
  std::optional<double> min_ade_k1;
  std::optional<double> mr_k1;
  std::optional<double> fluct;
};

struct MetricsReport {
  std::array<SubsetReport, 4> subsets;  // indexed by static_cast<int>(Subset)
  /// Arithmetic means over the subsets carrying a defined value.
  std::optional<double> overall_min_fde_k6;
  std::optional<double> overall_min_ade_k6;
  std::optional<double> overall_mr_k6;
  std::optional<double> overall_min_fde_k1;
  std::optional<double> overall_min_ade_k1;
  std::optional<double> overall_mr_k1;
  std::optional<double> overall_fluct;
  long total_queries = 0;

  const SubsetReport& subset(Subset s) const { return subsets[static_cast<std::size_t>(s)]; }
};

/// Streaming aggregation: feed each scenario's prediction log once, read the
/// report at the end. Logs are validated against their schedules; the first
/// scheduled query missing from a log is named in the error.
class MetricsAccumulator {
 public:
  MetricsAccumulator(HorizonConfig horizon, MetricsConfig config);

  void add_scenario(const scenario::Scenario& scenario, const scenario::QuerySchedule& schedule,
                    const stream::PredictionLog& log);

  MetricsReport report() const;

 private:
  struct AgentCell {
    long queries = 0;
    double fde6_sum = 0.0, fde1_sum = 0.0;
    long fde_count = 0;  // shared: defined iff endpoint visible, same for both k
    long miss6 = 0, miss1 = 0;
    double ade6_sum = 0.0, ade1_sum = 0.0;
    long ade_count = 0;
    double fluct_sum = 0.0;
    long fluct_pairs = 0;
  };

  HorizonConfig horizon_;
  MetricsConfig config_;
  int scenario_count_ = 0;
  /// (scenario index, agent id, subset) -> accumulators.
  std::map<std::tuple<int, std::string, int>, AgentCell> cells_;
};

void write_report_csv(std::ostream& out, const MetricsReport& report);
void write_report_text(std::ostream& out, const MetricsReport& report);
std::string report_csv(const MetricsReport& report);
std::string report_text(const MetricsReport& report);

}  // namespace flowcast::metrics

#endif  // FLOWCAST_METRICS_HPP
