#ifndef FLOWCAST_STREAMER_HPP
#define FLOWCAST_STREAMER_HPP

#include "flowcast/core.hpp"
#include "flowcast/dfilter.hpp"
#include "flowcast/forecast.hpp"
#include "flowcast/scenario.hpp"

#include <Eigen/Core>

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace flowcast::stream {

/// How an occluded agent's current position is produced before encoding.
enum class OcclusionPolicy {
  kMultiModal,      // first step of the most confident mode of the last prediction
  kSingleModal,     // first step of the dedicated single-trajectory head
  kKalmanBaseline,  // predicted mean of a per-agent constant-velocity Kalman filter
};

std::string to_string(OcclusionPolicy policy);
OcclusionPolicy policy_from_string(const std::string& name);

struct KalmanBaselineConfig {
  double process_noise = 0.1;      // std dev added to every state entry per frame, m
  double observation_noise = 0.05; // std dev of observed positions, m
  double initial_position_std = 0.05;
  double initial_velocity_std = 1.0;

  void validate() const;
};

/// Constant-velocity filter over (x, y, vx, vy) with one frame per step.
class CvKalman {
 public:
  bool initialized() const { return initialized_; }
  void init(const Vec2& position, const KalmanBaselineConfig& config);
  void predict(const KalmanBaselineConfig& config);
  void update(const Vec2& position, const KalmanBaselineConfig& config);

  Vec2 position() const { return state_.head<2>(); }
  Vec2 velocity() const { return state_.tail<2>(); }
  const Eigen::Vector4d& state() const { return state_; }
  const Eigen::Matrix4d& cov() const { return cov_; }

 private:
  bool initialized_ = false;
  Eigen::Vector4d state_ = Eigen::Vector4d::Zero();
  Eigen::Matrix4d cov_ = Eigen::Matrix4d::Identity();
};

struct StreamState {
  struct HistoryEntry {
    Position2 position;
    bool hallucinated = false;
  };
  struct Agent {
    std::vector<HistoryEntry> history;  // oldest first, length <= tau_h
    std::optional<MultiModalPrediction> last_raw;
    std::optional<MultiModalPrediction> last_refined;
    std::optional<MovementTrajectory> last_single;
    int occlusion_run = 0;  // consecutive occluded frames ending at the current frame
    CvKalman kalman;
  };

  FrameIndex current_frame = -1;  // last ingested frame, -1 before the first step
  std::map<std::string, Agent> agents;
};

/// Everything the streamer knows about one agent after one frame.
struct AgentFrameOutput {
  std::string agent_id;
  bool occluded = false;
  Position2 anchor;          // stored (possibly hallucinated) position at this frame
  Eigen::VectorXd feature;   // encoder output
  MultiModalPrediction raw;
  std::optional<MultiModalPrediction> refined;
  std::optional<MovementTrajectory> single;
};

/// Frame-by-frame inference driver. Feed observation sets in frame order;
/// every step fills occluded positions per the policy, re-encodes and
/// re-decodes every active agent, optionally refines, and rolls the
/// history buffers.
class Streamer {
 public:
  struct Options {
    OcclusionPolicy policy = OcclusionPolicy::kMultiModal;
    KalmanBaselineConfig kalman;
  };

  Streamer(const forecast::Forecaster* forecaster, const LaneMap* lane_map, df::Refiner* refiner);
  Streamer(const forecast::Forecaster* forecaster, const LaneMap* lane_map, df::Refiner* refiner,
           Options options);

  /// Processes one frame. Outputs are ordered by agent id. Throws on frame
  /// regression or gaps.
  std::vector<AgentFrameOutput> step(const ObservationSet& input);

  const StreamState& state() const { return state_; }
  const Streamer::Options& options() const { return options_; }
  df::Refiner* refiner() { return refiner_; }
  df::Refiner* single_refiner() { return single_refiner_ ? &*single_refiner_ : nullptr; }
  const df::RefineStats& refine_stats() const { return refine_stats_; }
  void reset();

  /// History padded backwards to tau_h by repeating the earliest entry.
  static std::vector<Position2> padded_history(const StreamState::Agent& agent, int tau_h);

 private:
  Position2 hallucinate(const std::string& agent_id, StreamState::Agent& agent);

  const forecast::Forecaster* forecaster_ = nullptr;
  const LaneMap* lane_map_ = nullptr;
  df::Refiner* refiner_ = nullptr;
  std::optional<df::Refiner> single_refiner_;  // separate banks for the single head
  Options options_;
  StreamState state_;
  df::RefineStats refine_stats_;
};

/// One logged query: the prediction emitted for a scheduled (frame, agent).
struct QueryRecord {
  FrameIndex frame = 0;
  std::string agent_id;
  Subset subset = Subset::kMovingVisible;
  Position2 anchor;
  MultiModalPrediction raw;
  std::optional<MultiModalPrediction> refined;
};

struct PredictionLog {
  int tau_f = 0;
  std::vector<QueryRecord> records;  // ordered by (frame, agent_id)
};

struct StreamResult {
  PredictionLog log;
  df::RefineStats refine_stats;
};

/// Replays the scenario through a fresh Streamer and logs the scheduled
/// queries. Deterministic given its inputs.
StreamResult run_stream(const scenario::Scenario& scenario, const scenario::QuerySchedule& schedule,
                        const forecast::Forecaster& forecaster, OcclusionPolicy policy,
                        df::Refiner* refiner, const KalmanBaselineConfig& kalman = {});

/// Text form: one line per mode per query,
///   frame,agent_id,subset,mode_index,confidence,dx0,dy0,...,raw|refined,anchor_x,anchor_y
/// preceded by a `#pred,tau_f=N` header. Doubles use %.17g so a
/// write/read/write cycle is byte-identical.
void write_prediction_log(std::ostream& out, const PredictionLog& log);
PredictionLog read_prediction_log(std::istream& in);
void write_prediction_log_file(const std::string& path, const PredictionLog& log);
PredictionLog read_prediction_log_file(const std::string& path);

}  // namespace flowcast::stream

#endif  // FLOWCAST_STREAMER_HPP
