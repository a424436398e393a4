#ifndef FLOWCAST_SCENARIO_HPP
#define FLOWCAST_SCENARIO_HPP

#include "flowcast/core.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace flowcast::scenario {

struct TrackPoint {
  Position2 position;
  bool visible = true;
};

/// Ground-truth trajectory of one agent over a contiguous frame range.
/// Positions exist on occluded frames too (visibility is a separate flag);
/// only the ground-truth side of the benchmark ever reads them there.
class AgentTrack {
 public:
  AgentTrack() = default;
  AgentTrack(std::string agent_id, FrameIndex first_frame, std::vector<TrackPoint> points);

  const std::string& agent_id() const { return agent_id_; }
  const std::string& agent_class() const { return agent_class_; }
  FrameIndex first_frame() const { return first_frame_; }
  FrameIndex last_frame() const { return first_frame_ + static_cast<FrameIndex>(points_.size()) - 1; }
  const std::vector<TrackPoint>& points() const { return points_; }

  bool covers(FrameIndex t) const { return t >= first_frame() && t <= last_frame(); }
  const TrackPoint& at(FrameIndex t) const;
  bool visible_at(FrameIndex t) const { return covers(t) && at(t).visible; }

  /// Ground-truth path length over consecutive entries (meters).
  double total_travel() const;
  bool is_moving(double travel_threshold = 3.0) const {
    return total_travel() >= travel_threshold;
  }

  /// Contiguity, continuity (< 5 m per-frame displacement), and visible
  /// first/last entries; frame range must fit in [0, duration).
  void validate(FrameIndex duration) const;

 private:
  std::string agent_id_;
  std::string agent_class_ = "automobile";
  FrameIndex first_frame_ = 0;
  std::vector<TrackPoint> points_;
};

struct Scenario {
  FrameIndex duration = 0;
  LaneMap lane_map;
  AgentTrack ego;
  std::vector<AgentTrack> tracks;  // sorted by agent_id, ego excluded
  double perception_range = 100.0;

  void validate() const;
  const AgentTrack* find(const std::string& agent_id) const;

  /// Sensor view of frame t: every active non-ego agent, visible ones with
  /// positions, occluded ones without. The ego never appears.
  ObservationSet observations_at(FrameIndex t) const;
};

struct Query {
  FrameIndex frame = 0;
  std::string agent_id;
  Subset subset = Subset::kMovingVisible;
};

struct QuerySchedule {
  std::vector<Query> queries;  // sorted by (frame, agent_id)
};

/// One query per (frame >= tau_h, active agent within perception range and
/// ROI), occluded agents included. Subset labels: moving by the >= 3.0 m
/// total-travel rule, occluded by visibility at the query frame.
QuerySchedule build_schedule(const Scenario& scenario, const HorizonConfig& horizon);

struct GeneratorConfig {
  int agents_min = 8;
  int agents_max = 12;
  FrameIndex duration_min = 150;
  FrameIndex duration_max = 180;
  /// straight | curve | intersection | mixed
  std::string layout = "mixed";
  double static_fraction = 0.25;
  double late_birth_fraction = 0.2;
  double speed_min = 0.5;   // m/frame
  double speed_max = 1.2;   // m/frame
  double speed_noise = 0.12;
  double speed_wave_amp = 0.10;
  bool occlusion_enabled = true;
  double scripted_occlusions_per_agent = 0.8;
  int occlusion_min = 3;
  int occlusion_max = 10;
  /// Bias scripted windows toward frames where the agent is turning.
  bool occlude_turns = true;
  double blocker_radius = 1.5;
  double roi_halfwidth = 15.0;
  double perception_range = 100.0;
  double static_jitter = 0.02;  // amplitude, m

  void validate() const;
};

Scenario generate_scenario(std::uint64_t seed, const GeneratorConfig& config);

/// Text log round-trip. Format: `#meta,duration=<n>,ego=<id>,roi=<w>,range=<r>`,
/// one `#lane,<id>,x0,y0,x1,y1,...` per centerline, then one record per
/// agent-frame: `frame,agent_id,visible,x,y` (x and y empty when visible=0).
void write_log(const Scenario& scenario, std::ostream& out);
void write_log_file(const Scenario& scenario, const std::string& path);
Scenario read_log(std::istream& in);
Scenario read_log_file(const std::string& path);

}  // namespace flowcast::scenario

#endif  // FLOWCAST_SCENARIO_HPP
