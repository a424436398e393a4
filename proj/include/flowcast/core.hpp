#ifndef FLOWCAST_CORE_HPP
#define FLOWCAST_CORE_HPP

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace flowcast {

/// Frame counter of a 10 Hz stream; frame i is at time i * 0.1 s.
using FrameIndex = std::int64_t;

constexpr double kFrameHz = 10.0;
constexpr double kFrameDt = 1.0 / kFrameHz;

using Vec2 = Eigen::Vector2d;

/// Planar position in meters. The optional z is carried as metadata for
/// round-tripping external data; no computation ever reads it.
struct Position2 {
  double x = 0.0;
  double y = 0.0;
  std::optional<double> z{};

  Vec2 vec() const { return Vec2(x, y); }
  static Position2 from(const Vec2& v) { return Position2{v.x(), v.y(), std::nullopt}; }
};

bool is_finite(const Position2& p);

/// One agent at one frame. Invariant: position is present iff visible.
class Observation {
 public:
  Observation(std::string agent_id, std::optional<Position2> position, bool visible);

  static Observation seen(std::string agent_id, Position2 position);
  static Observation hidden(std::string agent_id);

  const std::string& agent_id() const { return agent_id_; }
  bool visible() const { return visible_; }
  /// Defined only when visible().
  const Position2& position() const;

 private:
  std::string agent_id_;
  std::optional<Position2> position_;
  bool visible_ = false;
};

/// All observations delivered for one frame, keyed by agent id.
/// Ordered map: every per-agent iteration in the engine is id-sorted,
/// which keeps outputs independent of insertion order.
class ObservationSet {
 public:
  explicit ObservationSet(FrameIndex frame) : frame_(frame) {}

  FrameIndex frame() const { return frame_; }
  void insert(Observation obs);
  const std::map<std::string, Observation>& agents() const { return agents_; }
  const Observation* find(const std::string& agent_id) const;
  std::size_t size() const { return agents_.size(); }

 private:
  FrameIndex frame_;
  std::map<std::string, Observation> agents_;
};

/// Per-frame displacements (meters per frame) covering the prediction
/// horizon. steps()[j] moves from frame t+j to frame t+j+1 when the
/// trajectory was queried at frame t.
class MovementTrajectory {
 public:
  MovementTrajectory() = default;
  explicit MovementTrajectory(std::vector<Vec2> steps);

  const std::vector<Vec2>& steps() const { return steps_; }
  int horizon() const { return static_cast<int>(steps_.size()); }

  /// Steps flattened as [dx0, dy0, dx1, dy1, ...].
  Eigen::VectorXd flat() const;
  static MovementTrajectory from_flat(const Eigen::VectorXd& v);

  /// One axis as a vector: axis 0 = x, 1 = y.
  Eigen::VectorXd axis(int axis) const;
  static MovementTrajectory from_axes(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

 private:
  std::vector<Vec2> steps_;
};

/// Cumulative integration of movements from a query position. Output has
/// one position per step, at frames t+1 .. t+horizon; z is not propagated.
std::vector<Position2> to_absolute(const Position2& query, const MovementTrajectory& traj);

/// K movement trajectories with a confidence distribution. Confidences are
/// normalized at construction; inputs must be non-negative with positive sum.
class MultiModalPrediction {
 public:
  MultiModalPrediction() = default;
  MultiModalPrediction(std::string agent_id, FrameIndex query_frame,
                       std::vector<MovementTrajectory> modes, std::vector<double> confidences);

  const std::string& agent_id() const { return agent_id_; }
  FrameIndex query_frame() const { return query_frame_; }
  const std::vector<MovementTrajectory>& modes() const { return modes_; }
  const std::vector<double>& confidences() const { return confidences_; }
  int num_modes() const { return static_cast<int>(modes_.size()); }
  int horizon() const { return modes_.empty() ? 0 : modes_.front().horizon(); }

  /// Index of the highest-confidence mode; ties resolve to the lowest index.
  int most_confident_mode() const;

 private:
  std::string agent_id_;
  FrameIndex query_frame_ = 0;
  std::vector<MovementTrajectory> modes_;
  std::vector<double> confidences_;
};

/// Polyline centerlines plus the region-of-interest half width used to decide
/// which agents an evaluation covers.
class LaneMap {
 public:
  LaneMap() = default;
  LaneMap(std::vector<std::vector<Position2>> centerlines, double roi_halfwidth);

  const std::vector<std::vector<Position2>>& centerlines() const { return centerlines_; }
  double roi_halfwidth() const { return roi_halfwidth_; }

  /// Smallest distance from p to any centerline segment; +inf for an empty map.
  double distance_to_lanes(const Position2& p) const;
  bool in_roi(const Position2& p) const;

  /// Closest point over all centerline segments with the segment's unit
  /// tangent; nullopt for an empty map.
  struct LaneQuery {
    Position2 closest;
    Vec2 tangent;
    double distance = 0.0;
  };
  std::optional<LaneQuery> nearest(const Position2& p) const;

 private:
  std::vector<std::vector<Position2>> centerlines_;
  double roi_halfwidth_ = 15.0;
};

/// History length, prediction horizon, and mode count shared by every
/// component of a pipeline.
struct HorizonConfig {
  int tau_h = 20;
  int tau_f = 30;
  int num_modes = 6;

  void validate() const;
  bool operator==(const HorizonConfig&) const = default;
};

/// Evaluation cell: motion class x visibility at query time.
enum class Subset { kMovingVisible, kMovingOccluded, kStaticVisible, kStaticOccluded };

constexpr std::array<Subset, 4> kAllSubsets = {Subset::kMovingVisible, Subset::kMovingOccluded,
                                               Subset::kStaticVisible, Subset::kStaticOccluded};

std::string to_string(Subset s);
std::optional<Subset> subset_from_string(const std::string& s);
Subset make_subset(bool moving, bool visible);
bool subset_is_visible(Subset s);
bool subset_is_moving(Subset s);

}  // namespace flowcast

#endif  // FLOWCAST_CORE_HPP
