#include "flowcast/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace flowcast {

bool is_finite(const Position2& p) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y)) return false;
  return !p.z || std::isfinite(*p.z);
}

Observation::Observation(std::string agent_id, std::optional<Position2> position, bool visible)
    : agent_id_(std::move(agent_id)), position_(std::move(position)), visible_(visible) {
  if (agent_id_.empty()) throw std::invalid_argument("observation: empty agent id");
  if (visible_ != position_.has_value())
    throw std::invalid_argument("observation: position must be present iff visible (agent " +
                                agent_id_ + ")");
  if (position_ && !is_finite(*position_))
    throw std::invalid_argument("observation: non-finite position (agent " + agent_id_ + ")");
}

Observation Observation::seen(std::string agent_id, Position2 position) {
  return Observation(std::move(agent_id), position, true);
}

Observation Observation::hidden(std::string agent_id) {
  return Observation(std::move(agent_id), std::nullopt, false);
}

const Position2& Observation::position() const {
  if (!position_) throw std::logic_error("observation: position read on occluded agent " + agent_id_);
  return *position_;
}

void ObservationSet::insert(Observation obs) {
  auto id = obs.agent_id();
  if (!agents_.emplace(std::move(id), std::move(obs)).second)
    throw std::invalid_argument("observation set: duplicate agent id at frame " +
                                std::to_string(frame_));
}

const Observation* ObservationSet::find(const std::string& agent_id) const {
  auto it = agents_.find(agent_id);
  return it == agents_.end() ? nullptr : &it->second;
}

MovementTrajectory::MovementTrajectory(std::vector<Vec2> steps) : steps_(std::move(steps)) {
  for (const auto& s : steps_)
    if (!s.allFinite()) throw std::invalid_argument("movement trajectory: non-finite step");
}

Eigen::VectorXd MovementTrajectory::flat() const {
  Eigen::VectorXd v(2 * steps_.size());
  for (std::size_t j = 0; j < steps_.size(); ++j) {
    v[2 * j] = steps_[j].x();
    v[2 * j + 1] = steps_[j].y();
  }
  return v;
}

MovementTrajectory MovementTrajectory::from_flat(const Eigen::VectorXd& v) {
  if (v.size() % 2 != 0)
    throw std::invalid_argument("movement trajectory: flat vector length must be even");
  std::vector<Vec2> steps(static_cast<std::size_t>(v.size() / 2));
  for (std::size_t j = 0; j < steps.size(); ++j) steps[j] = Vec2(v[2 * j], v[2 * j + 1]);
  return MovementTrajectory(std::move(steps));
}

Eigen::VectorXd MovementTrajectory::axis(int axis) const {
  if (axis != 0 && axis != 1) throw std::invalid_argument("movement trajectory: axis must be 0 or 1");
  Eigen::VectorXd v(steps_.size());
  for (std::size_t j = 0; j < steps_.size(); ++j) v[j] = steps_[j][axis];
  return v;
}

MovementTrajectory MovementTrajectory::from_axes(const Eigen::VectorXd& x,
                                                 const Eigen::VectorXd& y) {
  if (x.size() != y.size())
    throw std::invalid_argument("movement trajectory: axis lengths differ");
  std::vector<Vec2> steps(static_cast<std::size_t>(x.size()));
  for (std::size_t j = 0; j < steps.size(); ++j) steps[j] = Vec2(x[j], y[j]);
  return MovementTrajectory(std::move(steps));
}

std::vector<Position2> to_absolute(const Position2& query, const MovementTrajectory& traj) {
  if (!is_finite(query)) throw std::invalid_argument("to_absolute: non-finite query position");
  std::vector<Position2> out;
  out.reserve(traj.steps().size());
  double x = query.x;
  double y = query.y;
  for (const auto& s : traj.steps()) {
    x += s.x();
    y += s.y();
    out.push_back(Position2{x, y, std::nullopt});
  }
  return out;
}

MultiModalPrediction::MultiModalPrediction(std::string agent_id, FrameIndex query_frame,
                                           std::vector<MovementTrajectory> modes,
                                           std::vector<double> confidences)
    : agent_id_(std::move(agent_id)),
      query_frame_(query_frame),
      modes_(std::move(modes)),
      confidences_(std::move(confidences)) {
  if (modes_.empty()) throw std::invalid_argument("prediction: no modes");
  if (confidences_.size() != modes_.size())
    throw std::invalid_argument("prediction: mode/confidence count mismatch");
  const int h = modes_.front().horizon();
  for (const auto& m : modes_)
    if (m.horizon() != h) throw std::invalid_argument("prediction: modes differ in horizon");
  double sum = 0.0;
  for (double c : confidences_) {
    if (!std::isfinite(c) || c < 0.0)
      throw std::invalid_argument("prediction: confidences must be finite and non-negative");
    sum += c;
  }
  if (sum <= 0.0) throw std::invalid_argument("prediction: confidence sum must be positive");
  // Already-normalized inputs pass through untouched so that serialized
  // confidences survive a read/write cycle bit for bit.
  if (std::abs(sum - 1.0) > 1e-12)
    for (double& c : confidences_) c /= sum;
}

int MultiModalPrediction::most_confident_mode() const {
  int best = 0;
  for (int k = 1; k < num_modes(); ++k)
    if (confidences_[k] > confidences_[best]) best = k;
  return best;
}

LaneMap::LaneMap(std::vector<std::vector<Position2>> centerlines, double roi_halfwidth)
    : centerlines_(std::move(centerlines)), roi_halfwidth_(roi_halfwidth) {
  if (!(roi_halfwidth_ > 0.0)) throw std::invalid_argument("lane map: roi halfwidth must be > 0");
  for (const auto& line : centerlines_) {
    if (line.size() < 2) throw std::invalid_argument("lane map: centerline needs >= 2 points");
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (!is_finite(line[i])) throw std::invalid_argument("lane map: non-finite centerline point");
      if (i > 0 && (line[i].vec() - line[i - 1].vec()).norm() <= 0.0)
        throw std::invalid_argument("lane map: consecutive centerline points must be distinct");
    }
  }
}

namespace {

// Closest point to p on segment [a, b].
Vec2 closest_on_segment(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return a + t * ab;
}

}  // namespace

std::optional<LaneMap::LaneQuery> LaneMap::nearest(const Position2& p) const {
  if (centerlines_.empty()) return std::nullopt;
  const Vec2 q = p.vec();
  LaneQuery best;
  best.distance = std::numeric_limits<double>::infinity();
  for (const auto& line : centerlines_) {
    for (std::size_t i = 0; i + 1 < line.size(); ++i) {
      const Vec2 a = line[i].vec();
      const Vec2 b = line[i + 1].vec();
      const Vec2 c = closest_on_segment(q, a, b);
      const double d = (q - c).norm();
      if (d < best.distance) {
        best.distance = d;
        best.closest = Position2::from(c);
        best.tangent = (b - a).normalized();
      }
    }
  }
  return best;
}

double LaneMap::distance_to_lanes(const Position2& p) const {
  auto q = nearest(p);
  return q ? q->distance : std::numeric_limits<double>::infinity();
}

bool LaneMap::in_roi(const Position2& p) const { return distance_to_lanes(p) <= roi_halfwidth_; }

void HorizonConfig::validate() const {
  if (tau_h < 1) throw std::invalid_argument("horizon: tau_h must be >= 1");
  if (tau_f < 1) throw std::invalid_argument("horizon: tau_f must be >= 1");
  if (num_modes < 1) throw std::invalid_argument("horizon: mode count must be >= 1");
}

std::string to_string(Subset s) {
  switch (s) {
    case Subset::kMovingVisible: return "moving_visible";
    case Subset::kMovingOccluded: return "moving_occluded";
    case Subset::kStaticVisible: return "static_visible";
    case Subset::kStaticOccluded: return "static_occluded";
  }
  throw std::logic_error("subset: invalid enum value");
}

std::optional<Subset> subset_from_string(const std::string& s) {
  for (Subset v : kAllSubsets)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

Subset make_subset(bool moving, bool visible) {
  if (moving) return visible ? Subset::kMovingVisible : Subset::kMovingOccluded;
  return visible ? Subset::kStaticVisible : Subset::kStaticOccluded;
}

bool subset_is_visible(Subset s) {
  return s == Subset::kMovingVisible || s == Subset::kStaticVisible;
}

bool subset_is_moving(Subset s) {
  return s == Subset::kMovingVisible || s == Subset::kMovingOccluded;
}

}  // namespace flowcast
