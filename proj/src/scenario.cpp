#include "flowcast/scenario.hpp"

#include "flowcast/textio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

namespace flowcast::scenario {

AgentTrack::AgentTrack(std::string agent_id, FrameIndex first_frame, std::vector<TrackPoint> points)
    : agent_id_(std::move(agent_id)), first_frame_(first_frame), points_(std::move(points)) {
  if (agent_id_.empty()) throw std::invalid_argument("track: empty agent id");
  if (points_.empty()) throw std::invalid_argument("track: no points (agent " + agent_id_ + ")");
}

const TrackPoint& AgentTrack::at(FrameIndex t) const {
  if (!covers(t))
    throw std::out_of_range("track: frame " + std::to_string(t) + " outside agent " + agent_id_);
  return points_[static_cast<std::size_t>(t - first_frame_)];
}

double AgentTrack::total_travel() const {
  double d = 0.0;
  for (std::size_t i = 1; i < points_.size(); ++i)
    d += (points_[i].position.vec() - points_[i - 1].position.vec()).norm();
  return d;
}

void AgentTrack::validate(FrameIndex duration) const {
  if (first_frame_ < 0 || last_frame() >= duration)
    throw std::invalid_argument("track: frames outside [0, duration) for agent " + agent_id_);
  if (!points_.front().visible || !points_.back().visible)
    throw std::invalid_argument("track: first and last entries must be visible (agent " +
                                agent_id_ + ")");
  for (std::size_t i = 0; i < points_.size(); ++i) {
    if (!is_finite(points_[i].position))
      throw std::invalid_argument("track: non-finite position (agent " + agent_id_ + ")");
    if (i > 0) {
      const double step = (points_[i].position.vec() - points_[i - 1].position.vec()).norm();
      if (step >= 5.0)
        throw std::invalid_argument("track: per-frame displacement >= 5 m (agent " + agent_id_ +
                                    ")");
    }
  }
}

void Scenario::validate() const {
  if (duration < 1) throw std::invalid_argument("scenario: duration must be >= 1");
  if (!(perception_range > 0.0))
    throw std::invalid_argument("scenario: perception range must be > 0");
  ego.validate(duration);
  if (ego.first_frame() != 0 || ego.last_frame() != duration - 1)
    throw std::invalid_argument("scenario: ego must span the full duration");
  for (const auto& p : ego.points())
    if (!p.visible) throw std::invalid_argument("scenario: ego must be visible at all frames");
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    tracks[i].validate(duration);
    if (tracks[i].agent_id() == ego.agent_id())
      throw std::invalid_argument("scenario: track reuses the ego id");
    if (i > 0 && !(tracks[i - 1].agent_id() < tracks[i].agent_id()))
      throw std::invalid_argument("scenario: tracks must be sorted by agent id, unique");
  }
}

const AgentTrack* Scenario::find(const std::string& agent_id) const {
  auto it = std::lower_bound(tracks.begin(), tracks.end(), agent_id,
                             [](const AgentTrack& t, const std::string& id) {
                               return t.agent_id() < id;
                             });
  if (it == tracks.end() || it->agent_id() != agent_id) return nullptr;
  return &*it;
}

ObservationSet Scenario::observations_at(FrameIndex t) const {
  ObservationSet set(t);
  for (const auto& track : tracks) {
    if (!track.covers(t)) continue;
    const TrackPoint& p = track.at(t);
    set.insert(p.visible ? Observation::seen(track.agent_id(), p.position)
                         : Observation::hidden(track.agent_id()));
  }
  return set;
}

QuerySchedule build_schedule(const Scenario& scenario, const HorizonConfig& horizon) {
  horizon.validate();
  QuerySchedule schedule;
  for (FrameIndex t = horizon.tau_h; t < scenario.duration; ++t) {
    const Position2& ego_pos = scenario.ego.at(t).position;
    for (const auto& track : scenario.tracks) {
      if (!track.covers(t)) continue;
      const Position2& pos = track.at(t).position;
      if ((pos.vec() - ego_pos.vec()).norm() > scenario.perception_range) continue;
      if (!scenario.lane_map.in_roi(pos)) continue;
      schedule.queries.push_back(
          Query{t, track.agent_id(), make_subset(track.is_moving(), track.at(t).visible)});
    }
  }
  return schedule;
}

void GeneratorConfig::validate() const {
  if (agents_min < 5 || agents_max > 40 || agents_min > agents_max)
    throw std::invalid_argument("generator: agent count must lie in [5, 40]");
  if (duration_min < 150 || duration_max > 300 || duration_min > duration_max)
    throw std::invalid_argument("generator: duration must lie in [150, 300] frames");
  if (layout != "straight" && layout != "curve" && layout != "intersection" && layout != "mixed")
    throw std::invalid_argument("generator: unknown layout '" + layout + "'");
  if (static_fraction < 0.0 || static_fraction > 1.0)
    throw std::invalid_argument("generator: static fraction must lie in [0, 1]");
  if (!(speed_min > 0.0) || speed_max < speed_min)
    throw std::invalid_argument("generator: invalid speed range");
  if (occlusion_min < 1 || occlusion_max < occlusion_min)
    throw std::invalid_argument("generator: invalid occlusion window range");
  if (!(roi_halfwidth > 0.0) || !(perception_range > 0.0) || !(blocker_radius > 0.0))
    throw std::invalid_argument("generator: geometry parameters must be > 0");
  if (!(static_jitter >= 0.0) || static_jitter > 0.04)
    throw std::invalid_argument("generator: static jitter must lie in [0, 0.04] m");
}

namespace {

// Polyline with arc-length lookup; extrapolates along the end tangents.
struct Route {
  std::vector<Vec2> pts;
  std::vector<double> cum;

  explicit Route(std::vector<Vec2> p) : pts(std::move(p)) {
    cum.resize(pts.size(), 0.0);
    for (std::size_t i = 1; i < pts.size(); ++i)
      cum[i] = cum[i - 1] + (pts[i] - pts[i - 1]).norm();
  }

  double length() const { return cum.back(); }

  Vec2 tangent_at_segment(std::size_t i) const {
    return (pts[i + 1] - pts[i]).normalized();
  }

  Vec2 pos_at(double s) const {
    if (s <= 0.0) return pts.front() + s * tangent_at_segment(0);
    if (s >= length()) return pts.back() + (s - length()) * tangent_at_segment(pts.size() - 2);
    const auto it = std::upper_bound(cum.begin(), cum.end(), s);
    const std::size_t i = static_cast<std::size_t>(it - cum.begin()) - 1;
    const double local = s - cum[i];
    return pts[i] + local * tangent_at_segment(i);
  }

  Vec2 normal_at(double s) const {
    std::size_t i;
    if (s <= 0.0) {
      i = 0;
    } else if (s >= length()) {
      i = pts.size() - 2;
    } else {
      const auto it = std::upper_bound(cum.begin(), cum.end(), s);
      i = static_cast<std::size_t>(it - cum.begin()) - 1;
    }
    const Vec2 t = tangent_at_segment(i);
    return Vec2(-t.y(), t.x());
  }
};

std::vector<Position2> to_centerline(const Route& r) {
  std::vector<Position2> line;
  line.reserve(r.pts.size());
  for (const Vec2& p : r.pts) line.push_back(Position2::from(p));
  return line;
}

std::vector<Vec2> sample_line(const Vec2& a, const Vec2& b, double step) {
  std::vector<Vec2> pts;
  const double len = (b - a).norm();
  const int n = std::max(1, static_cast<int>(std::ceil(len / step)));
  for (int i = 0; i <= n; ++i) pts.push_back(a + (b - a) * (static_cast<double>(i) / n));
  return pts;
}

void append_arc(std::vector<Vec2>& pts, const Vec2& center, double radius, double a0, double a1,
                double step) {
  const double sweep = a1 - a0;
  const int n = std::max(2, static_cast<int>(std::ceil(std::abs(sweep) * radius / step)));
  for (int i = 1; i <= n; ++i) {
    const double a = a0 + sweep * (static_cast<double>(i) / n);
    pts.push_back(center + radius * Vec2(std::cos(a), std::sin(a)));
  }
}

struct Layout {
  std::vector<Route> routes;       // paths agents can follow
  std::vector<double> route_bias;  // sampling weight per route
};

Layout make_straight() {
  Layout l;
  for (double y : {0.0, 3.5, 7.0}) {
    l.routes.emplace_back(sample_line(Vec2(-120, y), Vec2(120, y), 3.0));
    l.route_bias.push_back(1.0);
  }
  return l;
}

Layout make_curve(double radius) {
  Layout l;
  for (double off : {0.0, 3.5}) {
    // Straight approach along +x, then a left arc, then a straight exit.
    const double r = radius - off;
    std::vector<Vec2> pts = sample_line(Vec2(-100, off), Vec2(-30, off), 3.0);
    const Vec2 center(-30, off + r);
    append_arc(pts, center, r, -M_PI / 2, 0.0, 3.0);
    const Vec2 end = center + r * Vec2(1, 0);
    std::vector<Vec2> exit = sample_line(end, end + Vec2(0, 60), 3.0);
    pts.insert(pts.end(), exit.begin() + 1, exit.end());
    l.routes.emplace_back(std::move(pts));
    l.route_bias.push_back(1.0);
  }
  return l;
}

Layout make_intersection() {
  Layout l;
  l.routes.emplace_back(sample_line(Vec2(-100, 0), Vec2(100, 0), 3.0));  // east-west through
  l.route_bias.push_back(1.0);
  l.routes.emplace_back(sample_line(Vec2(0, -100), Vec2(0, 100), 3.0));  // south-north through
  l.route_bias.push_back(1.0);
  {
    // Right turn: eastbound to southbound.
    std::vector<Vec2> pts = sample_line(Vec2(-100, 0), Vec2(-15, 0), 3.0);
    append_arc(pts, Vec2(-15, -15), 15.0, M_PI / 2, 0.0, 3.0);
    std::vector<Vec2> exit = sample_line(Vec2(0, -15), Vec2(0, -100), 3.0);
    pts.insert(pts.end(), exit.begin() + 1, exit.end());
    l.routes.emplace_back(std::move(pts));
    l.route_bias.push_back(2.0);
  }
  {
    // Left turn: eastbound to northbound.
    std::vector<Vec2> pts = sample_line(Vec2(-100, 0), Vec2(-20, 0), 3.0);
    append_arc(pts, Vec2(-20, 20), 20.0, -M_PI / 2, 0.0, 3.0);
    std::vector<Vec2> exit = sample_line(Vec2(0, 20), Vec2(0, 100), 3.0);
    pts.insert(pts.end(), exit.begin() + 1, exit.end());
    l.routes.emplace_back(std::move(pts));
    l.route_bias.push_back(2.0);
  }
  return l;
}

double wrap_angle(double a) {
  while (a > M_PI) a -= 2 * M_PI;
  while (a < -M_PI) a += 2 * M_PI;
  return a;
}

std::string agent_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "agent_%02d", i);
  return buf;
}

}  // namespace

Scenario generate_scenario(std::uint64_t seed, const GeneratorConfig& config) {
  config.validate();
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double a, double b) {
    return std::uniform_real_distribution<double>(a, b)(rng);
  };
  auto uniform_int = [&rng](long a, long b) {
    return std::uniform_int_distribution<long>(a, b)(rng);
  };

  const FrameIndex duration = uniform_int(config.duration_min, config.duration_max);

  std::string layout_name = config.layout;
  if (layout_name == "mixed") {
    const char* names[] = {"straight", "curve", "intersection"};
    layout_name = names[uniform_int(0, 2)];
  }
  Layout layout;
  if (layout_name == "straight") {
    layout = make_straight();
  } else if (layout_name == "curve") {
    layout = make_curve(uniform(28.0, 55.0));
  } else {
    layout = make_intersection();
  }

  std::vector<std::vector<Position2>> centerlines;
  for (const Route& r : layout.routes) centerlines.push_back(to_centerline(r));
  LaneMap lane_map(std::move(centerlines), config.roi_halfwidth);

  // Ego: constant speed along the first route, visible throughout.
  std::vector<TrackPoint> ego_points;
  {
    const Route& route = layout.routes.front();
    const double speed = uniform(0.7, 1.0);
    const double s0 = uniform(0.0, 20.0);
    for (FrameIndex t = 0; t < duration; ++t)
      ego_points.push_back(
          {Position2::from(route.pos_at(s0 + speed * static_cast<double>(t))), true});
  }
  AgentTrack ego("ego", 0, std::move(ego_points));

  const int num_agents = static_cast<int>(uniform_int(config.agents_min, config.agents_max));
  std::discrete_distribution<int> route_pick(layout.route_bias.begin(), layout.route_bias.end());

  struct Draft {
    std::string id;
    FrameIndex first = 0;
    std::vector<Position2> positions;
    std::vector<bool> visible;
    bool moving = true;
  };
  std::vector<Draft> drafts;

  for (int i = 0; i < num_agents; ++i) {
    Draft d;
    d.id = agent_name(i);
    d.moving = uniform(0.0, 1.0) >= config.static_fraction;
    d.first = 0;
    if (uniform(0.0, 1.0) < config.late_birth_fraction)
      d.first = uniform_int(1, std::max<long>(1, duration / 3));
    const FrameIndex frames = duration - d.first;

    if (d.moving) {
      const Route& route = layout.routes[static_cast<std::size_t>(route_pick(rng))];
      const double base = uniform(config.speed_min, config.speed_max);
      const double phase = uniform(0.0, 2 * M_PI);
      const double period = uniform(40.0, 80.0);
      const double lat = uniform(-1.0, 1.0);
      double s = uniform(0.0, std::max(1.0, route.length() - 60.0));
      std::normal_distribution<double> noise(0.0, config.speed_noise);
      for (FrameIndex t = 0; t < frames; ++t) {
        const double wave =
            1.0 + config.speed_wave_amp * std::sin(2 * M_PI * static_cast<double>(t) / period + phase);
        const double v = std::max(0.1, base * wave + noise(rng));
        if (t > 0) s += v;
        d.positions.push_back(Position2::from(route.pos_at(s) + lat * route.normal_at(s)));
        d.visible.push_back(true);
      }
    } else {
      const Route& route = layout.routes[static_cast<std::size_t>(route_pick(rng))];
      const double s = uniform(0.0, route.length());
      // Most static agents sit near a lane; a few far outside the ROI to
      // exercise schedule filtering.
      const double lat = uniform(0.0, 1.0) < 0.15 ? uniform(18.0, 25.0) : uniform(-6.0, 6.0);
      const Vec2 base = route.pos_at(s) + lat * route.normal_at(s);
      const double phase_x = uniform(0.0, 2 * M_PI);
      const double phase_y = uniform(0.0, 2 * M_PI);
      const double omega = uniform(0.15, 0.25);
      for (FrameIndex t = 0; t < frames; ++t) {
        const double ft = static_cast<double>(t);
        const Vec2 jitter(config.static_jitter * std::sin(omega * ft + phase_x),
                          config.static_jitter * std::sin(omega * ft + phase_y));
        d.positions.push_back(Position2::from(base + jitter));
        d.visible.push_back(true);
      }
    }
    drafts.push_back(std::move(d));
  }

  if (config.occlusion_enabled) {
    // Scripted occlusion windows, biased toward turning motion when enabled.
    for (Draft& d : drafts) {
      const long frames = static_cast<long>(d.positions.size());
      const long margin = 12;
      if (frames < 2 * margin + config.occlusion_max) continue;
      const double u = uniform(0.0, 1.0);
      int windows = 0;
      if (u < config.scripted_occlusions_per_agent * 0.6)
        windows = 1;
      else if (u < config.scripted_occlusions_per_agent)
        windows = 2;
      if (!d.moving && windows > 1) windows = 1;

      std::vector<double> turn(static_cast<std::size_t>(frames), 0.0);
      for (long t = 1; t + 1 < frames; ++t) {
        const Vec2 a = d.positions[static_cast<std::size_t>(t)].vec() -
                       d.positions[static_cast<std::size_t>(t - 1)].vec();
        const Vec2 b = d.positions[static_cast<std::size_t>(t + 1)].vec() -
                       d.positions[static_cast<std::size_t>(t)].vec();
        if (a.norm() > 1e-6 && b.norm() > 1e-6)
          turn[static_cast<std::size_t>(t)] =
              std::abs(wrap_angle(std::atan2(b.y(), b.x()) - std::atan2(a.y(), a.x())));
      }

      for (int w = 0; w < windows; ++w) {
        const long len = uniform_int(config.occlusion_min, config.occlusion_max);
        long best_start = -1;
        double best_score = -1.0;
        for (int c = 0; c < 12; ++c) {
          const long start = uniform_int(margin, frames - margin - len);
          double score = 0.0;
          if (config.occlude_turns && d.moving)
            for (long t = start; t < start + len; ++t) score += turn[static_cast<std::size_t>(t)];
          bool clash = false;
          for (long t = start; t < start + len; ++t)
            if (!d.visible[static_cast<std::size_t>(t)]) clash = true;
          if (!clash && score > best_score) {
            best_score = score;
            best_start = start;
          }
        }
        if (best_start < 0) continue;
        for (long t = best_start; t < best_start + len; ++t)
          d.visible[static_cast<std::size_t>(t)] = false;
      }
    }

    // Geometric shadowing: an agent is hidden while another agent's disk
    // blocks the ego-to-agent ray.
    for (std::size_t a = 0; a < drafts.size(); ++a) {
      for (FrameIndex t = drafts[a].first;
           t < drafts[a].first + static_cast<FrameIndex>(drafts[a].positions.size()); ++t) {
        const std::size_t ia = static_cast<std::size_t>(t - drafts[a].first);
        const Vec2 pa = drafts[a].positions[ia].vec();
        const Vec2 pe = ego.at(t).position.vec();
        const Vec2 d0 = pa - pe;
        const double len = d0.norm();
        if (len < 1e-9) continue;
        for (std::size_t b = 0; b < drafts.size(); ++b) {
          if (b == a) continue;
          const FrameIndex bf = drafts[b].first;
          if (t < bf || t >= bf + static_cast<FrameIndex>(drafts[b].positions.size())) continue;
          const Vec2 pb = drafts[b].positions[static_cast<std::size_t>(t - bf)].vec();
          const double u = (pb - pe).dot(d0) / (len * len);
          if (u <= 0.05 || u >= 0.95) continue;
          if ((pe + u * d0 - pb).norm() <= config.blocker_radius) {
            drafts[a].visible[ia] = false;
            break;
          }
        }
      }
    }
  }

  // Assemble tracks: trim to the visible life span, enforce the
  // moving/static travel contract.
  std::vector<AgentTrack> tracks;
  for (Draft& d : drafts) {
    long lo = 0, hi = static_cast<long>(d.visible.size()) - 1;
    while (lo <= hi && !d.visible[static_cast<std::size_t>(lo)]) ++lo;
    while (hi >= lo && !d.visible[static_cast<std::size_t>(hi)]) --hi;
    if (lo > hi || hi - lo < 20) continue;
    std::vector<TrackPoint> pts;
    for (long t = lo; t <= hi; ++t)
      pts.push_back({d.positions[static_cast<std::size_t>(t)],
                     d.visible[static_cast<std::size_t>(t)]});
    AgentTrack track(d.id, d.first + lo, std::move(pts));
    // Trimming can shorten a slow mover below the travel threshold; drop such
    // agents rather than emit one whose label contradicts its construction.
    if (track.is_moving() != d.moving) continue;
    tracks.push_back(std::move(track));
  }
  std::sort(tracks.begin(), tracks.end(),
            [](const AgentTrack& a, const AgentTrack& b) { return a.agent_id() < b.agent_id(); });

  Scenario scenario;
  scenario.duration = duration;
  scenario.lane_map = std::move(lane_map);
  scenario.ego = std::move(ego);
  scenario.tracks = std::move(tracks);
  scenario.perception_range = config.perception_range;
  scenario.validate();
  return scenario;
}

using textio::format_double;
using textio::parse_double;
using textio::parse_fail;
using textio::parse_long;
using textio::split_csv;

void write_log(const Scenario& scenario, std::ostream& out) {
  out << "#meta,duration=" << scenario.duration << ",ego=" << scenario.ego.agent_id()
      << ",roi=" << format_double(scenario.lane_map.roi_halfwidth())
      << ",range=" << format_double(scenario.perception_range) << "\n";
  const auto& lanes = scenario.lane_map.centerlines();
  for (std::size_t i = 0; i < lanes.size(); ++i) {
    out << "#lane," << i;
    for (const Position2& p : lanes[i])
      out << ',' << format_double(p.x) << ',' << format_double(p.y);
    out << "\n";
  }
  auto write_track = [&out](const AgentTrack& track, FrameIndex t) {
    const TrackPoint& p = track.at(t);
    out << t << ',' << track.agent_id() << ',' << (p.visible ? 1 : 0) << ',';
    if (p.visible) {
      out << format_double(p.position.x) << ',' << format_double(p.position.y);
    } else {
      out << ',';
    }
    out << "\n";
  };
  for (FrameIndex t = 0; t < scenario.duration; ++t) {
    if (scenario.ego.covers(t)) write_track(scenario.ego, t);
    for (const auto& track : scenario.tracks)
      if (track.covers(t)) write_track(track, t);
  }
}

void write_log_file(const Scenario& scenario, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  write_log(scenario, out);
  if (!out) throw std::runtime_error("write failed: " + path);
}

Scenario read_log(std::istream& in) {
  FrameIndex duration = -1;
  std::string ego_id;
  double roi = 15.0, range = 100.0;
  std::vector<std::vector<Position2>> lanes;
  struct Rec {
    bool visible;
    Position2 pos;
  };
  std::map<std::string, std::map<FrameIndex, Rec>> recs;

  std::string line;
  long line_no = 0;
  bool saw_meta = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv(line);
    if (f[0] == "#meta") {
      saw_meta = true;
      for (std::size_t i = 1; i < f.size(); ++i) {
        const std::size_t eq = f[i].find('=');
        if (eq == std::string::npos) parse_fail(line_no, "meta field without '='");
        const std::string key = f[i].substr(0, eq), val = f[i].substr(eq + 1);
        if (key == "duration")
          duration = parse_long(val, line_no, "duration");
        else if (key == "ego")
          ego_id = val;
        else if (key == "roi")
          roi = parse_double(val, line_no, "roi");
        else if (key == "range")
          range = parse_double(val, line_no, "range");
        else
          parse_fail(line_no, "unknown meta key '" + key + "'");
      }
      if (duration < 1) parse_fail(line_no, "meta missing a positive duration");
      if (ego_id.empty()) parse_fail(line_no, "meta missing the ego id");
    } else if (f[0] == "#lane") {
      if (f.size() < 6 || f.size() % 2 != 0)
        parse_fail(line_no, "lane needs an id and >= 2 coordinate pairs");
      std::vector<Position2> pts;
      for (std::size_t i = 2; i < f.size(); i += 2)
        pts.push_back(Position2{parse_double(f[i], line_no, "lane x"),
                                parse_double(f[i + 1], line_no, "lane y"), std::nullopt});
      lanes.push_back(std::move(pts));
    } else if (f[0].size() > 0 && f[0][0] == '#') {
      parse_fail(line_no, "unknown header '" + f[0] + "'");
    } else {
      if (f.size() != 5) parse_fail(line_no, "record needs frame,agent_id,visible,x,y");
      const FrameIndex frame = parse_long(f[0], line_no, "frame");
      const std::string& id = f[1];
      if (id.empty()) parse_fail(line_no, "empty agent id");
      const long vis = parse_long(f[2], line_no, "visible flag");
      if (vis != 0 && vis != 1) parse_fail(line_no, "visible flag must be 0 or 1");
      Rec r;
      r.visible = vis == 1;
      if (r.visible) {
        if (f[3].empty() || f[4].empty())
          parse_fail(line_no, "visible record missing x or y");
        r.pos = Position2{parse_double(f[3], line_no, "x"), parse_double(f[4], line_no, "y"),
                          std::nullopt};
      } else {
        if (!f[3].empty() || !f[4].empty())
          parse_fail(line_no, "occluded record must leave x and y empty");
      }
      if (!recs[id].emplace(frame, r).second)
        parse_fail(line_no, "duplicate record for agent '" + id + "'");
    }
  }
  if (!saw_meta) throw std::runtime_error("log parse error: missing #meta header");

  auto build_track = [](const std::string& id, const std::map<FrameIndex, Rec>& m) {
    const FrameIndex first = m.begin()->first;
    FrameIndex expected = first;
    std::vector<TrackPoint> pts;
    for (const auto& [frame, rec] : m) {
      if (frame != expected)
        throw std::runtime_error("log parse error: track for agent '" + id +
                                 "' is not contiguous at frame " + std::to_string(frame));
      pts.push_back({rec.pos, rec.visible});
      ++expected;
    }
    // The format leaves x,y empty on occluded rows, but the in-memory track
    // carries a position everywhere; rebuild interior gaps by linear
    // interpolation between the bracketing visible points. Gaps touching an
    // end are left for validate() to reject (first/last must be visible).
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (pts[i].visible) continue;
      std::size_t j = i;
      while (j < pts.size() && !pts[j].visible) ++j;
      if (i > 0 && j < pts.size()) {
        const Vec2 a = pts[i - 1].position.vec();
        const Vec2 b = pts[j].position.vec();
        const double n = static_cast<double>(j - (i - 1));
        for (std::size_t k = i; k < j; ++k) {
          const double s = static_cast<double>(k - (i - 1)) / n;
          pts[k].position = Position2::from(a + s * (b - a));
        }
      }
      i = j;
    }
    return AgentTrack(id, first, std::move(pts));
  };

  Scenario scenario;
  scenario.duration = duration;
  scenario.lane_map = LaneMap(std::move(lanes), roi);
  scenario.perception_range = range;
  const auto ego_it = recs.find(ego_id);
  if (ego_it == recs.end()) throw std::runtime_error("log parse error: no records for the ego");
  scenario.ego = build_track(ego_id, ego_it->second);
  recs.erase(ego_it);
  for (const auto& [id, m] : recs) scenario.tracks.push_back(build_track(id, m));
  scenario.validate();
  return scenario;
}

Scenario read_log_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  return read_log(in);
}

}  // namespace flowcast::scenario
