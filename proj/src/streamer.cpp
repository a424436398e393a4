#include "flowcast/streamer.hpp"

#include "flowcast/textio.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace flowcast::stream {

using textio::format_double;
using textio::parse_double;
using textio::parse_fail;
using textio::parse_long;
using textio::split_csv;

std::string to_string(OcclusionPolicy policy) {
  switch (policy) {
    case OcclusionPolicy::kMultiModal: return "multi";
    case OcclusionPolicy::kSingleModal: return "single";
    case OcclusionPolicy::kKalmanBaseline: return "kf";
  }
  throw std::logic_error("unreachable policy");
}

OcclusionPolicy policy_from_string(const std::string& name) {
  if (name == "multi") return OcclusionPolicy::kMultiModal;
  if (name == "single") return OcclusionPolicy::kSingleModal;
  if (name == "kf") return OcclusionPolicy::kKalmanBaseline;
  throw std::invalid_argument("unknown occlusion policy '" + name + "'");
}

void KalmanBaselineConfig::validate() const {
  if (!(process_noise > 0.0) || !(observation_noise > 0.0) || !(initial_position_std > 0.0) ||
      !(initial_velocity_std > 0.0))
    throw std::invalid_argument("kalman baseline: noise parameters must be positive");
}

void CvKalman::init(const Vec2& position, const KalmanBaselineConfig& config) {
  state_ << position.x(), position.y(), 0.0, 0.0;
  cov_.setZero();
  cov_(0, 0) = cov_(1, 1) = config.initial_position_std * config.initial_position_std;
  cov_(2, 2) = cov_(3, 3) = config.initial_velocity_std * config.initial_velocity_std;
  initialized_ = true;
}

namespace {

Eigen::Matrix4d cv_transition() {
  Eigen::Matrix4d f = Eigen::Matrix4d::Identity();
  f(0, 2) = 1.0;  // one frame per step
  f(1, 3) = 1.0;
  return f;
}

}  // namespace

void CvKalman::predict(const KalmanBaselineConfig& config) {
  if (!initialized_) throw std::logic_error("kalman baseline: predict before init");
  const Eigen::Matrix4d f = cv_transition();
  state_ = f * state_;
  cov_ = f * cov_ * f.transpose() +
         config.process_noise * config.process_noise * Eigen::Matrix4d::Identity();
}

void CvKalman::update(const Vec2& position, const KalmanBaselineConfig& config) {
  if (!initialized_) throw std::logic_error("kalman baseline: update before init");
  Eigen::Matrix<double, 2, 4> h = Eigen::Matrix<double, 2, 4>::Zero();
  h(0, 0) = h(1, 1) = 1.0;
  const double r = config.observation_noise * config.observation_noise;
  const Eigen::Matrix2d s = h * cov_ * h.transpose() + r * Eigen::Matrix2d::Identity();
  const Eigen::Matrix<double, 4, 2> k = cov_ * h.transpose() * s.inverse();
  state_ += k * (position - h * state_);
  const Eigen::Matrix4d ik = Eigen::Matrix4d::Identity() - k * h;
  cov_ = ik * cov_ * ik.transpose() + r * k * k.transpose();
}

Streamer::Streamer(const forecast::Forecaster* forecaster, const LaneMap* lane_map,
                   df::Refiner* refiner)
    : Streamer(forecaster, lane_map, refiner, Options{}) {}

Streamer::Streamer(const forecast::Forecaster* forecaster, const LaneMap* lane_map,
                   df::Refiner* refiner, Options options)
    : forecaster_(forecaster), lane_map_(lane_map), refiner_(refiner), options_(options) {
  if (!forecaster_) throw std::invalid_argument("streamer: forecaster required");
  options_.kalman.validate();
  if (refiner_ && options_.policy == OcclusionPolicy::kSingleModal)
    single_refiner_.emplace(refiner_->config(), refiner_->net());
}

void Streamer::reset() {
  state_ = StreamState{};
  refine_stats_ = df::RefineStats{};
  if (refiner_) refiner_->reset();
  if (single_refiner_) single_refiner_->reset();
}

std::vector<Position2> Streamer::padded_history(const StreamState::Agent& agent, int tau_h) {
  if (agent.history.empty()) throw std::logic_error("streamer: empty history buffer");
  std::vector<Position2> out;
  out.reserve(static_cast<std::size_t>(tau_h));
  const int missing = tau_h - static_cast<int>(agent.history.size());
  for (int i = 0; i < missing; ++i) out.push_back(agent.history.front().position);
  for (const auto& e : agent.history) out.push_back(e.position);
  if (static_cast<int>(out.size()) > tau_h)
    out.erase(out.begin(), out.begin() + (static_cast<int>(out.size()) - tau_h));
  return out;
}

Position2 Streamer::hallucinate(const std::string& agent_id, StreamState::Agent& agent) {
  const Vec2 previous = agent.history.back().position.vec();
  switch (options_.policy) {
    case OcclusionPolicy::kMultiModal: {
      const std::optional<MultiModalPrediction>& source =
          refiner_ ? agent.last_refined : agent.last_raw;
      if (!source)
        throw std::logic_error("streamer: occluded agent '" + agent_id +
                               "' has no previous prediction");
      const MovementTrajectory& mode =
          source->modes()[static_cast<std::size_t>(source->most_confident_mode())];
      return Position2::from(previous + mode.steps().front());
    }
    case OcclusionPolicy::kSingleModal: {
      if (!agent.last_single)
        throw std::logic_error("streamer: occluded agent '" + agent_id +
                               "' has no previous single-mode trajectory");
      return Position2::from(previous + agent.last_single->steps().front());
    }
    case OcclusionPolicy::kKalmanBaseline: {
      agent.kalman.predict(options_.kalman);
      return Position2::from(agent.kalman.position());
    }
  }
  throw std::logic_error("unreachable policy");
}

std::vector<AgentFrameOutput> Streamer::step(const ObservationSet& input) {
  const FrameIndex t = input.frame();
  if (state_.current_frame >= 0 && t != state_.current_frame + 1)
    throw std::invalid_argument("streamer: frames must arrive in order without gaps (got " +
                                std::to_string(t) + " after " +
                                std::to_string(state_.current_frame) + ")");
  const int tau_h = forecaster_->horizon().tau_h;

  // Agents that stopped arriving have left the scene for good.
  for (auto it = state_.agents.begin(); it != state_.agents.end();) {
    if (input.find(it->first) == nullptr) {
      if (refiner_) refiner_->drop_agent(it->first);
      if (single_refiner_) single_refiner_->drop_agent(it->first);
      it = state_.agents.erase(it);
    } else {
      ++it;
    }
  }

  for (const auto& [id, obs] : input.agents()) {
    auto found = state_.agents.find(id);
    if (found == state_.agents.end()) {
      // An agent nobody has ever seen cannot be tracked; its birth waits
      // for the first visible observation.
      if (!obs.visible()) continue;
      StreamState::Agent agent;
      agent.history.push_back({obs.position(), false});
      if (options_.policy == OcclusionPolicy::kKalmanBaseline)
        agent.kalman.init(obs.position().vec(), options_.kalman);
      state_.agents.emplace(id, std::move(agent));
      continue;
    }
    StreamState::Agent& agent = found->second;
    if (obs.visible()) {
      // Visible observations are stored verbatim; hallucination never
      // overrides a measurement.
      agent.history.push_back({obs.position(), false});
      agent.occlusion_run = 0;
      if (options_.policy == OcclusionPolicy::kKalmanBaseline) {
        agent.kalman.predict(options_.kalman);
        agent.kalman.update(obs.position().vec(), options_.kalman);
      }
    } else {
      agent.occlusion_run += 1;
      const Position2 filled = hallucinate(id, agent);
      agent.history.push_back({filled, true});
    }
    if (static_cast<int>(agent.history.size()) > tau_h)
      agent.history.erase(agent.history.begin());
  }

  state_.current_frame = t;

  std::vector<AgentFrameOutput> outputs;
  outputs.reserve(state_.agents.size());
  for (auto& [id, agent] : state_.agents) {
    forecast::HistoryWindow window;
    window.target_id = id;
    window.frame = t;
    window.target = padded_history(agent, tau_h);
    window.lane_map = lane_map_;
    for (const auto& [other_id, other] : state_.agents) {
      if (other_id == id) continue;
      window.neighbors.push_back(padded_history(other, tau_h));
    }

    Eigen::VectorXd feature = forecaster_->encode(window);
    MultiModalPrediction raw = forecaster_->decode(feature, id, t);
    const bool occluded = agent.history.back().hallucinated;

    std::optional<MultiModalPrediction> refined;
    if (refiner_) refined = refiner_->refine(raw, feature, occluded, &refine_stats_);

    std::optional<MovementTrajectory> single;
    if (options_.policy == OcclusionPolicy::kSingleModal) {
      MovementTrajectory s = forecaster_->decode_single(feature);
      if (single_refiner_) {
        const MultiModalPrediction wrapped(id, t, {s}, {1.0});
        s = single_refiner_->refine(wrapped, feature, occluded, &refine_stats_).modes().front();
      }
      single = std::move(s);
    }

    agent.last_raw = raw;
    agent.last_refined = refined;
    agent.last_single = single;

    outputs.push_back(AgentFrameOutput{id, occluded, window.target.back(), std::move(feature),
                                       std::move(raw), std::move(refined), std::move(single)});
  }
  return outputs;
}

StreamResult run_stream(const scenario::Scenario& scenario, const scenario::QuerySchedule& schedule,
                        const forecast::Forecaster& forecaster, OcclusionPolicy policy,
                        df::Refiner* refiner, const KalmanBaselineConfig& kalman) {
  // A fresh stream implies fresh filter banks; agent ids repeat across
  // scenarios, so stale states would otherwise leak between runs.
  if (refiner) refiner->reset();
  Streamer streamer(&forecaster, &scenario.lane_map, refiner, Streamer::Options{policy, kalman});

  std::map<std::pair<FrameIndex, std::string>, Subset> wanted;
  for (const auto& q : schedule.queries) {
    if (!wanted.emplace(std::make_pair(q.frame, q.agent_id), q.subset).second)
      throw std::invalid_argument("run_stream: duplicate query in schedule");
  }

  StreamResult result;
  result.log.tau_f = forecaster.horizon().tau_f;
  for (FrameIndex t = 0; t < scenario.duration; ++t) {
    std::vector<AgentFrameOutput> outputs = streamer.step(scenario.observations_at(t));
    for (AgentFrameOutput& out : outputs) {
      const auto it = wanted.find(std::make_pair(t, out.agent_id));
      if (it == wanted.end()) continue;
      QueryRecord record;
      record.frame = t;
      record.agent_id = out.agent_id;
      record.subset = it->second;
      record.anchor = out.anchor;
      record.raw = std::move(out.raw);
      record.refined = std::move(out.refined);
      result.log.records.push_back(std::move(record));
    }
  }
  result.refine_stats = streamer.refine_stats();
  return result;
}

namespace {

void write_mode_line(std::ostream& out, const QueryRecord& record, const char* tag, int mode,
                     const MultiModalPrediction& prediction) {
  out << record.frame << ',' << record.agent_id << ',' << to_string(record.subset) << ',' << mode
      << ',' << format_double(prediction.confidences()[static_cast<std::size_t>(mode)]);
  for (const Vec2& step : prediction.modes()[static_cast<std::size_t>(mode)].steps())
    out << ',' << format_double(step.x()) << ',' << format_double(step.y());
  out << ',' << tag << ',' << format_double(record.anchor.x) << ','
      << format_double(record.anchor.y) << '\n';
}

}  // namespace

void write_prediction_log(std::ostream& out, const PredictionLog& log) {
  out << "#pred,tau_f=" << log.tau_f << '\n';
  for (const QueryRecord& r : log.records) {
    if (r.raw.horizon() != log.tau_f)
      throw std::invalid_argument("prediction log: record horizon differs from tau_f");
    for (int k = 0; k < r.raw.num_modes(); ++k) write_mode_line(out, r, "raw", k, r.raw);
    if (r.refined)
      for (int k = 0; k < r.refined->num_modes(); ++k)
        write_mode_line(out, r, "refined", k, *r.refined);
  }
}

namespace {

struct ModeLine {
  FrameIndex frame = 0;
  std::string agent_id;
  Subset subset = Subset::kMovingVisible;
  int mode = 0;
  double confidence = 0.0;
  MovementTrajectory steps;
  bool refined = false;
  Position2 anchor;
};

ModeLine parse_mode_line(const std::vector<std::string>& f, int tau_f, long line_no) {
  if (static_cast<int>(f.size()) != 5 + 2 * tau_f + 3)
    parse_fail(line_no, "expected " + std::to_string(5 + 2 * tau_f + 3) + " fields, got " +
                            std::to_string(f.size()));
  ModeLine m;
  m.frame = parse_long(f[0], line_no, "frame");
  m.agent_id = f[1];
  if (m.agent_id.empty()) parse_fail(line_no, "empty agent id");
  const auto subset = subset_from_string(f[2]);
  if (!subset) parse_fail(line_no, "unknown subset '" + f[2] + "'");
  m.subset = *subset;
  m.mode = static_cast<int>(parse_long(f[3], line_no, "mode index"));
  m.confidence = parse_double(f[4], line_no, "confidence");
  std::vector<Vec2> steps(static_cast<std::size_t>(tau_f));
  for (int j = 0; j < tau_f; ++j)
    steps[static_cast<std::size_t>(j)] =
        Vec2(parse_double(f[static_cast<std::size_t>(5 + 2 * j)], line_no, "dx"),
             parse_double(f[static_cast<std::size_t>(6 + 2 * j)], line_no, "dy"));
  m.steps = MovementTrajectory(std::move(steps));
  const std::string& tag = f[static_cast<std::size_t>(5 + 2 * tau_f)];
  if (tag == "raw")
    m.refined = false;
  else if (tag == "refined")
    m.refined = true;
  else
    parse_fail(line_no, "expected raw|refined tag, got '" + tag + "'");
  m.anchor.x = parse_double(f[static_cast<std::size_t>(5 + 2 * tau_f + 1)], line_no, "anchor x");
  m.anchor.y = parse_double(f[static_cast<std::size_t>(5 + 2 * tau_f + 2)], line_no, "anchor y");
  return m;
}

class RecordAssembler {
 public:
  explicit RecordAssembler(PredictionLog* log) : log_(log) {}

  void add(ModeLine line, long line_no) {
    // Every record opens with its raw mode-0 line; that line cannot occur
    // anywhere else, so it is the unambiguous record boundary.
    const bool starts = !line.refined && line.mode == 0;
    if (starts) {
      if (!lines_.empty()) flush(line_no);
    } else {
      validate_next(line, line_no);
    }
    lines_.push_back(std::move(line));
  }

  void finish(long line_no) {
    if (!lines_.empty()) flush(line_no);
  }

 private:
  void validate_next(const ModeLine& line, long line_no) const {
    if (lines_.empty()) parse_fail(line_no, "record must start with raw mode 0");
    const ModeLine& prev = lines_.back();
    if (line.frame != prev.frame || line.agent_id != prev.agent_id)
      parse_fail(line_no, "query changed mid-record");
    if (line.subset != prev.subset) parse_fail(line_no, "subset changed mid-record");
    if (line.anchor.x != prev.anchor.x || line.anchor.y != prev.anchor.y)
      parse_fail(line_no, "anchor changed mid-record");
    if (line.refined == prev.refined) {
      if (line.mode != prev.mode + 1) parse_fail(line_no, "mode indices must be contiguous");
    } else {
      if (prev.refined) parse_fail(line_no, "raw lines after refined lines");
      if (line.mode != 0) parse_fail(line_no, "refined lines must restart at mode 0");
    }
  }

  void flush(long line_no) {
    std::vector<MovementTrajectory> raw_modes;
    std::vector<double> raw_conf;
    std::vector<MovementTrajectory> refined_modes;
    std::vector<double> refined_conf;
    for (ModeLine& l : lines_) {
      if (l.refined) {
        refined_modes.push_back(std::move(l.steps));
        refined_conf.push_back(l.confidence);
      } else {
        raw_modes.push_back(std::move(l.steps));
        raw_conf.push_back(l.confidence);
      }
    }
    if (!refined_modes.empty() && refined_modes.size() != raw_modes.size())
      parse_fail(line_no, "raw and refined mode counts differ");
    QueryRecord record;
    record.frame = lines_.front().frame;
    record.agent_id = lines_.front().agent_id;
    record.subset = lines_.front().subset;
    record.anchor = lines_.front().anchor;
    record.raw = MultiModalPrediction(record.agent_id, record.frame, std::move(raw_modes),
                                      std::move(raw_conf));
    if (!refined_modes.empty())
      record.refined = MultiModalPrediction(record.agent_id, record.frame,
                                            std::move(refined_modes), std::move(refined_conf));
    log_->records.push_back(std::move(record));
    lines_.clear();
  }

  PredictionLog* log_;
  std::vector<ModeLine> lines_;
};

}  // namespace

PredictionLog read_prediction_log(std::istream& in) {
  PredictionLog log;
  std::string line;
  long line_no = 0;
  bool have_header = false;
  RecordAssembler assembler(&log);
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("#pred,tau_f=", 0) == 0) {
        if (have_header) parse_fail(line_no, "duplicate #pred header");
        log.tau_f = static_cast<int>(parse_long(line.substr(12), line_no, "tau_f"));
        if (log.tau_f < 1) parse_fail(line_no, "tau_f must be >= 1");
        have_header = true;
      }
      continue;
    }
    if (!have_header) parse_fail(line_no, "data before #pred header");
    assembler.add(parse_mode_line(split_csv(line), log.tau_f, line_no), line_no);
  }
  assembler.finish(line_no + 1);
  return log;
}

void write_prediction_log_file(const std::string& path, const PredictionLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_prediction_log(out, log);
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

PredictionLog read_prediction_log_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return read_prediction_log(in);
}

}  // namespace flowcast::stream
