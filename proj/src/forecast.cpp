#include "flowcast/forecast.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace flowcast::forecast {

namespace {

double wrap_angle(double a) {
  while (a > M_PI) a -= 2 * M_PI;
  while (a < -M_PI) a += 2 * M_PI;
  return a;
}

double huber(double e, double delta) {
  const double ae = std::abs(e);
  if (ae <= delta) return 0.5 * e * e;
  return delta * (ae - 0.5 * delta);
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const Eigen::ArrayXd ex = (logits.array() - logits.maxCoeff()).exp();
  return (ex / ex.sum()).matrix();
}

}  // namespace

void HistoryWindow::validate(int tau_h) const {
  if (target_id.empty()) throw std::invalid_argument("history window: empty target id");
  if (static_cast<int>(target.size()) != tau_h)
    throw std::invalid_argument("history window: target must hold exactly tau_h positions");
  for (const auto& p : target)
    if (!is_finite(p))
      throw std::invalid_argument("history window: non-finite target position (unfilled slot?)");
  for (const auto& nb : neighbors) {
    if (static_cast<int>(nb.size()) != tau_h)
      throw std::invalid_argument("history window: neighbor histories must hold tau_h positions");
    for (const auto& p : nb)
      if (!is_finite(p)) throw std::invalid_argument("history window: non-finite neighbor position");
  }
}

bool GroundTruthSequence::any_valid() const {
  for (bool v : valid)
    if (v) return true;
  return false;
}

void GroundTruthSequence::validate(int tau_f) const {
  if (static_cast<int>(rel.size()) != tau_f || valid.size() != rel.size())
    throw std::invalid_argument("ground truth: need tau_f entries with matching validity");
  for (std::size_t j = 0; j < rel.size(); ++j)
    if (valid[j] && !rel[j].allFinite())
      throw std::invalid_argument("ground truth: non-finite valid entry");
}

double masked_mean_displacement(const MovementTrajectory& mode, const GroundTruthSequence& gt) {
  if (mode.horizon() != gt.horizon())
    throw std::invalid_argument("wta: mode and ground-truth horizons differ");
  double sum = 0.0;
  int count = 0;
  Vec2 cum = Vec2::Zero();
  for (int j = 0; j < mode.horizon(); ++j) {
    cum += mode.steps()[static_cast<std::size_t>(j)];
    if (!gt.valid[static_cast<std::size_t>(j)]) continue;
    sum += (cum - gt.rel[static_cast<std::size_t>(j)]).norm();
    ++count;
  }
  if (count == 0) return std::numeric_limits<double>::infinity();
  return sum / count;
}

WtaResult wta_loss(const MultiModalPrediction& prediction, const GroundTruthSequence& gt,
                   double huber_delta, double conf_weight) {
  gt.validate(prediction.horizon());
  WtaResult r;
  if (!gt.any_valid()) return r;

  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k < prediction.num_modes(); ++k) {
    const double d = masked_mean_displacement(prediction.modes()[static_cast<std::size_t>(k)], gt);
    if (d < best) {
      best = d;
      r.best_mode = k;
    }
  }

  const MovementTrajectory& mode = prediction.modes()[static_cast<std::size_t>(r.best_mode)];
  Vec2 cum = Vec2::Zero();
  int count = 0;
  double reg = 0.0;
  for (int j = 0; j < mode.horizon(); ++j) {
    cum += mode.steps()[static_cast<std::size_t>(j)];
    if (!gt.valid[static_cast<std::size_t>(j)]) continue;
    const Vec2 e = cum - gt.rel[static_cast<std::size_t>(j)];
    reg += huber(e.x(), huber_delta) + huber(e.y(), huber_delta);
    ++count;
  }
  r.regression = reg / count;
  r.confidence = -std::log(prediction.confidences()[static_cast<std::size_t>(r.best_mode)]);
  r.loss = r.regression + conf_weight * r.confidence;
  return r;
}

AnalyticForecaster::AnalyticForecaster(HorizonConfig horizon)
    : AnalyticForecaster(horizon, Options{}) {}

AnalyticForecaster::AnalyticForecaster(HorizonConfig horizon, Options options)
    : horizon_(horizon), options_(options) {
  horizon_.validate();
  if (horizon_.tau_h < 2)
    throw std::invalid_argument("analytic forecaster: needs tau_h >= 2 for displacements");
  if (horizon_.num_modes > 9)
    throw std::invalid_argument("analytic forecaster: at most 9 rollout modes");
  if (!(options_.confidence_decay > 0.0 && options_.confidence_decay <= 1.0))
    throw std::invalid_argument("analytic forecaster: confidence decay must lie in (0, 1]");
}

Eigen::VectorXd AnalyticForecaster::encode(const HistoryWindow& window) const {
  window.validate(horizon_.tau_h);
  const int n = horizon_.tau_h - 1;
  Vec2 mean_v = Vec2::Zero();
  double mean_speed = 0.0;
  std::vector<double> headings(static_cast<std::size_t>(n));
  std::vector<bool> heading_valid(static_cast<std::size_t>(n), false);
  for (int i = 0; i < n; ++i) {
    const Vec2 d = window.target[static_cast<std::size_t>(i + 1)].vec() -
                   window.target[static_cast<std::size_t>(i)].vec();
    mean_v += d;
    mean_speed += d.norm();
    if (d.norm() > 1e-9) {
      headings[static_cast<std::size_t>(i)] = std::atan2(d.y(), d.x());
      heading_valid[static_cast<std::size_t>(i)] = true;
    }
  }
  mean_v /= n;
  mean_speed /= n;

  double turn = 0.0;
  int turn_count = 0;
  for (int i = 0; i + 1 < n; ++i)
    if (heading_valid[static_cast<std::size_t>(i)] && heading_valid[static_cast<std::size_t>(i + 1)]) {
      turn += wrap_angle(headings[static_cast<std::size_t>(i + 1)] -
                         headings[static_cast<std::size_t>(i)]);
      ++turn_count;
    }
  if (turn_count > 0) turn /= turn_count;

  double last_heading = 0.0;
  for (int i = n - 1; i >= 0; --i)
    if (heading_valid[static_cast<std::size_t>(i)]) {
      last_heading = headings[static_cast<std::size_t>(i)];
      break;
    }

  Eigen::VectorXd f(5);
  f << mean_v.x(), mean_v.y(), turn, mean_speed, last_heading;
  return f;
}

namespace {

struct Perturbation {
  double speed_scale;
  double turn_sign;  // multiplies the configured turn offset
};

// Priority order of (speed scale, turn offset) rollout perturbations.
constexpr Perturbation kPerturbations[9] = {
    {1.0, 0.0}, {1.2, 0.0},  {0.8, 0.0},  {1.0, 1.0}, {1.0, -1.0},
    {1.2, 1.0}, {0.8, -1.0}, {1.2, -1.0}, {0.8, 1.0},
};

}  // namespace

MultiModalPrediction AnalyticForecaster::decode(const Eigen::VectorXd& feature,
                                                const std::string& agent_id,
                                                FrameIndex frame) const {
  if (feature.size() != 5) throw std::invalid_argument("analytic forecaster: bad feature length");
  const double turn = feature[2];
  const double speed = feature[3];
  const double heading = feature[4];

  std::vector<MovementTrajectory> modes;
  std::vector<double> confidences;
  double conf = 1.0;
  for (int k = 0; k < horizon_.num_modes; ++k) {
    const Perturbation& p = kPerturbations[k];
    const double omega = turn + p.turn_sign * options_.turn_offset;
    std::vector<Vec2> steps(static_cast<std::size_t>(horizon_.tau_f));
    for (int j = 0; j < horizon_.tau_f; ++j) {
      const double theta = heading + (j + 1) * omega;
      steps[static_cast<std::size_t>(j)] =
          speed * p.speed_scale * Vec2(std::cos(theta), std::sin(theta));
    }
    modes.emplace_back(std::move(steps));
    confidences.push_back(conf);
    conf *= options_.confidence_decay;
  }
  return MultiModalPrediction(agent_id, frame, std::move(modes), std::move(confidences));
}

MovementTrajectory AnalyticForecaster::decode_single(const Eigen::VectorXd& feature) const {
  const MultiModalPrediction p = decode(feature, "single", 0);
  std::vector<Vec2> steps(static_cast<std::size_t>(horizon_.tau_f), Vec2::Zero());
  for (int k = 0; k < p.num_modes(); ++k)
    for (int j = 0; j < horizon_.tau_f; ++j)
      steps[static_cast<std::size_t>(j)] += p.confidences()[static_cast<std::size_t>(k)] *
                                            p.modes()[static_cast<std::size_t>(k)]
                                                .steps()[static_cast<std::size_t>(j)];
  return MovementTrajectory(std::move(steps));
}

LearnedForecaster::LearnedForecaster(HorizonConfig horizon, int feature_size, int hidden)
    : horizon_(horizon), feature_size_(feature_size), hidden_(hidden) {
  horizon_.validate();
  if (horizon_.tau_h < 2)
    throw std::invalid_argument("learned forecaster: needs tau_h >= 2 for displacements");
  if (feature_size_ < 1 || hidden_ < 1)
    throw std::invalid_argument("learned forecaster: sizes must be >= 1");
  encoder_ = nn::Mlp(nn::MlpSpec{{encoder_input_size(), hidden_, hidden_, feature_size_}}, &arena_);
  for (int k = 0; k < horizon_.num_modes; ++k)
    heads_.emplace_back(nn::MlpSpec{{feature_size_, hidden_, 2 * horizon_.tau_f}}, &arena_);
  confidence_ = nn::Mlp(nn::MlpSpec{{feature_size_, hidden_, horizon_.num_modes}}, &arena_);
  single_ = nn::Mlp(nn::MlpSpec{{feature_size_, hidden_, 2 * horizon_.tau_f}}, &arena_);
}

void LearnedForecaster::init(std::mt19937_64& rng) {
  encoder_.init(rng);
  for (auto& h : heads_) h.init(rng);
  confidence_.init(rng);
  single_.init(rng);
}

int LearnedForecaster::encoder_input_size() const { return 2 * (horizon_.tau_h - 1) + 3 + 4; }

Eigen::VectorXd LearnedForecaster::encoder_input(const HistoryWindow& window) const {
  window.validate(horizon_.tau_h);
  Eigen::VectorXd in = Eigen::VectorXd::Zero(encoder_input_size());
  const int n = horizon_.tau_h - 1;
  for (int i = 0; i < n; ++i) {
    const Vec2 d = window.target[static_cast<std::size_t>(i + 1)].vec() -
                   window.target[static_cast<std::size_t>(i)].vec();
    in[2 * i] = d.x();
    in[2 * i + 1] = d.y();
  }
  const Position2& current = window.target.back();
  int off = 2 * n;
  if (window.lane_map) {
    if (const auto q = window.lane_map->nearest(current)) {
      in[off] = q->tangent.x();
      in[off + 1] = q->tangent.y();
      in[off + 2] = q->distance;
    }
  }
  off += 3;
  if (!window.neighbors.empty()) {
    const double count = static_cast<double>(window.neighbors.size());
    Vec2 mean_rel = Vec2::Zero();
    double mean_speed = 0.0;
    for (const auto& nb : window.neighbors) {
      mean_rel += nb.back().vec() - current.vec();
      mean_speed += (nb[nb.size() - 1].vec() - nb[nb.size() - 2].vec()).norm();
    }
    in[off] = count / 10.0;
    in[off + 1] = mean_rel.x() / count;
    in[off + 2] = mean_rel.y() / count;
    in[off + 3] = mean_speed / count;
  }
  return in;
}

Eigen::VectorXd LearnedForecaster::encode(const HistoryWindow& window) const {
  return encoder_.forward(encoder_input(window));
}

Eigen::VectorXd LearnedForecaster::confidence_logits(const Eigen::VectorXd& feature) const {
  return confidence_.forward(feature);
}

MultiModalPrediction LearnedForecaster::decode(const Eigen::VectorXd& feature,
                                               const std::string& agent_id,
                                               FrameIndex frame) const {
  std::vector<MovementTrajectory> modes;
  modes.reserve(static_cast<std::size_t>(horizon_.num_modes));
  for (const auto& head : heads_) {
    const Eigen::VectorXd out = head.forward(feature);
    modes.push_back(
        MovementTrajectory::from_axes(out.head(horizon_.tau_f), out.tail(horizon_.tau_f)));
  }
  const Eigen::VectorXd conf = softmax(confidence_.forward(feature));
  return MultiModalPrediction(agent_id, frame, std::move(modes),
                              std::vector<double>(conf.data(), conf.data() + conf.size()));
}

MovementTrajectory LearnedForecaster::decode_single(const Eigen::VectorXd& feature) const {
  const Eigen::VectorXd out = single_.forward(feature);
  return MovementTrajectory::from_axes(out.head(horizon_.tau_f), out.tail(horizon_.tau_f));
}

LearnedForecaster::LeafBundle LearnedForecaster::leaves(ad::Tape& tape) const {
  LeafBundle b;
  b.encoder = encoder_.leaves(tape);
  for (const auto& h : heads_) b.heads.push_back(h.leaves(tape));
  b.confidence = confidence_.leaves(tape);
  b.single = single_.leaves(tape);
  return b;
}

ad::Var LearnedForecaster::encode(ad::Tape& tape, const LeafBundle& leaves,
                                  const ad::Var& encoder_in) const {
  return encoder_.forward(tape, leaves.encoder, encoder_in);
}

LearnedForecaster::AxisPair LearnedForecaster::decode_mode(ad::Tape& tape,
                                                           const LeafBundle& leaves, int mode,
                                                           const ad::Var& feature) const {
  if (mode < 0 || mode >= horizon_.num_modes)
    throw std::invalid_argument("learned forecaster: mode index out of range");
  const ad::Var out = heads_[static_cast<std::size_t>(mode)].forward(
      tape, leaves.heads[static_cast<std::size_t>(mode)], feature);
  return {ad::block(out, 0, 0, horizon_.tau_f, 1), ad::block(out, horizon_.tau_f, 0, horizon_.tau_f, 1)};
}

ad::Var LearnedForecaster::decode_logits(ad::Tape& tape, const LeafBundle& leaves,
                                         const ad::Var& feature) const {
  return confidence_.forward(tape, leaves.confidence, feature);
}

LearnedForecaster::AxisPair LearnedForecaster::decode_single(ad::Tape& tape,
                                                             const LeafBundle& leaves,
                                                             const ad::Var& feature) const {
  const ad::Var out = single_.forward(tape, leaves.single, feature);
  return {ad::block(out, 0, 0, horizon_.tau_f, 1), ad::block(out, horizon_.tau_f, 0, horizon_.tau_f, 1)};
}

void LearnedForecaster::add_param_grads(const LeafBundle& leaves, Eigen::VectorXd& grad) const {
  encoder_.add_param_grads(leaves.encoder, grad);
  for (std::size_t k = 0; k < heads_.size(); ++k)
    heads_[k].add_param_grads(leaves.heads[k], grad);
  confidence_.add_param_grads(leaves.confidence, grad);
  single_.add_param_grads(leaves.single, grad);
}

}  // namespace flowcast::forecast
