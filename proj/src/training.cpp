#include "flowcast/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>

namespace flowcast::train {

namespace {

Eigen::MatrixXd cumsum_matrix(int n) {
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) l(i, j) = 1.0;
  return l;
}

Eigen::MatrixXd mask_weights(const std::vector<bool>& valid) {
  int count = 0;
  for (bool v : valid)
    if (v) ++count;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(static_cast<int>(valid.size()), 1);
  if (count == 0) return w;
  for (int j = 0; j < static_cast<int>(valid.size()); ++j)
    if (valid[static_cast<std::size_t>(j)]) w(j, 0) = 1.0 / count;
  return w;
}

}  // namespace

void DatasetConfig::validate() const {
  if (group_size < 1) throw std::invalid_argument("dataset: group_size must be >= 1");
  if (frame_stride < 1) throw std::invalid_argument("dataset: frame_stride must be >= 1");
}

std::vector<Position2> filled_history(const scenario::AgentTrack& track, FrameIndex t, int tau_h) {
  if (tau_h < 1) throw std::invalid_argument("filled_history: tau_h must be >= 1");
  if (!track.covers(t)) throw std::invalid_argument("filled_history: track does not cover t");
  std::vector<Position2> out(static_cast<std::size_t>(tau_h));
  for (int i = 0; i < tau_h; ++i) {
    FrameIndex f = t - tau_h + 1 + i;
    if (f < track.first_frame()) f = track.first_frame();
    // Occluded slots hold the newest visible position at or before f; the
    // first frame of a track is visible by contract, so the scan terminates.
    FrameIndex g = f;
    while (!track.at(g).visible) --g;
    out[static_cast<std::size_t>(i)] = track.at(g).position;
  }
  return out;
}

forecast::GroundTruthSequence ground_truth_rel(const scenario::AgentTrack& track, FrameIndex t,
                                               int tau_f) {
  if (!track.covers(t)) throw std::invalid_argument("ground_truth_rel: track does not cover t");
  const Vec2 base = track.at(t).position.vec();
  forecast::GroundTruthSequence gt;
  gt.rel.assign(static_cast<std::size_t>(tau_f), Vec2::Zero());
  gt.valid.assign(static_cast<std::size_t>(tau_f), false);
  for (int j = 1; j <= tau_f; ++j) {
    const FrameIndex f = t + j;
    if (!track.covers(f)) continue;
    const scenario::TrackPoint& point = track.at(f);
    gt.rel[static_cast<std::size_t>(j - 1)] = point.position.vec() - base;
    gt.valid[static_cast<std::size_t>(j - 1)] = point.visible;
  }
  return gt;
}

std::vector<SampleGroup> build_snapshot_dataset(const std::vector<scenario::Scenario>& scenarios,
                                                const HorizonConfig& horizon,
                                                const DatasetConfig& config) {
  horizon.validate();
  config.validate();
  std::vector<SampleGroup> groups;
  for (const scenario::Scenario& scn : scenarios) {
    for (const scenario::AgentTrack& track : scn.tracks) {
      // Runs of consecutive eligible frames; a group needs group_size
      // adjacent ones.
      std::vector<Sample> run;
      auto flush_run = [&] {
        const int full = static_cast<int>(run.size()) / config.group_size;
        for (int g = 0; g < full; ++g) {
          SampleGroup group;
          for (int i = 0; i < config.group_size; ++i)
            group.samples.push_back(
                std::move(run[static_cast<std::size_t>(g * config.group_size + i)]));
          groups.push_back(std::move(group));
        }
        run.clear();
      };
      for (FrameIndex t = std::max<FrameIndex>(horizon.tau_h, track.first_frame());
           t <= track.last_frame(); ++t) {
        const bool stride_ok = (t - horizon.tau_h) % config.frame_stride == 0;
        bool eligible = stride_ok && track.at(t).visible;
        forecast::GroundTruthSequence gt;
        if (eligible) {
          gt = ground_truth_rel(track, t, horizon.tau_f);
          eligible = gt.any_valid();
        }
        if (!eligible) {
          flush_run();
          continue;
        }
        Sample sample;
        sample.window.target_id = track.agent_id();
        sample.window.frame = t;
        sample.window.target = filled_history(track, t, horizon.tau_h);
        sample.window.lane_map = &scn.lane_map;
        for (const scenario::AgentTrack& other : scn.tracks) {
          if (&other == &track || !other.covers(t)) continue;
          sample.window.neighbors.push_back(filled_history(other, t, horizon.tau_h));
        }
        sample.gt = std::move(gt);
        run.push_back(std::move(sample));
      }
      flush_run();
    }
  }
  return groups;
}

TrainConfig pretrain_config() {
  TrainConfig c;
  c.adam.lr = 5e-4;
  c.adam.weight_decay = 1e-4;
  c.epochs = 24;
  return c;
}

TrainConfig finetune_config() {
  TrainConfig c;
  c.adam.lr = 1e-4;
  c.adam.weight_decay = 1e-4;
  c.epochs = 8;
  return c;
}

TrainResult train_snapshot(forecast::LearnedForecaster& model,
                           const std::vector<SampleGroup>& groups, const TrainConfig& config) {
  if (groups.empty()) throw std::invalid_argument("train_snapshot: empty dataset");
  const HorizonConfig& horizon = model.horizon();
  const Eigen::MatrixXd cumsum = cumsum_matrix(horizon.tau_f);

  nn::AdamW adam(model.arena().size(), config.adam);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    long epoch_steps = 0;
    for (std::size_t gi : order) {
      const SampleGroup& group = groups[gi];
      ad::Tape tape;
      const forecast::LearnedForecaster::LeafBundle leaves = model.leaves(tape);
      std::optional<ad::Var> total;
      int contributing = 0;
      for (const Sample& sample : group.samples) {
        if (!sample.gt.any_valid()) continue;
        // Mode selection happens on plain values; only the winning head,
        // the confidence head, and the single head reach the tape.
        const Eigen::VectorXd enc_in = model.encoder_input(sample.window);
        const Eigen::VectorXd feature_plain = model.encode(sample.window);
        const MultiModalPrediction plain =
            model.decode(feature_plain, sample.window.target_id, sample.window.frame);
        const forecast::WtaResult wta =
            forecast::wta_loss(plain, sample.gt, config.huber_delta, config.conf_weight);

        const ad::Var enc_leaf = tape.leaf(enc_in);
        const ad::Var feature = model.encode(tape, leaves, enc_leaf);
        const forecast::LearnedForecaster::AxisPair best =
            model.decode_mode(tape, leaves, wta.best_mode, feature);

        Eigen::MatrixXd tx(horizon.tau_f, 1), ty(horizon.tau_f, 1);
        for (int j = 0; j < horizon.tau_f; ++j) {
          tx(j, 0) = sample.gt.rel[static_cast<std::size_t>(j)].x();
          ty(j, 0) = sample.gt.rel[static_cast<std::size_t>(j)].y();
        }
        const Eigen::MatrixXd w = mask_weights(sample.gt.valid);
        const ad::Var cum_leaf = tape.leaf(cumsum);

        ad::Var loss = ad::add(
            ad::huber_loss(ad::matmul(cum_leaf, best.x), tx, w, config.huber_delta),
            ad::huber_loss(ad::matmul(cum_leaf, best.y), ty, w, config.huber_delta));
        const ad::Var logits = model.decode_logits(tape, leaves, feature);
        loss = ad::add(loss,
                       ad::scale(ad::softmax_cross_entropy(logits, wta.best_mode),
                                 config.conf_weight));
        if (config.single_weight != 0.0) {
          const forecast::LearnedForecaster::AxisPair single =
              model.decode_single(tape, leaves, feature);
          const ad::Var single_reg = ad::add(
              ad::huber_loss(ad::matmul(cum_leaf, single.x), tx, w, config.huber_delta),
              ad::huber_loss(ad::matmul(cum_leaf, single.y), ty, w, config.huber_delta));
          loss = ad::add(loss, ad::scale(single_reg, config.single_weight));
        }
        total = total ? ad::add(*total, loss) : loss;
        ++contributing;
      }
      if (!total) continue;
      const ad::Var mean_loss = ad::scale(*total, 1.0 / contributing);
      const double loss_value = mean_loss.value()(0, 0);
      if (!std::isfinite(loss_value)) {
        std::ostringstream msg;
        msg << "train_snapshot: non-finite loss " << loss_value << " at step " << result.steps;
        throw std::runtime_error(msg.str());
      }
      tape.backward(mean_loss);
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(model.arena().size());
      model.add_param_grads(leaves, grad);
      adam.step(model.arena().values(), grad);
      result.step_losses.push_back(loss_value);
      result.steps += 1;
      epoch_sum += loss_value;
      epoch_steps += 1;
    }
    result.epoch_losses.push_back(epoch_steps > 0 ? epoch_sum / epoch_steps : 0.0);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Differentiable unroll.
// ---------------------------------------------------------------------------

void UnrollSpec::validate(const forecast::LearnedForecaster& model,
                          const df::CovarianceNet& net) const {
  const HorizonConfig& horizon = model.horizon();
  if (net.tau_f() != horizon.tau_f)
    throw std::invalid_argument("unroll: covariance net horizon differs from the model's");
  if (net.feature_size() != model.feature_size())
    throw std::invalid_argument("unroll: covariance net feature size differs from the model's");
  if (policy == stream::OcclusionPolicy::kKalmanBaseline)
    throw std::invalid_argument("unroll: only the learned occlusion policies are differentiable");
  if (static_cast<int>(history.size()) != horizon.tau_h)
    throw std::invalid_argument("unroll: history must hold tau_h positions");
  const int f = frames();
  if (f < 1) throw std::invalid_argument("unroll: needs at least one frame");
  if (occluded[0]) throw std::invalid_argument("unroll: frame 0 must be visible");
  if (static_cast<int>(observed.size()) != f || static_cast<int>(gt_abs.size()) != f ||
      static_cast<int>(gt_valid.size()) != f)
    throw std::invalid_argument("unroll: per-frame vectors must share one length");
  for (int i = 0; i < f; ++i)
    if (static_cast<int>(gt_abs[static_cast<std::size_t>(i)].size()) != horizon.tau_f ||
        static_cast<int>(gt_valid[static_cast<std::size_t>(i)].size()) != horizon.tau_f)
      throw std::invalid_argument("unroll: ground truth must cover tau_f frames");
  if (!(q > 0.0) || !(sigma0 > 0.0)) throw std::invalid_argument("unroll: q and sigma0 positive");
}

namespace {

struct BuiltUnroll {
  ad::Var loss;
  forecast::LearnedForecaster::LeafBundle model_leaves;
  nn::Mlp::Leaves net_leaves;
  UnrollDiagnostics diagnostics;
  bool has_loss = false;
};

/// Softmax over a logits column, computed on values (selection only).
Eigen::VectorXd value_softmax(const ad::Var& logits) {
  const Eigen::VectorXd l = logits.value().col(0);
  const Eigen::ArrayXd e = (l.array() - l.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

BuiltUnroll build_unroll(ad::Tape& tape, const forecast::LearnedForecaster& model,
                         const df::CovarianceNet& net, const UnrollSpec& spec) {
  spec.validate(model, net);
  const HorizonConfig& horizon = model.horizon();
  const int tau_h = horizon.tau_h;
  const int tau_f = horizon.tau_f;
  const int num_modes = horizon.num_modes;
  const bool single_policy = spec.policy == stream::OcclusionPolicy::kSingleModal;

  BuiltUnroll built;
  built.model_leaves = model.leaves(tape);
  built.net_leaves = net.mlp().leaves(tape);
  UnrollDiagnostics& diag = built.diagnostics;

  const ad::Var cumsum = tape.leaf(cumsum_matrix(tau_f));
  const ad::Var ones_col = tape.leaf(Eigen::MatrixXd::Ones(tau_f, 1));
  const ad::Var tail_zeros = tape.leaf(Eigen::MatrixXd::Zero(7, 1));  // lane + neighbor slots
  const ad::Var birth_cov = tape.leaf(spec.sigma0 * spec.sigma0 *
                                      Eigen::MatrixXd::Identity(tau_f, tau_f));

  // The rolling window holds one 2x1 node per position so hallucinated
  // entries stay differentiable.
  std::vector<ad::Var> window;
  window.reserve(static_cast<std::size_t>(tau_h));
  for (const Position2& p : spec.history) window.push_back(tape.leaf(p.vec()));

  std::vector<std::array<std::optional<df::FilterStateVar>, 2>> bank(
      static_cast<std::size_t>(num_modes));
  std::array<std::optional<df::FilterStateVar>, 2> single_bank;

  // Previous frame's refined outputs, for the occlusion feedback.
  std::vector<std::array<ad::Var, 2>> prev_refined(static_cast<std::size_t>(num_modes));
  Eigen::VectorXd prev_conf;
  std::array<ad::Var, 2> prev_single;

  std::optional<ad::Var> total;
  int loss_frames = 0;

  for (int f = 0; f < spec.frames(); ++f) {
    if (f > 0) {
      ad::Var next_pos;
      if (!spec.occluded[static_cast<std::size_t>(f)]) {
        next_pos = tape.leaf(spec.observed[static_cast<std::size_t>(f)].vec());
      } else if (single_policy) {
        const ad::Var step = ad::concat_rows(ad::block(prev_single[0], 0, 0, 1, 1),
                                             ad::block(prev_single[1], 0, 0, 1, 1));
        next_pos = ad::add(window.back(), step);
      } else {
        int best = 0;
        for (int k = 1; k < num_modes; ++k)
          if (prev_conf[k] > prev_conf[best]) best = k;
        double gap = std::numeric_limits<double>::infinity();
        for (int k = 0; k < num_modes; ++k)
          if (k != best) gap = std::min(gap, prev_conf[best] - prev_conf[k]);
        diag.min_confidence_gap = std::min(diag.min_confidence_gap, gap);
        const ad::Var step =
            ad::concat_rows(ad::block(prev_refined[static_cast<std::size_t>(best)][0], 0, 0, 1, 1),
                            ad::block(prev_refined[static_cast<std::size_t>(best)][1], 0, 0, 1, 1));
        next_pos = ad::add(window.back(), step);
      }
      window.erase(window.begin());
      window.push_back(next_pos);
    }

    // Encoder input: stacked displacements, then constant-zero lane and
    // neighbor slots (empty map, no neighbors).
    ad::Var enc_in = ad::sub(window[1], window[0]);
    for (int i = 2; i < tau_h; ++i)
      enc_in = ad::concat_rows(enc_in, ad::sub(window[static_cast<std::size_t>(i)],
                                               window[static_cast<std::size_t>(i - 1)]));
    enc_in = ad::concat_rows(enc_in, tail_zeros);

    const ad::Var feature = model.encode(tape, built.model_leaves, enc_in);
    const bool occ = spec.occluded[static_cast<std::size_t>(f)];
    Eigen::MatrixXd flag(1, 1);
    flag(0, 0) = occ ? 1.0 : 0.0;
    const ad::Var feature_with_flag = ad::concat_rows(feature, tape.leaf(flag));
    const df::CovarianceNet::RDiagVar rd = net.r_diag(tape, built.net_leaves, feature_with_flag);
    const std::array<const ad::Var*, 2> r_axes = {&rd.x, &rd.y};

    const ad::Var logits = model.decode_logits(tape, built.model_leaves, feature);
    prev_conf = value_softmax(logits);

    std::vector<std::array<ad::Var, 2>> refined(static_cast<std::size_t>(num_modes));
    for (int m = 0; m < num_modes; ++m) {
      const forecast::LearnedForecaster::AxisPair raw =
          model.decode_mode(tape, built.model_leaves, m, feature);
      const std::array<const ad::Var*, 2> raw_axes = {&raw.x, &raw.y};
      for (int ax = 0; ax < 2; ++ax) {
        auto& state = bank[static_cast<std::size_t>(m)][static_cast<std::size_t>(ax)];
        if (!state) {
          state = df::FilterStateVar{*raw_axes[static_cast<std::size_t>(ax)], birth_cov};
        } else {
          state = df::predict_step(tape, *state, spec.q);
        }
        state = df::update_step(tape, *state, *raw_axes[static_cast<std::size_t>(ax)],
                                *r_axes[static_cast<std::size_t>(ax)]);
        refined[static_cast<std::size_t>(m)][static_cast<std::size_t>(ax)] = state->mean;
      }
    }

    if (single_policy) {
      const forecast::LearnedForecaster::AxisPair raw =
          model.decode_single(tape, built.model_leaves, feature);
      const std::array<const ad::Var*, 2> raw_axes = {&raw.x, &raw.y};
      for (int ax = 0; ax < 2; ++ax) {
        auto& state = single_bank[static_cast<std::size_t>(ax)];
        if (!state) {
          state = df::FilterStateVar{*raw_axes[static_cast<std::size_t>(ax)], birth_cov};
        } else {
          state = df::predict_step(tape, *state, spec.q);
        }
        state = df::update_step(tape, *state, *raw_axes[static_cast<std::size_t>(ax)],
                                *r_axes[static_cast<std::size_t>(ax)]);
        prev_single[static_cast<std::size_t>(ax)] = state->mean;
      }
    }
    prev_refined = refined;

    // Winner-takes-all on the refined absolute trajectories, evaluated on
    // node values; the loss graph then uses only the winner.
    const std::vector<bool>& valid = spec.gt_valid[static_cast<std::size_t>(f)];
    int valid_count = 0;
    for (bool v : valid)
      if (v) ++valid_count;
    if (valid_count == 0) continue;

    const Vec2 anchor = window.back().value().col(0);
    std::vector<double> distances(static_cast<std::size_t>(num_modes));
    for (int m = 0; m < num_modes; ++m) {
      double sum = 0.0;
      Vec2 cum = anchor;
      const Eigen::VectorXd mx = refined[static_cast<std::size_t>(m)][0].value().col(0);
      const Eigen::VectorXd my = refined[static_cast<std::size_t>(m)][1].value().col(0);
      Vec2 acc = Vec2::Zero();
      for (int j = 0; j < tau_f; ++j) {
        acc += Vec2(mx[j], my[j]);
        if (!valid[static_cast<std::size_t>(j)]) continue;
        cum = anchor + acc;
        sum += (cum - spec.gt_abs[static_cast<std::size_t>(f)][static_cast<std::size_t>(j)].vec())
                   .norm();
      }
      distances[static_cast<std::size_t>(m)] = sum / valid_count;
    }
    int best = 0;
    for (int m = 1; m < num_modes; ++m)
      if (distances[static_cast<std::size_t>(m)] < distances[static_cast<std::size_t>(best)])
        best = m;
    double wta_gap = std::numeric_limits<double>::infinity();
    for (int m = 0; m < num_modes; ++m)
      if (m != best)
        wta_gap = std::min(wta_gap, distances[static_cast<std::size_t>(m)] -
                                        distances[static_cast<std::size_t>(best)]);
    diag.min_wta_gap = std::min(diag.min_wta_gap, wta_gap);

    Eigen::MatrixXd tx(tau_f, 1), ty(tau_f, 1);
    for (int j = 0; j < tau_f; ++j) {
      tx(j, 0) = spec.gt_abs[static_cast<std::size_t>(f)][static_cast<std::size_t>(j)].x;
      ty(j, 0) = spec.gt_abs[static_cast<std::size_t>(f)][static_cast<std::size_t>(j)].y;
    }
    const Eigen::MatrixXd w = mask_weights(valid);

    const ad::Var anchor_x = ad::block(window.back(), 0, 0, 1, 1);
    const ad::Var anchor_y = ad::block(window.back(), 1, 0, 1, 1);
    const ad::Var abs_x = ad::add(ad::matmul(cumsum, refined[static_cast<std::size_t>(best)][0]),
                                  ad::matmul(ones_col, anchor_x));
    const ad::Var abs_y = ad::add(ad::matmul(cumsum, refined[static_cast<std::size_t>(best)][1]),
                                  ad::matmul(ones_col, anchor_y));

    for (int j = 0; j < tau_f; ++j) {
      if (!valid[static_cast<std::size_t>(j)]) continue;
      const double ex = std::abs(abs_x.value()(j, 0) - tx(j, 0));
      const double ey = std::abs(abs_y.value()(j, 0) - ty(j, 0));
      diag.min_kink_margin = std::min({diag.min_kink_margin, std::abs(spec.huber_delta - ex),
                                       std::abs(spec.huber_delta - ey)});
    }

    const ad::Var frame_loss = ad::add(ad::huber_loss(abs_x, tx, w, spec.huber_delta),
                                       ad::huber_loss(abs_y, ty, w, spec.huber_delta));
    total = total ? ad::add(*total, frame_loss) : frame_loss;
    ++loss_frames;
  }

  if (total) {
    built.loss = ad::scale(*total, 1.0 / loss_frames);
    built.has_loss = true;
  }
  return built;
}

}  // namespace

double unrolled_loss(const forecast::LearnedForecaster& model, const df::CovarianceNet& net,
                     const UnrollSpec& spec, UnrollDiagnostics* diagnostics) {
  ad::Tape tape;
  const BuiltUnroll built = build_unroll(tape, model, net, spec);
  if (diagnostics) *diagnostics = built.diagnostics;
  return built.has_loss ? built.loss.value()(0, 0) : 0.0;
}

UnrollGrads unrolled_loss_grads(const forecast::LearnedForecaster& model,
                                const df::CovarianceNet& net, const UnrollSpec& spec) {
  ad::Tape tape;
  const BuiltUnroll built = build_unroll(tape, model, net, spec);
  UnrollGrads out;
  out.diagnostics = built.diagnostics;
  out.model_grad = Eigen::VectorXd::Zero(model.arena().size());
  out.net_grad = Eigen::VectorXd::Zero(net.arena().size());
  if (!built.has_loss) return out;
  out.loss = built.loss.value()(0, 0);
  tape.backward(built.loss);
  model.add_param_grads(built.model_leaves, out.model_grad);
  net.mlp().add_param_grads(built.net_leaves, out.net_grad);
  return out;
}

// ---------------------------------------------------------------------------
// Streaming stage.
// ---------------------------------------------------------------------------

StreamingTrainConfig streaming_config() {
  StreamingTrainConfig c;
  c.adam.lr = 1e-4;
  c.adam.weight_decay = 1e-4;
  return c;
}

namespace {

struct FrozenFrame {
  Eigen::VectorXd feature_with_flag;
  std::vector<Eigen::VectorXd> raw_x;  // per mode
  std::vector<Eigen::VectorXd> raw_y;
  Position2 anchor;
  Eigen::MatrixXd gt_x;  // tau_f x 1 absolute targets
  Eigen::MatrixXd gt_y;
  std::vector<bool> valid;
};

struct OpenWindow {
  std::optional<df::AgentFilterBank> start;  // bank before the first frame's update
  std::vector<FrozenFrame> frames;
};

/// One optimizer step on a window: rebuild the filter recursion from the
/// frozen start states, everything constant except the covariance net.
double window_step(df::CovarianceNet& net, const df::RefinerConfig& refiner_config,
                   const OpenWindow& window, const HorizonConfig& horizon, double huber_delta,
                   nn::AdamW& adam) {
  const int tau_f = horizon.tau_f;
  const int num_modes = static_cast<int>(window.frames.front().raw_x.size());

  ad::Tape tape;
  const nn::Mlp::Leaves leaves = net.mlp().leaves(tape);
  const ad::Var cumsum = tape.leaf(cumsum_matrix(tau_f));
  const ad::Var ones_col = tape.leaf(Eigen::MatrixXd::Ones(tau_f, 1));
  const ad::Var birth_cov = tape.leaf(refiner_config.sigma0 * refiner_config.sigma0 *
                                      Eigen::MatrixXd::Identity(tau_f, tau_f));

  std::vector<std::array<std::optional<df::FilterStateVar>, 2>> bank(
      static_cast<std::size_t>(num_modes));
  if (window.start) {
    for (int m = 0; m < num_modes; ++m)
      for (int ax = 0; ax < 2; ++ax) {
        const df::FilterState& s =
            window.start->modes[static_cast<std::size_t>(m)].axes[static_cast<std::size_t>(ax)];
        bank[static_cast<std::size_t>(m)][static_cast<std::size_t>(ax)] =
            df::FilterStateVar{tape.leaf(s.mean), tape.leaf(s.cov)};
      }
  }

  std::optional<ad::Var> total;
  int loss_frames = 0;
  for (const FrozenFrame& frame : window.frames) {
    const ad::Var fwf = tape.leaf(frame.feature_with_flag);
    const df::CovarianceNet::RDiagVar rd = net.r_diag(tape, leaves, fwf);
    const std::array<const ad::Var*, 2> r_axes = {&rd.x, &rd.y};

    std::vector<std::array<ad::Var, 2>> refined(static_cast<std::size_t>(num_modes));
    for (int m = 0; m < num_modes; ++m) {
      const std::array<Eigen::VectorXd, 2> raw = {frame.raw_x[static_cast<std::size_t>(m)],
                                                  frame.raw_y[static_cast<std::size_t>(m)]};
      for (int ax = 0; ax < 2; ++ax) {
        const ad::Var z = tape.leaf(raw[static_cast<std::size_t>(ax)]);
        auto& state = bank[static_cast<std::size_t>(m)][static_cast<std::size_t>(ax)];
        if (!state) {
          state = df::FilterStateVar{z, birth_cov};
        } else {
          state = df::predict_step(tape, *state, refiner_config.q);
        }
        state = df::update_step(tape, *state, z, *r_axes[static_cast<std::size_t>(ax)]);
        refined[static_cast<std::size_t>(m)][static_cast<std::size_t>(ax)] = state->mean;
      }
    }

    int valid_count = 0;
    for (bool v : frame.valid)
      if (v) ++valid_count;
    if (valid_count == 0) continue;

    // Winner selection on values, matching wta_loss.
    std::vector<double> distances(static_cast<std::size_t>(num_modes));
    for (int m = 0; m < num_modes; ++m) {
      const Eigen::VectorXd mx = refined[static_cast<std::size_t>(m)][0].value().col(0);
      const Eigen::VectorXd my = refined[static_cast<std::size_t>(m)][1].value().col(0);
      double sum = 0.0;
      Vec2 acc(frame.anchor.x, frame.anchor.y);
      for (int j = 0; j < tau_f; ++j) {
        acc += Vec2(mx[j], my[j]);
        if (!frame.valid[static_cast<std::size_t>(j)]) continue;
        sum += (acc - Vec2(frame.gt_x(j, 0), frame.gt_y(j, 0))).norm();
      }
      distances[static_cast<std::size_t>(m)] = sum / valid_count;
    }
    int best = 0;
    for (int m = 1; m < num_modes; ++m)
      if (distances[static_cast<std::size_t>(m)] < distances[static_cast<std::size_t>(best)])
        best = m;

    const Eigen::MatrixXd w = mask_weights(frame.valid);
    Eigen::MatrixXd ax(1, 1), ay(1, 1);
    ax(0, 0) = frame.anchor.x;
    ay(0, 0) = frame.anchor.y;
    const ad::Var abs_x = ad::add(ad::matmul(cumsum, refined[static_cast<std::size_t>(best)][0]),
                                  ad::matmul(ones_col, tape.leaf(ax)));
    const ad::Var abs_y = ad::add(ad::matmul(cumsum, refined[static_cast<std::size_t>(best)][1]),
                                  ad::matmul(ones_col, tape.leaf(ay)));
    const ad::Var frame_loss = ad::add(ad::huber_loss(abs_x, frame.gt_x, w, huber_delta),
                                       ad::huber_loss(abs_y, frame.gt_y, w, huber_delta));
    total = total ? ad::add(*total, frame_loss) : frame_loss;
    ++loss_frames;
  }

  if (!total) return std::numeric_limits<double>::quiet_NaN();  // caller skips
  const ad::Var loss = ad::scale(*total, 1.0 / loss_frames);
  const double loss_value = loss.value()(0, 0);
  if (!std::isfinite(loss_value))
    throw std::runtime_error("streaming_train: non-finite window loss");
  tape.backward(loss);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(net.arena().size());
  net.mlp().add_param_grads(leaves, grad);
  adam.step(net.arena().values(), grad);
  return loss_value;
}

}  // namespace

TrainResult streaming_train(const forecast::Forecaster& model, df::CovarianceNet& net,
                            const df::RefinerConfig& refiner_config,
                            const std::vector<scenario::Scenario>& scenarios,
                            const StreamingTrainConfig& config) {
  if (config.window < 1) throw std::invalid_argument("streaming_train: window must be >= 1");
  if (config.epochs < 0) throw std::invalid_argument("streaming_train: epochs must be >= 0");
  if (refiner_config.fixed_r)
    throw std::invalid_argument("streaming_train: refiner must use the covariance net");
  if (refiner_config.mode_match != df::ModeMatch::kIndex)
    throw std::invalid_argument("streaming_train: index mode matching required");
  if (config.policy == stream::OcclusionPolicy::kKalmanBaseline)
    throw std::invalid_argument("streaming_train: kalman baseline has no refiner to train");

  const HorizonConfig& horizon = model.horizon();
  nn::AdamW adam(net.arena().size(), config.adam);
  TrainResult result;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_sum = 0.0;
    long epoch_steps = 0;
    for (const scenario::Scenario& scn : scenarios) {
      df::Refiner refiner(refiner_config, &net);
      stream::Streamer streamer(&model, &scn.lane_map, &refiner,
                                stream::Streamer::Options{config.policy, {}});
      std::map<std::string, OpenWindow> open;

      for (FrameIndex t = 0; t < scn.duration; ++t) {
        const ObservationSet obs = scn.observations_at(t);

        // Window starts snapshot the bank before this frame's update.
        if (t >= horizon.tau_h) {
          for (const auto& [id, o] : obs.agents()) {
            if (streamer.state().agents.count(id) == 0 && !o.visible()) continue;
            if (open.count(id)) continue;
            OpenWindow w;
            if (refiner.has_agent(id)) w.start = refiner.bank(id);
            open.emplace(id, std::move(w));
          }
        }
        // Dying agents lose their partial windows.
        for (auto it = open.begin(); it != open.end();) {
          if (obs.find(it->first) == nullptr)
            it = open.erase(it);
          else
            ++it;
        }

        const std::vector<stream::AgentFrameOutput> outputs = streamer.step(obs);
        if (t < horizon.tau_h) continue;

        for (const stream::AgentFrameOutput& out : outputs) {
          auto found = open.find(out.agent_id);
          if (found == open.end()) continue;
          const scenario::AgentTrack* track = scn.find(out.agent_id);
          if (!track) continue;

          FrozenFrame frame;
          frame.feature_with_flag.resize(out.feature.size() + 1);
          frame.feature_with_flag << out.feature, (out.occluded ? 1.0 : 0.0);
          for (const MovementTrajectory& mode : out.raw.modes()) {
            frame.raw_x.push_back(mode.axis(0));
            frame.raw_y.push_back(mode.axis(1));
          }
          frame.anchor = out.anchor;
          frame.gt_x.resize(horizon.tau_f, 1);
          frame.gt_y.resize(horizon.tau_f, 1);
          frame.valid.assign(static_cast<std::size_t>(horizon.tau_f), false);
          for (int j = 1; j <= horizon.tau_f; ++j) {
            const FrameIndex ff = t + j;
            if (!track->covers(ff)) continue;
            const scenario::TrackPoint& point = track->at(ff);
            frame.gt_x(j - 1, 0) = point.position.x;
            frame.gt_y(j - 1, 0) = point.position.y;
            frame.valid[static_cast<std::size_t>(j - 1)] = point.visible;
          }
          found->second.frames.push_back(std::move(frame));

          if (static_cast<int>(found->second.frames.size()) == config.window) {
            const double loss = window_step(net, refiner_config, found->second, horizon,
                                            config.huber_delta, adam);
            open.erase(found);
            if (std::isfinite(loss)) {
              result.step_losses.push_back(loss);
              result.steps += 1;
              epoch_sum += loss;
              epoch_steps += 1;
            }
          }
        }
      }
    }
    result.epoch_losses.push_back(epoch_steps > 0 ? epoch_sum / epoch_steps : 0.0);
  }
  return result;
}

}  // namespace flowcast::train
