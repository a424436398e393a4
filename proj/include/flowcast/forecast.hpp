#ifndef FLOWCAST_FORECAST_HPP
#define FLOWCAST_FORECAST_HPP

#include "flowcast/core.hpp"
#include "flowcast/nn.hpp"
#include "flowcast/tape.hpp"

#include <Eigen/Core>

#include <random>
#include <string>
#include <vector>

namespace flowcast::forecast {

/// Input to one forecast query: the target's last tau_h positions (occluded
/// slots already filled by the caller), every neighbor's filled positions
/// over the same frames, and the lane map. All positions must be finite.
struct HistoryWindow {
  std::string target_id;
  FrameIndex frame = 0;  // query frame; entries cover frame - tau_h + 1 .. frame
  std::vector<Position2> target;
  std::vector<std::vector<Position2>> neighbors;
  const LaneMap* lane_map = nullptr;

  void validate(int tau_h) const;
};

/// Ground truth for one query: positions relative to the query anchor
/// (cumulative movements) for frames t+1 .. t+tau_f, with per-frame validity.
struct GroundTruthSequence {
  std::vector<Vec2> rel;
  std::vector<bool> valid;

  int horizon() const { return static_cast<int>(rel.size()); }
  bool any_valid() const;
  void validate(int tau_f) const;
};

struct WtaResult {
  double loss = 0.0;
  int best_mode = 0;
  double regression = 0.0;
  double confidence = 0.0;
};

/// Winner-takes-all loss: the best mode minimizes the masked mean Euclidean
/// displacement to gt; the loss is a masked-mean Huber penalty on that mode
/// plus conf_weight * -log(confidence of the best mode). An all-invalid gt
/// yields zero loss and best_mode 0.
WtaResult wta_loss(const MultiModalPrediction& prediction, const GroundTruthSequence& gt,
                   double huber_delta = 1.0, double conf_weight = 0.1);

/// Masked mean Euclidean displacement of one mode's cumulative movements
/// against gt; +inf when gt has no valid frame.
double masked_mean_displacement(const MovementTrajectory& mode, const GroundTruthSequence& gt);

class Forecaster {
 public:
  virtual ~Forecaster() = default;

  virtual const HorizonConfig& horizon() const = 0;
  virtual int feature_size() const = 0;
  virtual Eigen::VectorXd encode(const HistoryWindow& window) const = 0;
  virtual MultiModalPrediction decode(const Eigen::VectorXd& feature, const std::string& agent_id,
                                      FrameIndex frame) const = 0;
  /// Dedicated single-trajectory head used by the single-modal occlusion
  /// policy.
  virtual MovementTrajectory decode_single(const Eigen::VectorXd& feature) const = 0;
};

/// Closed-form forecaster: kinematic features and constant-turn-rate
/// rollouts. Parameter-free, deterministic, and exactly analyzable, which
/// makes it the reference model for trend experiments.
class AnalyticForecaster : public Forecaster {
 public:
  struct Options {
    double turn_offset = 0.01;       // rad/frame between perturbed modes
    double confidence_decay = 0.75;  // mode k gets decay^k, normalized
  };

  explicit AnalyticForecaster(HorizonConfig horizon);
  AnalyticForecaster(HorizonConfig horizon, Options options);

  const HorizonConfig& horizon() const override { return horizon_; }
  int feature_size() const override { return 5; }
  /// [mean vx, mean vy, turn rate, mean speed, last heading].
  Eigen::VectorXd encode(const HistoryWindow& window) const override;
  MultiModalPrediction decode(const Eigen::VectorXd& feature, const std::string& agent_id,
                              FrameIndex frame) const override;
  /// Confidence-weighted mean of the K rollouts.
  MovementTrajectory decode_single(const Eigen::VectorXd& feature) const override;

 private:
  HorizonConfig horizon_;
  Options options_;
};

/// Feed-forward forecaster: an encoder over the flattened target history
/// displacements plus lane and neighbor features, one decoder head per mode,
/// a confidence head, and a single-trajectory head.
class LearnedForecaster : public Forecaster {
 public:
  LearnedForecaster(HorizonConfig horizon, int feature_size = 64, int hidden = 64);

  // The networks point into the member arena; relocation would dangle.
  LearnedForecaster(const LearnedForecaster&) = delete;
  LearnedForecaster& operator=(const LearnedForecaster&) = delete;

  void init(std::mt19937_64& rng);

  const HorizonConfig& horizon() const override { return horizon_; }
  int feature_size() const override { return feature_size_; }
  Eigen::VectorXd encode(const HistoryWindow& window) const override;
  MultiModalPrediction decode(const Eigen::VectorXd& feature, const std::string& agent_id,
                              FrameIndex frame) const override;
  MovementTrajectory decode_single(const Eigen::VectorXd& feature) const override;

  /// Encoder input layout: 2(tau_h - 1) target displacements (oldest first,
  /// x then y per step; the last displacement fills the final two slots),
  /// then 3 lane features (nearest tangent, distance), then 4 neighbor
  /// statistics (scaled count, mean relative position, mean speed).
  int encoder_input_size() const;
  Eigen::VectorXd encoder_input(const HistoryWindow& window) const;
  /// Confidence logits before the softmax.
  Eigen::VectorXd confidence_logits(const Eigen::VectorXd& feature) const;

  struct LeafBundle {
    nn::Mlp::Leaves encoder;
    std::vector<nn::Mlp::Leaves> heads;
    nn::Mlp::Leaves confidence;
    nn::Mlp::Leaves single;
  };
  LeafBundle leaves(ad::Tape& tape) const;
  ad::Var encode(ad::Tape& tape, const LeafBundle& leaves, const ad::Var& encoder_in) const;
  /// Per-axis movement vector (tau_f x 1) of one mode head.
  struct AxisPair {
    ad::Var x;
    ad::Var y;
  };
  AxisPair decode_mode(ad::Tape& tape, const LeafBundle& leaves, int mode,
                       const ad::Var& feature) const;
  ad::Var decode_logits(ad::Tape& tape, const LeafBundle& leaves, const ad::Var& feature) const;
  AxisPair decode_single(ad::Tape& tape, const LeafBundle& leaves, const ad::Var& feature) const;
  void add_param_grads(const LeafBundle& leaves, Eigen::VectorXd& grad) const;

  nn::ParamArena& arena() { return arena_; }
  const nn::ParamArena& arena() const { return arena_; }
  int hidden() const { return hidden_; }

 private:
  HorizonConfig horizon_;
  int feature_size_ = 0;
  int hidden_ = 0;
  nn::ParamArena arena_;
  nn::Mlp encoder_;
  std::vector<nn::Mlp> heads_;
  nn::Mlp confidence_;
  nn::Mlp single_;
};

}  // namespace flowcast::forecast

#endif  // FLOWCAST_FORECAST_HPP
