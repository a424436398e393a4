#ifndef FLOWCAST_TRAINING_HPP
#define FLOWCAST_TRAINING_HPP

#include "flowcast/core.hpp"
#include "flowcast/dfilter.hpp"
#include "flowcast/forecast.hpp"
#include "flowcast/nn.hpp"
#include "flowcast/scenario.hpp"
#include "flowcast/streamer.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <limits>
#include <vector>

namespace flowcast::train {

// ---------------------------------------------------------------------------
// Snapshot stages: supervised forecasting on isolated windows.
// ---------------------------------------------------------------------------

struct Sample {
  forecast::HistoryWindow window;
  forecast::GroundTruthSequence gt;
};

/// One optimizer step consumes one group.
struct SampleGroup {
  std::vector<Sample> samples;
};

struct DatasetConfig {
  int group_size = 1;    // 5 adjacent frames of one agent for the finetune stage
  int frame_stride = 1;  // keep every n-th eligible query frame

  void validate() const;
};

/// Inference-style filled history for frames t - tau_h + 1 .. t: occluded
/// slots hold the most recent visible position, pre-birth slots repeat the
/// earliest one.
std::vector<Position2> filled_history(const scenario::AgentTrack& track, FrameIndex t, int tau_h);

/// Anchor-relative ground truth for a query at t; validity requires the
/// agent alive and visible at the future frame.
forecast::GroundTruthSequence ground_truth_rel(const scenario::AgentTrack& track, FrameIndex t,
                                               int tau_f);

/// Snapshot samples over every non-ego agent visible at the query frame,
/// skipping queries with no ground truth at all. Groups of size n take n
/// adjacent eligible frames of one agent; partial runs are dropped. Windows
/// keep pointers into `scenarios`, which must outlive the dataset.
std::vector<SampleGroup> build_snapshot_dataset(const std::vector<scenario::Scenario>& scenarios,
                                                const HorizonConfig& horizon,
                                                const DatasetConfig& config);

struct TrainConfig {
  nn::AdamW::Config adam;
  int epochs = 0;
  double huber_delta = 1.0;
  double conf_weight = 0.1;
  /// The dedicated single-trajectory head learns jointly from the same
  /// masked smooth-L1 target.
  double single_weight = 1.0;
  std::uint64_t seed = 1;
};

TrainConfig pretrain_config();
TrainConfig finetune_config();

struct TrainResult {
  std::vector<double> epoch_losses;  // mean step loss per epoch
  std::vector<double> step_losses;   // loss of every optimizer step, in order
  long steps = 0;
};

/// Winner-takes-all training of the learned forecaster. Throws on an empty
/// dataset or a non-finite loss.
TrainResult train_snapshot(forecast::LearnedForecaster& model,
                           const std::vector<SampleGroup>& groups, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Differentiable unroll: a miniature stream whose loss graph spans the
// forecaster, the covariance net, the filter recursion, and the occlusion
// feedback of hallucinated positions into later windows. This is the surface
// the finite-difference cross-checks probe.
// ---------------------------------------------------------------------------

struct UnrollSpec {
  stream::OcclusionPolicy policy = stream::OcclusionPolicy::kMultiModal;
  double q = 0.01;
  double sigma0 = 1.0;
  double huber_delta = 1.0;
  std::vector<Position2> history;  // filled window at unroll frame 0, length tau_h
  /// Per unrolled frame. occluded[0] must be false; observed[f] is consumed
  /// only on visible frames f >= 1.
  std::vector<bool> occluded;
  std::vector<Position2> observed;
  std::vector<std::vector<Position2>> gt_abs;  // frames() x tau_f absolute targets
  std::vector<std::vector<bool>> gt_valid;

  int frames() const { return static_cast<int>(occluded.size()); }
  void validate(const forecast::LearnedForecaster& model, const df::CovarianceNet& net) const;
};

/// Margins that make a finite-difference probe of the unrolled loss valid:
/// all selection rules (confidence argmax, winner-takes-all) and the Huber
/// kink must sit far from a decision boundary relative to the step size.
struct UnrollDiagnostics {
  double min_confidence_gap = std::numeric_limits<double>::infinity();
  double min_wta_gap = std::numeric_limits<double>::infinity();
  double min_kink_margin = std::numeric_limits<double>::infinity();
};

double unrolled_loss(const forecast::LearnedForecaster& model, const df::CovarianceNet& net,
                     const UnrollSpec& spec, UnrollDiagnostics* diagnostics = nullptr);

struct UnrollGrads {
  double loss = 0.0;
  Eigen::VectorXd model_grad;
  Eigen::VectorXd net_grad;
  UnrollDiagnostics diagnostics;
};

UnrollGrads unrolled_loss_grads(const forecast::LearnedForecaster& model,
                                const df::CovarianceNet& net, const UnrollSpec& spec);

// ---------------------------------------------------------------------------
// Streaming stage: the forecaster frozen, gradients into the covariance net
// only, truncated at window starts.
// ---------------------------------------------------------------------------

struct StreamingTrainConfig {
  int window = 5;
  int epochs = 4;
  nn::AdamW::Config adam;  // lr overridden to 1e-4 by streaming_config()
  double huber_delta = 1.0;
  stream::OcclusionPolicy policy = stream::OcclusionPolicy::kMultiModal;
};

StreamingTrainConfig streaming_config();

/// Re-streams the scenarios each epoch with the current covariance net,
/// slices each agent's frames from tau_h onward into fixed windows, and
/// takes one step per window on the masked smooth-L1 loss of the refined
/// winner mode. Requires index mode matching. Throws on non-finite loss.
TrainResult streaming_train(const forecast::Forecaster& model, df::CovarianceNet& net,
                            const df::RefinerConfig& refiner_config,
                            const std::vector<scenario::Scenario>& scenarios,
                            const StreamingTrainConfig& config);

}  // namespace flowcast::train

#endif  // FLOWCAST_TRAINING_HPP
