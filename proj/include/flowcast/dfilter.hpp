#ifndef FLOWCAST_DFILTER_HPP
#define FLOWCAST_DFILTER_HPP

#include "flowcast/core.hpp"
#include "flowcast/nn.hpp"
#include "flowcast/tape.hpp"

#include <Eigen/Dense>

#include <array>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace flowcast::df {

/// Gaussian belief over one axis of a movement trajectory: mean is a
/// length-n vector of per-frame displacements, cov an n x n PSD matrix.
struct FilterState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  void validate(double sym_tol = 1e-9) const;
};

/// Transition that aligns a belief produced at frame t-1 with frame t:
/// entries shift forward one slot and the final displacement is repeated
/// for the newly exposed horizon frame. Exactly one 1 per row.
Eigen::MatrixXd transition_matrix(int n);

/// A * mean without materializing A.
Eigen::VectorXd shift_mean(const Eigen::VectorXd& mean);
/// A * cov * A^T without materializing A.
Eigen::MatrixXd shift_cov(const Eigen::MatrixXd& cov);

/// mean <- A mean;  cov <- A cov A^T + q I.
FilterState predict_step(const FilterState& state, double q);

/// Measurement update with identity observation matrix and diagonal noise
/// r_diag:
///   K   = cov (cov + R)^-1
///   mean <- mean + K (z - mean)
///   cov  <- (I-K) cov (I-K)^T + K R K^T   (Joseph form)
/// Throws if the innovation covariance is singular.
FilterState update_step(const FilterState& state, const Eigen::VectorXd& z,
                        const Eigen::VectorXd& r_diag);

/// Tape-recorded twins of the two steps, used when gradients must flow
/// through the recursion. Values match the plain versions to rounding.
struct FilterStateVar {
  ad::Var mean;
  ad::Var cov;
};

FilterStateVar predict_step(ad::Tape& tape, const FilterStateVar& state, double q);
FilterStateVar update_step(ad::Tape& tape, const FilterStateVar& state, const ad::Var& z,
                           const ad::Var& r_diag);

/// Network producing the diagonal observation covariance: a feature vector
/// plus an appended occlusion flag maps to one pre-square value per horizon
/// frame per axis (x block first, then y). Entries are squared before use,
/// so the covariance is non-negative by construction.
class CovarianceNet {
 public:
  CovarianceNet() = default;
  CovarianceNet(int feature_size, std::vector<int> hidden, int tau_f);

  // The network points into the member arena; relocation would dangle.
  CovarianceNet(const CovarianceNet&) = delete;
  CovarianceNet& operator=(const CovarianceNet&) = delete;

  /// Xavier weights; the output-layer bias starts at output_bias so the
  /// initial observation noise is output_bias^2 everywhere.
  void init(std::mt19937_64& rng, double output_bias = 0.3);

  struct RDiag {
    Eigen::VectorXd x;
    Eigen::VectorXd y;
  };
  RDiag r_diag(const Eigen::VectorXd& feature, bool occluded) const;

  struct RDiagVar {
    ad::Var x;
    ad::Var y;
  };
  /// feature_with_flag must already carry the occlusion flag as its last row.
  RDiagVar r_diag(ad::Tape& tape, const nn::Mlp::Leaves& leaves,
                  const ad::Var& feature_with_flag) const;

  int feature_size() const { return feature_size_; }
  int tau_f() const { return tau_f_; }
  const std::vector<int>& hidden() const { return hidden_; }
  const nn::Mlp& mlp() const { return mlp_; }
  nn::ParamArena& arena() { return arena_; }
  const nn::ParamArena& arena() const { return arena_; }

 private:
  int feature_size_ = 0;
  int tau_f_ = 0;
  std::vector<int> hidden_;
  nn::ParamArena arena_;
  nn::Mlp mlp_;
};

enum class ModeMatch { kIndex, kGreedy };

struct RefinerConfig {
  double q = 0.01;      // process noise per horizon entry, m^2
  double sigma0 = 1.0;  // std of the birth covariance, m
  ModeMatch mode_match = ModeMatch::kIndex;
  /// When set, observation noise is this fixed variance (m^2) on every
  /// entry and no network is consulted.
  std::optional<double> fixed_r;

  void validate() const;
};

/// Per-agent filter bank: one state per mode per axis ([0] = x, [1] = y).
struct ModeFilters {
  std::array<FilterState, 2> axes;
};
struct AgentFilterBank {
  std::vector<ModeFilters> modes;
};

struct RefineStats {
  /// Largest observed diag(cov_post) - diag(cov_predicted) over all updates;
  /// stays <= ~1e-12 because an update never adds uncertainty.
  double max_diag_increase = -std::numeric_limits<double>::infinity();
  long updates = 0;
};

/// Recursive per-mode trajectory fusion. Owns the filter states of every
/// agent it has seen; feed it each agent's raw prediction once per frame.
class Refiner {
 public:
  Refiner(RefinerConfig config, const CovarianceNet* net);

  /// Fuses a raw prediction with the agent's filter bank and returns the
  /// posterior means as a prediction with unchanged confidences. The first
  /// call for an agent initializes the bank (mean = raw, cov = sigma0^2 I)
  /// and returns the raw trajectories exactly.
  MultiModalPrediction refine(const MultiModalPrediction& raw, const Eigen::VectorXd& feature,
                              bool occluded, RefineStats* stats = nullptr);

  void drop_agent(const std::string& agent_id);
  void reset();
  bool has_agent(const std::string& agent_id) const;
  const AgentFilterBank& bank(const std::string& agent_id) const;

  const RefinerConfig& config() const { return config_; }
  const CovarianceNet* net() const { return net_; }

 private:
  RefinerConfig config_;
  const CovarianceNet* net_ = nullptr;
  std::map<std::string, AgentFilterBank> banks_;
};

/// Assignment of previous-frame modes to current raw modes: perm[m] is the
/// previous mode whose (shifted) belief refines raw mode m. Greedy matching
/// minimizes the distance between shifted means and raw trajectories;
/// index matching is the identity.
std::vector<int> match_modes(const AgentFilterBank& bank, const MultiModalPrediction& raw,
                             ModeMatch mode);

}  // namespace flowcast::df

#endif  // FLOWCAST_DFILTER_HPP
