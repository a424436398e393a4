#ifndef FLOWCAST_CHECKPOINT_HPP
#define FLOWCAST_CHECKPOINT_HPP

#include "flowcast/core.hpp"
#include "flowcast/dfilter.hpp"
#include "flowcast/forecast.hpp"

#include <Eigen/Core>

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace flowcast::ckpt {

/// Training stages in pipeline order. Each stage requires a checkpoint of
/// the previous one as its input.
enum class Stage { kPretrained, kFinetuned, kStreamed };

const char* to_string(Stage stage);
Stage stage_from_string(const std::string& name);

/// A trained parameter snapshot. The covariance-net block exists from the
/// streaming stage on; earlier checkpoints hold only the forecaster.
struct Checkpoint {
  Stage stage = Stage::kPretrained;
  HorizonConfig horizon;
  int feature_size = 64;
  int hidden = 64;
  Eigen::VectorXd forecaster_params;
  std::vector<int> cov_hidden;  // hidden layer widths of the covariance net
  Eigen::VectorXd cov_params;   // empty when no covariance net is stored

  bool has_covariance_net() const { return cov_params.size() > 0; }
  void validate() const;
};

/// Container: magic "FCCK", little-endian u32 format version, u32 header
/// length, a JSON header (stage, horizon, sizes), then the parameter blocks
/// as raw little-endian doubles (forecaster first, covariance net after).
/// The byte stream round-trips losslessly.
void write_checkpoint(const Checkpoint& checkpoint, std::ostream& out);
void write_checkpoint_file(const Checkpoint& checkpoint, const std::string& path);
Checkpoint read_checkpoint(std::istream& in);
Checkpoint read_checkpoint_file(const std::string& path);

/// Shells with the stored architecture and parameters loaded. Returned by
/// pointer because both types pin their parameter arenas in place.
std::unique_ptr<forecast::LearnedForecaster> make_forecaster(const Checkpoint& checkpoint);
std::unique_ptr<df::CovarianceNet> make_covariance_net(const Checkpoint& checkpoint);

/// Snapshot current parameters back into checkpoint form.
Checkpoint snapshot(const forecast::LearnedForecaster& model, Stage stage);
Checkpoint snapshot(const forecast::LearnedForecaster& model, const df::CovarianceNet& net,
                    Stage stage);

}  // namespace flowcast::ckpt

#endif  // FLOWCAST_CHECKPOINT_HPP
