#ifndef FLOWCAST_CONFIG_HPP
#define FLOWCAST_CONFIG_HPP

#include "flowcast/core.hpp"
#include "flowcast/metrics.hpp"
#include "flowcast/scenario.hpp"
#include "flowcast/streamer.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace flowcast::config {

struct ForecasterConfig {
  int feature_size = 64;
  int hidden = 64;

  void validate() const;
};

struct DfilterConfig {
  double q = 0.01;
  double sigma0 = 1.0;
  std::vector<int> hidden = {32};
  double output_bias = 0.3;
  /// Observation variance of the non-learned filter baseline (m^2),
  /// selected with refiner "kf".
  double fixed_r_variance = 0.25;

  void validate() const;
};

struct TrainingConfig {
  double pretrain_lr = 5e-4;
  int pretrain_epochs = 24;
  double finetune_lr = 1e-4;
  int finetune_epochs = 8;
  int finetune_group = 5;
  double stream_lr = 1e-4;
  int stream_epochs = 4;
  int stream_window = 5;
  double weight_decay = 1e-4;
  double huber_delta = 1.0;
  double conf_weight = 0.1;
  double single_weight = 1.0;

  void validate() const;
};

/// Everything an experiment run needs, serialized as one versioned JSON
/// document. Defaults reproduce the reference setup; a config file only
/// lists the keys it overrides. Unknown keys are rejected.
struct ExperimentConfig {
  int version = 1;
  scenario::GeneratorConfig generator;
  HorizonConfig horizon;
  metrics::MetricsConfig metrics;
  DfilterConfig dfilter;
  stream::KalmanBaselineConfig kalman;
  ForecasterConfig forecaster;
  TrainingConfig training;

  void validate() const;
};

/// Canonical serialization: sorted keys, stable number formatting. Equal
/// configs produce equal bytes; the hash is FNV-1a 64 over these bytes.
std::string canonical_dump(const ExperimentConfig& config);
std::uint64_t fnv1a64(std::string_view bytes);
std::string config_hash(const ExperimentConfig& config);  // 16 hex digits

/// Defaults overridden by the JSON text / file. Errors carry the offending
/// key path.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);
void write_config_file(const ExperimentConfig& config, const std::string& path);

}  // namespace flowcast::config

#endif  // FLOWCAST_CONFIG_HPP
