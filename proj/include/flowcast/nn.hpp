#ifndef FLOWCAST_NN_HPP
#define FLOWCAST_NN_HPP

#include "flowcast/tape.hpp"

#include <Eigen/Core>

#include <random>
#include <vector>

namespace flowcast::nn {

/// Flat parameter storage shared by every layer of a model. Keeping all
/// parameters in one vector makes optimization, finite-difference probing,
/// and checkpoint serialization trivial.
class ParamArena {
 public:
  /// Extends storage by n zeros and returns the offset of the new block.
  int allocate(int n);

  int size() const { return static_cast<int>(values_.size()); }
  Eigen::VectorXd& values() { return values_; }
  const Eigen::VectorXd& values() const { return values_; }

 private:
  Eigen::VectorXd values_ = Eigen::VectorXd::Zero(0);
};

struct MlpSpec {
  /// [input, hidden..., output]; tanh after every hidden layer, linear output.
  std::vector<int> layer_sizes;

  int param_count() const;
  void validate() const;
};

/// Multilayer perceptron whose parameters live in a ParamArena. Layout per
/// layer: weight matrix (rows = out, cols = in) in column-major order, then
/// the bias vector.
class Mlp {
 public:
  Mlp() = default;
  Mlp(MlpSpec spec, ParamArena* arena);

  int input_size() const { return spec_.layer_sizes.front(); }
  int output_size() const { return spec_.layer_sizes.back(); }
  int offset() const { return offset_; }
  const MlpSpec& spec() const { return spec_; }

  /// Xavier-uniform weights, zero biases.
  void init(std::mt19937_64& rng);

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;

  /// Tape path. Leaves materialize the current parameters on a tape once;
  /// forward() can then be applied to any number of inputs, and
  /// add_param_grads() maps accumulated leaf adjoints back into a gradient
  /// vector over the whole arena.
  struct Leaves {
    std::vector<ad::Var> weights;
    std::vector<ad::Var> biases;
  };
  Leaves leaves(ad::Tape& tape) const;
  ad::Var forward(ad::Tape& tape, const Leaves& leaves, const ad::Var& x) const;
  void add_param_grads(const Leaves& leaves, Eigen::VectorXd& grad) const;

 private:
  MlpSpec spec_;
  ParamArena* arena_ = nullptr;
  int offset_ = 0;
};

/// Adam with decoupled weight decay.
class AdamW {
 public:
  struct Config {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
  };

  AdamW(int param_count, Config config);

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
  long steps_taken() const { return t_; }

 private:
  Config cfg_;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
  long t_ = 0;
};

}  // namespace flowcast::nn

#endif  // FLOWCAST_NN_HPP
