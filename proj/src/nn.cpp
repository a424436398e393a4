#include "flowcast/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace flowcast::nn {

int ParamArena::allocate(int n) {
  if (n <= 0) throw std::invalid_argument("param arena: allocation must be positive");
  const int offset = size();
  values_.conservativeResize(offset + n);
  values_.tail(n).setZero();
  return offset;
}

int MlpSpec::param_count() const {
  int n = 0;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l)
    n += layer_sizes[l + 1] * layer_sizes[l] + layer_sizes[l + 1];
  return n;
}

void MlpSpec::validate() const {
  if (layer_sizes.size() < 2) throw std::invalid_argument("mlp spec: need input and output sizes");
  for (int s : layer_sizes)
    if (s < 1) throw std::invalid_argument("mlp spec: layer sizes must be >= 1");
}

Mlp::Mlp(MlpSpec spec, ParamArena* arena) : spec_(std::move(spec)), arena_(arena) {
  spec_.validate();
  if (!arena_) throw std::invalid_argument("mlp: null arena");
  offset_ = arena_->allocate(spec_.param_count());
}

void Mlp::init(std::mt19937_64& rng) {
  double* p = arena_->values().data() + offset_;
  for (std::size_t l = 0; l + 1 < spec_.layer_sizes.size(); ++l) {
    const int in = spec_.layer_sizes[l];
    const int out = spec_.layer_sizes[l + 1];
    const double bound = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (int i = 0; i < out * in; ++i) *p++ = dist(rng);
    for (int i = 0; i < out; ++i) *p++ = 0.0;
  }
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x) const {
  if (x.size() != input_size())
    throw std::invalid_argument("mlp forward: input size " + std::to_string(x.size()) +
                                ", expected " + std::to_string(input_size()));
  const double* p = arena_->values().data() + offset_;
  Eigen::VectorXd h = x;
  for (std::size_t l = 0; l + 1 < spec_.layer_sizes.size(); ++l) {
    const int in = spec_.layer_sizes[l];
    const int out = spec_.layer_sizes[l + 1];
    Eigen::Map<const Eigen::MatrixXd> w(p, out, in);
    p += out * in;
    Eigen::Map<const Eigen::VectorXd> b(p, out);
    p += out;
    h = w * h + b;
    if (l + 2 < spec_.layer_sizes.size()) h = h.array().tanh().matrix();
  }
  return h;
}

Mlp::Leaves Mlp::leaves(ad::Tape& tape) const {
  Leaves lv;
  const double* p = arena_->values().data() + offset_;
  for (std::size_t l = 0; l + 1 < spec_.layer_sizes.size(); ++l) {
    const int in = spec_.layer_sizes[l];
    const int out = spec_.layer_sizes[l + 1];
    lv.weights.push_back(tape.leaf(Eigen::Map<const Eigen::MatrixXd>(p, out, in)));
    p += out * in;
    lv.biases.push_back(tape.leaf(Eigen::Map<const Eigen::VectorXd>(p, out)));
    p += out;
  }
  return lv;
}

ad::Var Mlp::forward(ad::Tape& tape, const Leaves& leaves, const ad::Var& x) const {
  if (x.value().cols() != 1 || x.value().rows() != input_size())
    throw std::invalid_argument("mlp forward (tape): input must be a column of size " +
                                std::to_string(input_size()));
  ad::Var h = x;
  for (std::size_t l = 0; l < leaves.weights.size(); ++l) {
    h = ad::add(ad::matmul(leaves.weights[l], h), leaves.biases[l]);
    if (l + 1 < leaves.weights.size()) h = ad::tanh(h);
  }
  (void)tape;
  return h;
}

void Mlp::add_param_grads(const Leaves& leaves, Eigen::VectorXd& grad) const {
  if (grad.size() != arena_->size())
    throw std::invalid_argument("mlp grads: gradient vector must span the arena");
  double* p = grad.data() + offset_;
  for (std::size_t l = 0; l < leaves.weights.size(); ++l) {
    const Eigen::MatrixXd gw = leaves.weights[l].grad();
    const Eigen::MatrixXd gb = leaves.biases[l].grad();
    Eigen::Map<Eigen::MatrixXd>(p, gw.rows(), gw.cols()) += gw;
    p += gw.size();
    Eigen::Map<Eigen::VectorXd>(p, gb.rows()) += gb.col(0);
    p += gb.rows();
  }
}

AdamW::AdamW(int param_count, Config config) : cfg_(config) {
  if (param_count < 1) throw std::invalid_argument("adamw: empty parameter vector");
  m_ = Eigen::VectorXd::Zero(param_count);
  v_ = Eigen::VectorXd::Zero(param_count);
}

void AdamW::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    throw std::invalid_argument("adamw: size mismatch");
  ++t_;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
  v_ = cfg_.beta2 * v_.array().matrix() + (1.0 - cfg_.beta2) * grad.array().square().matrix();
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const Eigen::ArrayXd mhat = m_.array() / bc1;
  const Eigen::ArrayXd vhat = v_.array() / bc2;
  params.array() -= cfg_.lr * (mhat / (vhat.sqrt() + cfg_.eps) + cfg_.weight_decay * params.array());
}

}  // namespace flowcast::nn
