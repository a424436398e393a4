#include "flowcast/dfilter.hpp"

#include <cmath>
#include <stdexcept>

namespace flowcast::df {

void FilterState::validate(double sym_tol) const {
  const Eigen::Index n = mean.size();
  if (n < 1) throw std::invalid_argument("filter state: empty mean");
  if (cov.rows() != n || cov.cols() != n)
    throw std::invalid_argument("filter state: covariance shape mismatch");
  if (!mean.allFinite() || !cov.allFinite())
    throw std::invalid_argument("filter state: non-finite entries");
  const double asym = (cov - cov.transpose()).cwiseAbs().maxCoeff();
  if (asym >= sym_tol) throw std::invalid_argument("filter state: covariance not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-9)
    throw std::invalid_argument("filter state: covariance not PSD");
}

Eigen::MatrixXd transition_matrix(int n) {
  if (n < 1) throw std::invalid_argument("transition matrix: size must be >= 1");
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i + 1 < n; ++i) a(i, i + 1) = 1.0;
  a(n - 1, n - 1) = 1.0;
  return a;
}

Eigen::VectorXd shift_mean(const Eigen::VectorXd& mean) {
  const Eigen::Index n = mean.size();
  Eigen::VectorXd out(n);
  if (n == 1) {
    out[0] = mean[0];
    return out;
  }
  out.head(n - 1) = mean.tail(n - 1);
  out[n - 1] = mean[n - 1];
  return out;
}

Eigen::MatrixXd shift_cov(const Eigen::MatrixXd& cov) {
  const Eigen::Index n = cov.rows();
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index si = std::min(i + 1, n - 1);
    for (Eigen::Index j = 0; j < n; ++j) out(i, j) = cov(si, std::min(j + 1, n - 1));
  }
  return out;
}

FilterState predict_step(const FilterState& state, double q) {
  if (q < 0.0) throw std::invalid_argument("predict: process noise must be >= 0");
  FilterState out;
  out.mean = shift_mean(state.mean);
  out.cov = shift_cov(state.cov);
  out.cov.diagonal().array() += q;
  return out;
}

FilterState update_step(const FilterState& state, const Eigen::VectorXd& z,
                        const Eigen::VectorXd& r_diag) {
  const Eigen::Index n = state.mean.size();
  if (z.size() != n) throw std::invalid_argument("update: observation length mismatch");
  if (r_diag.size() != n) throw std::invalid_argument("update: noise diagonal length mismatch");
  if (r_diag.minCoeff() < 0.0) throw std::invalid_argument("update: negative observation noise");

  Eigen::MatrixXd s = state.cov;
  s.diagonal() += r_diag;
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error(
        "update: singular innovation covariance (prior and observation noise both vanish)");

  // K = cov * S^-1; with S symmetric this is solve(S, cov)^T.
  const Eigen::MatrixXd k = llt.solve(state.cov).transpose();

  FilterState out;
  out.mean = state.mean + k * (z - state.mean);
  const Eigen::MatrixXd ik = Eigen::MatrixXd::Identity(n, n) - k;
  Eigen::MatrixXd cov = ik * state.cov * ik.transpose() + k * r_diag.asDiagonal() * k.transpose();
  out.cov = 0.5 * (cov + cov.transpose());
  return out;
}

FilterStateVar predict_step(ad::Tape& tape, const FilterStateVar& state, double q) {
  if (q < 0.0) throw std::invalid_argument("predict (tape): process noise must be >= 0");
  const Eigen::Index n = state.mean.value().rows();
  const ad::Var a = tape.leaf(transition_matrix(static_cast<int>(n)));
  const ad::Var qi = tape.leaf(q * Eigen::MatrixXd::Identity(n, n));
  FilterStateVar out;
  out.mean = ad::matmul(a, state.mean);
  out.cov = ad::add(ad::matmul(ad::matmul(a, state.cov), ad::transpose(a)), qi);
  return out;
}

FilterStateVar update_step(ad::Tape& tape, const FilterStateVar& state, const ad::Var& z,
                           const ad::Var& r_diag) {
  const Eigen::Index n = state.mean.value().rows();
  if (z.value().rows() != n || z.value().cols() != 1)
    throw std::invalid_argument("update (tape): observation must be an n x 1 column");
  if (r_diag.value().rows() != n || r_diag.value().cols() != 1)
    throw std::invalid_argument("update (tape): noise diagonal must be an n x 1 column");

  const ad::Var s = ad::add_diag(state.cov, r_diag);
  const ad::Var k = ad::matmul(state.cov, ad::inverse(s));
  FilterStateVar out;
  out.mean = ad::add(state.mean, ad::matmul(k, ad::sub(z, state.mean)));
  const ad::Var identity = tape.leaf(Eigen::MatrixXd::Identity(n, n));
  const ad::Var ik = ad::sub(identity, k);
  const ad::Var zero = tape.leaf(Eigen::MatrixXd::Zero(n, n));
  const ad::Var r_mat = ad::add_diag(zero, r_diag);
  out.cov = ad::add(ad::matmul(ad::matmul(ik, state.cov), ad::transpose(ik)),
                    ad::matmul(ad::matmul(k, r_mat), ad::transpose(k)));
  return out;
}

CovarianceNet::CovarianceNet(int feature_size, std::vector<int> hidden, int tau_f)
    : feature_size_(feature_size), tau_f_(tau_f), hidden_(std::move(hidden)) {
  if (feature_size_ < 1) throw std::invalid_argument("covariance net: feature size must be >= 1");
  if (tau_f_ < 1) throw std::invalid_argument("covariance net: horizon must be >= 1");
  std::vector<int> sizes;
  sizes.push_back(feature_size_ + 1);  // appended occlusion flag
  for (int h : hidden_) sizes.push_back(h);
  sizes.push_back(2 * tau_f_);
  mlp_ = nn::Mlp(nn::MlpSpec{sizes}, &arena_);
}

void CovarianceNet::init(std::mt19937_64& rng, double output_bias) {
  mlp_.init(rng);
  // Output-layer bias is the last block of the parameter slab.
  const int out = mlp_.output_size();
  arena_.values().segment(mlp_.offset() + mlp_.spec().param_count() - out, out)
      .setConstant(output_bias);
}

CovarianceNet::RDiag CovarianceNet::r_diag(const Eigen::VectorXd& feature, bool occluded) const {
  if (feature.size() != feature_size_)
    throw std::invalid_argument("covariance net: feature length mismatch");
  Eigen::VectorXd in(feature_size_ + 1);
  in.head(feature_size_) = feature;
  in[feature_size_] = occluded ? 1.0 : 0.0;
  const Eigen::VectorXd out = mlp_.forward(in);
  RDiag r;
  r.x = out.head(tau_f_).array().square();
  r.y = out.tail(tau_f_).array().square();
  return r;
}

CovarianceNet::RDiagVar CovarianceNet::r_diag(ad::Tape& tape, const nn::Mlp::Leaves& leaves,
                                              const ad::Var& feature_with_flag) const {
  if (feature_with_flag.value().rows() != feature_size_ + 1 ||
      feature_with_flag.value().cols() != 1)
    throw std::invalid_argument("covariance net (tape): input must include the occlusion flag");
  const ad::Var out = mlp_.forward(tape, leaves, feature_with_flag);
  RDiagVar r;
  r.x = ad::cwise_square(ad::block(out, 0, 0, tau_f_, 1));
  r.y = ad::cwise_square(ad::block(out, tau_f_, 0, tau_f_, 1));
  return r;
}

void RefinerConfig::validate() const {
  if (!(q >= 0.0)) throw std::invalid_argument("refiner: process noise must be >= 0");
  if (!(sigma0 > 0.0)) throw std::invalid_argument("refiner: initial std must be > 0");
  if (fixed_r && !(*fixed_r >= 0.0))
    throw std::invalid_argument("refiner: fixed observation variance must be >= 0");
}

Refiner::Refiner(RefinerConfig config, const CovarianceNet* net) : config_(config), net_(net) {
  config_.validate();
  if (config_.fixed_r.has_value() == (net_ != nullptr))
    throw std::invalid_argument("refiner: provide either a covariance net or a fixed variance");
}

std::vector<int> match_modes(const AgentFilterBank& bank, const MultiModalPrediction& raw,
                             ModeMatch mode) {
  const int k = raw.num_modes();
  if (static_cast<int>(bank.modes.size()) != k)
    throw std::invalid_argument("mode matching: bank size differs from mode count");
  std::vector<int> perm(k);
  if (mode == ModeMatch::kIndex) {
    for (int m = 0; m < k; ++m) perm[m] = m;
    return perm;
  }
  // Greedy: repeatedly take the globally closest (previous mode, raw mode)
  // pair; ties resolve to the smallest indices.
  Eigen::MatrixXd cost(k, k);
  for (int p = 0; p < k; ++p) {
    const Eigen::VectorXd px = shift_mean(bank.modes[p].axes[0].mean);
    const Eigen::VectorXd py = shift_mean(bank.modes[p].axes[1].mean);
    for (int m = 0; m < k; ++m) {
      const MovementTrajectory& t = raw.modes()[m];
      cost(p, m) = (px - t.axis(0)).squaredNorm() + (py - t.axis(1)).squaredNorm();
    }
  }
  std::vector<bool> prev_used(k, false), raw_used(k, false);
  for (int step = 0; step < k; ++step) {
    int bp = -1, bm = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int p = 0; p < k; ++p) {
      if (prev_used[p]) continue;
      for (int m = 0; m < k; ++m) {
        if (raw_used[m]) continue;
        if (cost(p, m) < best) {
          best = cost(p, m);
          bp = p;
          bm = m;
        }
      }
    }
    prev_used[bp] = true;
    raw_used[bm] = true;
    perm[bm] = bp;
  }
  return perm;
}

MultiModalPrediction Refiner::refine(const MultiModalPrediction& raw,
                                     const Eigen::VectorXd& feature, bool occluded,
                                     RefineStats* stats) {
  const int k = raw.num_modes();
  const int n = raw.horizon();

  Eigen::VectorXd rx, ry;
  if (config_.fixed_r) {
    rx = Eigen::VectorXd::Constant(n, *config_.fixed_r);
    ry = rx;
  } else {
    if (net_->tau_f() != n)
      throw std::invalid_argument("refiner: covariance net horizon differs from prediction");
    const CovarianceNet::RDiag r = net_->r_diag(feature, occluded);
    rx = r.x;
    ry = r.y;
  }

  auto it = banks_.find(raw.agent_id());
  const bool birth = it == banks_.end();
  if (birth) {
    AgentFilterBank bank;
    bank.modes.resize(k);
    for (int m = 0; m < k; ++m)
      for (int axis = 0; axis < 2; ++axis) {
        bank.modes[m].axes[axis].mean = raw.modes()[m].axis(axis);
        bank.modes[m].axes[axis].cov =
            config_.sigma0 * config_.sigma0 * Eigen::MatrixXd::Identity(n, n);
      }
    it = banks_.emplace(raw.agent_id(), std::move(bank)).first;
  }
  AgentFilterBank& bank = it->second;
  if (static_cast<int>(bank.modes.size()) != k)
    throw std::invalid_argument("refiner: mode count changed for agent " + raw.agent_id());

  std::vector<int> perm(k);
  if (birth) {
    for (int m = 0; m < k; ++m) perm[m] = m;
  } else {
    perm = match_modes(bank, raw, config_.mode_match);
  }

  AgentFilterBank next;
  next.modes.resize(k);
  std::vector<MovementTrajectory> refined(k);
  for (int m = 0; m < k; ++m) {
    std::array<Eigen::VectorXd, 2> means;
    for (int axis = 0; axis < 2; ++axis) {
      FilterState prior = bank.modes[perm[m]].axes[axis];
      if (!birth) prior = predict_step(prior, config_.q);
      const Eigen::VectorXd& r = axis == 0 ? rx : ry;
      FilterState post = update_step(prior, raw.modes()[m].axis(axis), r);
      if (stats) {
        stats->max_diag_increase = std::max(
            stats->max_diag_increase,
            (post.cov.diagonal() - prior.cov.diagonal()).maxCoeff());
        ++stats->updates;
      }
      means[axis] = post.mean;
      next.modes[m].axes[axis] = std::move(post);
    }
    refined[m] = MovementTrajectory::from_axes(means[0], means[1]);
  }
  bank = std::move(next);

  return MultiModalPrediction(raw.agent_id(), raw.query_frame(), std::move(refined),
                              raw.confidences());
}

void Refiner::drop_agent(const std::string& agent_id) { banks_.erase(agent_id); }

void Refiner::reset() { banks_.clear(); }

bool Refiner::has_agent(const std::string& agent_id) const { return banks_.count(agent_id) > 0; }

const AgentFilterBank& Refiner::bank(const std::string& agent_id) const {
  auto it = banks_.find(agent_id);
  if (it == banks_.end())
    throw std::invalid_argument("refiner: no filter state for agent " + agent_id);
  return it->second;
}

}  // namespace flowcast::df
