#ifndef FLOWCAST_TAPE_HPP
#define FLOWCAST_TAPE_HPP

#include <Eigen/Dense>

#include <functional>
#include <vector>

namespace flowcast::ad {

using Mat = Eigen::MatrixXd;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid until the tape is
/// cleared or destroyed.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

  const Mat& value() const;
  /// Accumulated adjoint after backward(); zeros if the node was never
  /// reached.
  Mat grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Record of matrix-valued operations supporting one reverse sweep.
/// Values are computed eagerly; backward() walks nodes in reverse creation
/// order and accumulates adjoints into every leaf.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// New leaf holding a copy of value.
  Var leaf(Mat value);

  /// Reverse sweep from a 1x1 scalar node.
  void backward(const Var& root);

  /// Drops all nodes; outstanding Vars become invalid.
  void clear();

  std::size_t size() const { return nodes_.size(); }

  // Internal node storage, used by the free-function ops below.
  struct Node {
    Mat value;
    Mat grad;
    bool has_grad = false;
    std::function<void(Tape&, const Mat&)> pull;
  };
  Var emplace(Mat value, std::function<void(Tape&, const Mat&)> pull);
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  void accumulate(int id, const Mat& delta);

 private:
  std::vector<Node> nodes_;
};

// Elementwise and linear-algebra ops. Shape mismatches throw.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
/// Matrix inverse; adjoint of Y = X^-1 is  Xbar -= Y^T G Y^T.
Var inverse(const Var& a);
Var cwise_mul(const Var& a, const Var& b);
Var cwise_square(const Var& a);
Var tanh(const Var& a);
/// 1x1 sum of all entries.
Var sum(const Var& a);
Var block(const Var& a, int row, int col, int rows, int cols);
Var concat_rows(const Var& a, const Var& b);
/// m + diag(v) for square m and column vector v.
Var add_diag(const Var& m, const Var& v);

/// Weighted Huber penalty, 1x1:
///   sum_ij w_ij * h(p_ij - t_ij),  h(e) = e^2/2 if |e| <= delta else
///   delta * (|e| - delta/2).
Var huber_loss(const Var& pred, const Mat& target, const Mat& weight, double delta);

/// Cross-entropy of a softmax over a column of logits against a fixed
/// target index, 1x1: logsumexp(logits) - logits[index].
Var softmax_cross_entropy(const Var& logits, int index);

}  // namespace flowcast::ad

#endif  // FLOWCAST_TAPE_HPP
