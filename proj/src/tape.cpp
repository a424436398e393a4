#include "flowcast/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace flowcast::ad {

namespace {

void check_same_shape(const char* op, const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
}

}  // namespace

const Mat& Var::value() const {
  if (!tape_) throw std::logic_error("tape var: value() on empty handle");
  return tape_->node(id_).value;
}

Mat Var::grad() const {
  if (!tape_) throw std::logic_error("tape var: grad() on empty handle");
  const auto& n = tape_->node(id_);
  if (n.has_grad) return n.grad;
  return Mat::Zero(n.value.rows(), n.value.cols());
}

Var Tape::leaf(Mat value) { return emplace(std::move(value), nullptr); }

Var Tape::emplace(Mat value, std::function<void(Tape&, const Mat&)> pull) {
  if (!value.allFinite()) throw std::invalid_argument("tape: non-finite node value");
  Node n;
  n.value = std::move(value);
  n.pull = std::move(pull);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int id, const Mat& delta) {
  Node& n = nodes_.at(static_cast<std::size_t>(id));
  check_same_shape("tape accumulate", n.value, delta);
  if (n.has_grad) {
    n.grad += delta;
  } else {
    n.grad = delta;
    n.has_grad = true;
  }
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw std::invalid_argument("tape backward: root from another tape");
  const auto& r = node(root.id());
  if (r.value.rows() != 1 || r.value.cols() != 1)
    throw std::invalid_argument("tape backward: root must be 1x1");
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(root.id(), Mat::Ones(1, 1));
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.has_grad && n.pull) n.pull(*this, n.grad);
  }
}

void Tape::clear() { nodes_.clear(); }

namespace {

Tape* common_tape(const char* op, const Var& a, const Var& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument(std::string(op) + ": empty operand");
  if (a.tape() != b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return a.tape();
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape* t = common_tape("add", a, b);
  check_same_shape("add", a.value(), b.value());
  const int ia = a.id(), ib = b.id();
  return t->emplace(a.value() + b.value(), [ia, ib](Tape& tp, const Mat& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape* t = common_tape("sub", a, b);
  check_same_shape("sub", a.value(), b.value());
  const int ia = a.id(), ib = b.id();
  return t->emplace(a.value() - b.value(), [ia, ib](Tape& tp, const Mat& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, -g);
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  if (!a.valid()) throw std::invalid_argument("scale: empty operand");
  const int ia = a.id();
  return a.tape()->emplace(s * a.value(),
                           [ia, s](Tape& tp, const Mat& g) { tp.accumulate(ia, s * g); });
}

Var matmul(const Var& a, const Var& b) {
  Tape* t = common_tape("matmul", a, b);
  if (a.value().cols() != b.value().rows())
    throw std::invalid_argument("matmul: inner dimensions differ");
  const int ia = a.id(), ib = b.id();
  const Mat av = a.value(), bv = b.value();
  return t->emplace(av * bv, [ia, ib, av, bv](Tape& tp, const Mat& g) {
    tp.accumulate(ia, g * bv.transpose());
    tp.accumulate(ib, av.transpose() * g);
  });
}

Var transpose(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("transpose: empty operand");
  const int ia = a.id();
  return a.tape()->emplace(a.value().transpose(),
                           [ia](Tape& tp, const Mat& g) { tp.accumulate(ia, g.transpose()); });
}

Var inverse(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("inverse: empty operand");
  const Mat& v = a.value();
  if (v.rows() != v.cols()) throw std::invalid_argument("inverse: matrix must be square");
  Eigen::PartialPivLU<Mat> lu(v);
  const Mat y = lu.inverse();
  if (!y.allFinite()) throw std::runtime_error("inverse: singular matrix on tape");
  const int ia = a.id();
  return a.tape()->emplace(y, [ia, y](Tape& tp, const Mat& g) {
    tp.accumulate(ia, -(y.transpose() * g * y.transpose()));
  });
}

Var cwise_mul(const Var& a, const Var& b) {
  Tape* t = common_tape("cwise_mul", a, b);
  check_same_shape("cwise_mul", a.value(), b.value());
  const int ia = a.id(), ib = b.id();
  const Mat av = a.value(), bv = b.value();
  return t->emplace(av.cwiseProduct(bv), [ia, ib, av, bv](Tape& tp, const Mat& g) {
    tp.accumulate(ia, g.cwiseProduct(bv));
    tp.accumulate(ib, g.cwiseProduct(av));
  });
}

Var cwise_square(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("cwise_square: empty operand");
  const int ia = a.id();
  const Mat av = a.value();
  return a.tape()->emplace(av.cwiseProduct(av), [ia, av](Tape& tp, const Mat& g) {
    tp.accumulate(ia, 2.0 * g.cwiseProduct(av));
  });
}

Var tanh(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("tanh: empty operand");
  const int ia = a.id();
  const Mat y = a.value().array().tanh().matrix();
  return a.tape()->emplace(y, [ia, y](Tape& tp, const Mat& g) {
    tp.accumulate(ia, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var sum(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("sum: empty operand");
  const int ia = a.id();
  const Eigen::Index rows = a.value().rows(), cols = a.value().cols();
  Mat s(1, 1);
  s(0, 0) = a.value().sum();
  return a.tape()->emplace(s, [ia, rows, cols](Tape& tp, const Mat& g) {
    tp.accumulate(ia, Mat::Constant(rows, cols, g(0, 0)));
  });
}

Var block(const Var& a, int row, int col, int rows, int cols) {
  if (!a.valid()) throw std::invalid_argument("block: empty operand");
  const Mat& v = a.value();
  if (row < 0 || col < 0 || rows < 1 || cols < 1 || row + rows > v.rows() || col + cols > v.cols())
    throw std::invalid_argument("block: range outside matrix");
  const int ia = a.id();
  const Eigen::Index pr = v.rows(), pc = v.cols();
  return a.tape()->emplace(v.block(row, col, rows, cols),
                           [ia, row, col, rows, cols, pr, pc](Tape& tp, const Mat& g) {
                             Mat d = Mat::Zero(pr, pc);
                             d.block(row, col, rows, cols) = g;
                             tp.accumulate(ia, d);
                           });
}

Var concat_rows(const Var& a, const Var& b) {
  Tape* t = common_tape("concat_rows", a, b);
  if (a.value().cols() != b.value().cols())
    throw std::invalid_argument("concat_rows: column counts differ");
  const int ia = a.id(), ib = b.id();
  const Eigen::Index ra = a.value().rows(), rb = b.value().rows(), c = a.value().cols();
  Mat v(ra + rb, c);
  v.topRows(ra) = a.value();
  v.bottomRows(rb) = b.value();
  return t->emplace(std::move(v), [ia, ib, ra, rb](Tape& tp, const Mat& g) {
    tp.accumulate(ia, g.topRows(ra));
    tp.accumulate(ib, g.bottomRows(rb));
  });
}

Var add_diag(const Var& m, const Var& v) {
  Tape* t = common_tape("add_diag", m, v);
  const Mat& mv = m.value();
  const Mat& vv = v.value();
  if (mv.rows() != mv.cols()) throw std::invalid_argument("add_diag: matrix must be square");
  if (vv.cols() != 1 || vv.rows() != mv.rows())
    throw std::invalid_argument("add_diag: vector must be n x 1 matching the matrix");
  Mat out = mv;
  out.diagonal() += vv.col(0);
  const int im = m.id(), iv = v.id();
  return t->emplace(std::move(out), [im, iv](Tape& tp, const Mat& g) {
    tp.accumulate(im, g);
    tp.accumulate(iv, g.diagonal());
  });
}

Var huber_loss(const Var& pred, const Mat& target, const Mat& weight, double delta) {
  if (!pred.valid()) throw std::invalid_argument("huber_loss: empty operand");
  check_same_shape("huber_loss target", pred.value(), target);
  check_same_shape("huber_loss weight", pred.value(), weight);
  if (!(delta > 0.0)) throw std::invalid_argument("huber_loss: delta must be > 0");
  const Mat err = pred.value() - target;
  double loss = 0.0;
  Mat dp(err.rows(), err.cols());
  for (Eigen::Index i = 0; i < err.rows(); ++i) {
    for (Eigen::Index j = 0; j < err.cols(); ++j) {
      const double e = err(i, j), w = weight(i, j), ae = std::abs(e);
      if (ae <= delta) {
        loss += w * 0.5 * e * e;
        dp(i, j) = w * e;
      } else {
        loss += w * delta * (ae - 0.5 * delta);
        dp(i, j) = w * delta * (e > 0.0 ? 1.0 : -1.0);
      }
    }
  }
  const int ip = pred.id();
  Mat s(1, 1);
  s(0, 0) = loss;
  return pred.tape()->emplace(s, [ip, dp](Tape& tp, const Mat& g) {
    tp.accumulate(ip, g(0, 0) * dp);
  });
}

Var softmax_cross_entropy(const Var& logits, int index) {
  if (!logits.valid()) throw std::invalid_argument("softmax_cross_entropy: empty operand");
  const Mat& v = logits.value();
  if (v.cols() != 1) throw std::invalid_argument("softmax_cross_entropy: logits must be a column");
  if (index < 0 || index >= v.rows())
    throw std::invalid_argument("softmax_cross_entropy: target index out of range");
  const double m = v.maxCoeff();
  const Eigen::ArrayXd ex = (v.col(0).array() - m).exp();
  const double z = ex.sum();
  const Eigen::VectorXd soft = (ex / z).matrix();
  Mat s(1, 1);
  s(0, 0) = std::log(z) + m - v(index, 0);
  const int il = logits.id();
  Eigen::VectorXd d = soft;
  d[index] -= 1.0;
  return logits.tape()->emplace(s, [il, d](Tape& tp, const Mat& g) {
    tp.accumulate(il, g(0, 0) * d);
  });
}

}  // namespace flowcast::ad
