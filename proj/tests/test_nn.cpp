#include "flowcast/nn.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>

using namespace flowcast;
using ad::Mat;

TEST_CASE("arena allocation is contiguous") {
  nn::ParamArena arena;
  CHECK(arena.size() == 0);
  CHECK(arena.allocate(3) == 0);
  CHECK(arena.allocate(2) == 3);
  CHECK(arena.size() == 5);
  CHECK(arena.values() == Eigen::VectorXd::Zero(5));
}

TEST_CASE("mlp spec counts parameters") {
  nn::MlpSpec spec{{4, 8, 3}};
  CHECK_NOTHROW(spec.validate());
  CHECK(spec.param_count() == (4 * 8 + 8) + (8 * 3 + 3));

  CHECK_THROWS_AS((nn::MlpSpec{{4}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((nn::MlpSpec{{4, 0, 3}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((nn::MlpSpec{std::vector<int>{}}.validate()), std::invalid_argument);
}

TEST_CASE("mlp init fills its arena block and nothing else") {
  nn::ParamArena arena;
  nn::Mlp a(nn::MlpSpec{{2, 4, 1}}, &arena);
  nn::Mlp b(nn::MlpSpec{{3, 2}}, &arena);
  CHECK(arena.size() == a.spec().param_count() + b.spec().param_count());

  std::mt19937_64 rng(1);
  a.init(rng);
  // b's block is untouched.
  CHECK(arena.values().tail(b.spec().param_count()) ==
        Eigen::VectorXd::Zero(b.spec().param_count()));
  // a has nonzero weights (Xavier) and zero biases at the end of layer 1.
  CHECK(arena.values().head(2 * 4).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("mlp forward matches a hand computation") {
  nn::ParamArena arena;
  nn::Mlp mlp(nn::MlpSpec{{2, 2, 1}}, &arena);

  // Layer 0: W0 (2x2, column-major), b0. Layer 1: W1 (1x2), b1.
  Eigen::VectorXd& p = arena.values();
  // W0 = [[1, 0.5], [-1, 2]] column-major: 1, -1, 0.5, 2
  p << 1.0, -1.0, 0.5, 2.0, /*b0*/ 0.1, -0.2, /*W1*/ 3.0, -1.0, /*b1*/ 0.25;

  Eigen::VectorXd x(2);
  x << 0.3, -0.6;
  const double h0 = std::tanh(1.0 * 0.3 + 0.5 * -0.6 + 0.1);
  const double h1 = std::tanh(-1.0 * 0.3 + 2.0 * -0.6 - 0.2);
  const double expected = 3.0 * h0 - 1.0 * h1 + 0.25;

  Eigen::VectorXd y = mlp.forward(x);
  REQUIRE(y.size() == 1);
  CHECK(y[0] == doctest::Approx(expected).epsilon(1e-14));

  CHECK_THROWS_AS(mlp.forward(Eigen::VectorXd::Zero(3)), std::invalid_argument);
}

TEST_CASE("tape forward equals plain forward") {
  nn::ParamArena arena;
  nn::Mlp mlp(nn::MlpSpec{{3, 5, 4, 2}}, &arena);
  std::mt19937_64 rng(99);
  mlp.init(rng);

  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::VectorXd x(3);
    for (int i = 0; i < 3; ++i) x[i] = dist(rng);

    ad::Tape tape;
    auto leaves = mlp.leaves(tape);
    ad::Var in = tape.leaf(Mat(x));
    ad::Var out = mlp.forward(tape, leaves, in);

    Eigen::VectorXd plain = mlp.forward(x);
    REQUIRE(out.value().rows() == 2);
    REQUIRE(out.value().cols() == 1);
    CHECK((out.value().col(0) - plain).norm() == doctest::Approx(0.0).scale(1.0));
  }
}

TEST_CASE("add_param_grads matches finite differences over the arena") {
  nn::ParamArena arena;
  nn::Mlp mlp(nn::MlpSpec{{2, 3, 1}}, &arena);
  std::mt19937_64 rng(7);
  mlp.init(rng);

  Eigen::VectorXd x(2);
  x << 0.4, -0.7;

  auto loss_at = [&](const Eigen::VectorXd& params) {
    Eigen::VectorXd saved = arena.values();
    arena.values() = params;
    Eigen::VectorXd y = mlp.forward(x);
    arena.values() = saved;
    return 0.5 * y.squaredNorm();
  };

  ad::Tape tape;
  auto leaves = mlp.leaves(tape);
  ad::Var out = mlp.forward(tape, leaves, tape.leaf(Mat(x)));
  ad::Var loss = ad::scale(ad::sum(ad::cwise_square(out)), 0.5);
  tape.backward(loss);

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(arena.size());
  mlp.add_param_grads(leaves, grad);

  const double step = 1e-6;
  for (int i = 0; i < arena.size(); ++i) {
    Eigen::VectorXd plus = arena.values();
    Eigen::VectorXd minus = arena.values();
    plus[i] += step;
    minus[i] -= step;
    const double fd = (loss_at(plus) - loss_at(minus)) / (2.0 * step);
    CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
  }
}

TEST_CASE("add_param_grads accumulates instead of overwriting") {
  nn::ParamArena arena;
  nn::Mlp mlp(nn::MlpSpec{{1, 2}}, &arena);
  std::mt19937_64 rng(3);
  mlp.init(rng);

  ad::Tape tape;
  auto leaves = mlp.leaves(tape);
  ad::Var out = ad::sum(mlp.forward(tape, leaves, tape.leaf(Mat::Ones(1, 1))));
  tape.backward(out);

  Eigen::VectorXd grad = Eigen::VectorXd::Ones(arena.size());
  mlp.add_param_grads(leaves, grad);
  Eigen::VectorXd once = grad;
  mlp.add_param_grads(leaves, grad);
  CHECK((grad - once).norm() == doctest::Approx((once - Eigen::VectorXd::Ones(arena.size())).norm()));
}

TEST_CASE("adamw first step is a signed lr move plus decay") {
  nn::AdamW::Config cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  nn::AdamW opt(2, cfg);

  Eigen::VectorXd params(2);
  params << 1.0, -2.0;
  Eigen::VectorXd grad(2);
  grad << 0.3, -0.5;

  Eigen::VectorXd before = params;
  opt.step(params, grad);
  CHECK(opt.steps_taken() == 1);

  // After bias correction the first Adam update is lr * g / (|g| + eps~0),
  // i.e. lr * sign(g); decoupled decay subtracts lr * wd * theta.
  for (int i = 0; i < 2; ++i) {
    const double expected =
        before[i] - cfg.lr * (grad[i] > 0 ? 1.0 : -1.0) - cfg.lr * cfg.weight_decay * before[i];
    CHECK(params[i] == doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("adamw converges on a quadratic") {
  nn::AdamW::Config cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;
  nn::AdamW opt(3, cfg);

  Eigen::VectorXd target(3);
  target << 1.0, -2.0, 0.5;
  Eigen::VectorXd params = Eigen::VectorXd::Zero(3);
  for (int i = 0; i < 500; ++i) {
    Eigen::VectorXd grad = params - target;
    opt.step(params, grad);
  }
  CHECK((params - target).norm() < 1e-3);
}

TEST_CASE("adamw rejects mismatched sizes") {
  nn::AdamW opt(2, nn::AdamW::Config{});
  Eigen::VectorXd params = Eigen::VectorXd::Zero(3);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(opt.step(params, grad), std::invalid_argument);
}
