#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "jumpbsde/nn.hpp"

namespace jumpbsde {
namespace {

Mlp tiny_net() {
  // 2 -> 2 -> 1, hand-picked weights
  Mlp net;
  net.W.push_back((MatrixXd(2, 2) << 1.0, -1.0, 0.5, 2.0).finished());
  net.bias.push_back((RowVectorXd(2) << 0.1, -0.2).finished());
  net.W.push_back((MatrixXd(2, 1) << 2.0, 1.0).finished());
  net.bias.push_back(RowVectorXd::Constant(1, 0.3));
  return net;
}

TEST(Mlp, TwoLayerGoldenValue) {
  Mlp net = tiny_net();
  VectorXd x(2);
  x << 1.0, 2.0;
  // hidden pre-act: [1*1 + 2*0.5 + 0.1, 1*(-1) + 2*2 - 0.2] = [2.1, 2.8]
  // out = 2*2.1 + 1*2.8 + 0.3 = 7.3
  EXPECT_NEAR(net.eval(x)[0], 7.3, 1e-14);
  x << -1.0, 0.0;
  // pre-act: [-0.9, 0.8], relu -> [0, 0.8]; out = 0.8 + 0.3
  EXPECT_NEAR(net.eval(x)[0], 1.1, 1e-14);
}

TEST(Mlp, BatchedMatchesRowwise) {
  SplitStream s(4);
  Mlp net = he_init({3, 8, 8, 2}, s);
  MatrixXd X(5, 3);
  for (int i = 0; i < 15; ++i) X(i / 3, i % 3) = s.normal();
  MatrixXd Y = net.forward(X);
  for (int r = 0; r < 5; ++r) {
    VectorXd y = net.eval(X.row(r).transpose());
    EXPECT_NEAR((Y.row(r).transpose() - y).norm(), 0.0, 1e-14);
  }
}

TEST(Mlp, InputDimMismatchThrows) {
  Mlp net = tiny_net();
  EXPECT_THROW(net.forward(MatrixXd::Zero(1, 3)), std::invalid_argument);
}

double loss_of(const Mlp& net, const MatrixXd& X, const VectorXd& y) {
  VectorXd out = net.forward(X).col(0);
  return (out - y).squaredNorm();
}

TEST(Mlp, BackwardMatchesFiniteDifferences) {
  SplitStream s(19);
  Mlp net = he_init({2, 6, 6, 1}, s);
  // nudge biases off zero so relu patterns are generic
  for (auto& b : net.bias)
    for (Eigen::Index k = 0; k < b.size(); ++k) b[k] = 0.05 * s.normal();
  MatrixXd X(16, 2);
  VectorXd y(16);
  for (int r = 0; r < 16; ++r) {
    X(r, 0) = s.normal();
    X(r, 1) = s.normal();
    y[r] = std::sin(X(r, 0)) + 0.5 * X(r, 1);
  }
  Mlp::Cache cache;
  MatrixXd out = net.forward(X, &cache);
  MatrixXd cot = 2.0 * (out.col(0) - y);
  Mlp::Grads g;
  g.zero_like(net);
  net.backward(cache, cot, g);

  double step = 1e-6;
  double worst = 0.0;
  for (std::size_t l = 0; l < net.W.size(); ++l) {
    for (Eigen::Index i = 0; i < net.W[l].rows(); ++i)
      for (Eigen::Index j = 0; j < net.W[l].cols(); ++j) {
        Mlp p = net;
        p.W[l](i, j) += step;
        Mlp m = net;
        m.W[l](i, j) -= step;
        double fd = (loss_of(p, X, y) - loss_of(m, X, y)) / (2.0 * step);
        worst = std::max(worst, std::fabs(fd - g.W[l](i, j)));
      }
    for (Eigen::Index j = 0; j < net.bias[l].size(); ++j) {
      Mlp p = net;
      p.bias[l][j] += step;
      Mlp m = net;
      m.bias[l][j] -= step;
      double fd = (loss_of(p, X, y) - loss_of(m, X, y)) / (2.0 * step);
      worst = std::max(worst, std::fabs(fd - g.bias[l][j]));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Mlp, ZeroCotangentZeroGrads) {
  Mlp net = tiny_net();
  Mlp::Cache cache;
  MatrixXd X = MatrixXd::Random(4, 2);
  net.forward(X, &cache);
  Mlp::Grads g;
  g.zero_like(net);
  net.backward(cache, MatrixXd::Zero(4, 1), g);
  for (std::size_t l = 0; l < g.W.size(); ++l) {
    EXPECT_EQ(g.W[l].cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(g.bias[l].cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Mlp, SingleAffineLayerGradIsOuterProduct) {
  Mlp net;
  net.W.push_back(MatrixXd::Zero(3, 1));
  net.bias.push_back(RowVectorXd::Zero(1));
  MatrixXd X(1, 3);
  X << 1.0, 2.0, 3.0;
  Mlp::Cache cache;
  net.forward(X, &cache);
  Mlp::Grads g;
  g.zero_like(net);
  MatrixXd cot = MatrixXd::Constant(1, 1, 2.5);
  net.backward(cache, cot, g);
  EXPECT_NEAR(g.W[0](0, 0), 2.5, 1e-14);
  EXPECT_NEAR(g.W[0](1, 0), 5.0, 1e-14);
  EXPECT_NEAR(g.W[0](2, 0), 7.5, 1e-14);
  EXPECT_NEAR(g.bias[0][0], 2.5, 1e-14);
}

TEST(HeInit, ShapesVarianceDeterminism) {
  SplitStream a(7), b(7);
  Mlp n1 = he_init({64, 128, 1}, a);
  Mlp n2 = he_init({64, 128, 1}, b);
  ASSERT_EQ(n1.layers(), 2);
  EXPECT_EQ((n1.W[0] - n2.W[0]).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(n1.bias[0].cwiseAbs().maxCoeff(), 0.0);
  double var = n1.W[0].array().square().mean();
  EXPECT_NEAR(var, 2.0 / 64.0, 0.3 * 2.0 / 64.0);
  EXPECT_THROW(he_init({3}, a), std::invalid_argument);
  EXPECT_THROW(he_init({3, 0, 1}, a), std::invalid_argument);
}

TEST(SolverWidths, Shape) {
  auto w = solver_widths(4, 24, 2, 3);
  ASSERT_EQ(w.size(), 4u);
  EXPECT_EQ(w[0], 4);
  EXPECT_EQ(w[1], 24);
  EXPECT_EQ(w[2], 24);
  EXPECT_EQ(w[3], 2);
}

TEST(Adam, ZeroGradientNoMove) {
  Mlp net = tiny_net();
  Mlp before = net;
  AdamState opt;
  opt.init(net);
  Mlp::Grads g;
  g.zero_like(net);
  for (int k = 0; k < 5; ++k) opt.step(net, g);
  for (std::size_t l = 0; l < net.W.size(); ++l)
    EXPECT_EQ((net.W[l] - before.W[l]).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Adam, ZeroLearningRateNoMove) {
  Mlp net = tiny_net();
  Mlp before = net;
  AdamState opt;
  opt.init(net);
  Mlp::Grads g;
  g.zero_like(net);
  g.W[0].setConstant(3.0);
  opt.step(net, g, 0.0);
  EXPECT_EQ((net.W[0] - before.W[0]).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Adam, FirstStepMagnitudeNearLr) {
  // with a constant gradient the bias-corrected first update is ~lr * sign(g)
  Mlp net = tiny_net();
  Mlp before = net;
  AdamState opt;
  opt.lr = 1e-2;
  opt.init(net);
  Mlp::Grads g;
  g.zero_like(net);
  g.W[0].setConstant(0.37);
  opt.step(net, g);
  MatrixXd delta = before.W[0] - net.W[0];
  for (Eigen::Index i = 0; i < delta.size(); ++i)
    EXPECT_NEAR(delta(i), 1e-2, 1e-6);
}

TEST(Adam, LinearRegressionReachesNormalEquations) {
  // single affine layer trained on a fixed design must converge to the
  // least-squares optimum
  SplitStream s(31);
  MatrixXd X(64, 2);
  VectorXd y(64);
  for (int r = 0; r < 64; ++r) {
    X(r, 0) = s.normal();
    X(r, 1) = s.normal();
    y[r] = 1.7 * X(r, 0) - 0.4 * X(r, 1) + 0.9;
  }
  Mlp net;
  net.W.push_back(MatrixXd::Zero(2, 1));
  net.bias.push_back(RowVectorXd::Zero(1));
  AdamState opt;
  opt.lr = 5e-2;
  opt.init(net);
  for (int it = 0; it < 6000; ++it) {
    Mlp::Cache cache;
    MatrixXd out = net.forward(X, &cache);
    MatrixXd cot = (2.0 / 64.0) * (out.col(0) - y);
    Mlp::Grads g;
    g.zero_like(net);
    net.backward(cache, cot, g);
    opt.step(net, g, opt.lr * (it < 4000 ? 1.0 : 0.01));
  }
  EXPECT_NEAR(net.W[0](0, 0), 1.7, 1e-6);
  EXPECT_NEAR(net.W[0](1, 0), -0.4, 1e-6);
  EXPECT_NEAR(net.bias[0][0], 0.9, 1e-6);
}

}  // namespace
}  // namespace jumpbsde
