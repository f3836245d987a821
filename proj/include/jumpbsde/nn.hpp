// Minimal feed-forward regression engine: ReLU MLPs evaluated batched through
// Eigen GEMMs, exact reverse-mode gradients, and bias-corrected Adam.
// Everything is 64-bit.
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "jumpbsde/common.hpp"
#include "jumpbsde/rng.hpp"

namespace jumpbsde {

// Affine chain A_L o relu o A_{L-1} o ... o A_1. Weights are stored input-row
// major so a batch X (B x n_in) flows as X * W + b.
struct Mlp {
  std::vector<MatrixXd> W;      // layer l: fan_in x fan_out
  std::vector<RowVectorXd> bias;

  int input_dim() const { return static_cast<int>(W.front().rows()); }
  int output_dim() const { return static_cast<int>(W.back().cols()); }
  int layers() const { return static_cast<int>(W.size()); }

  struct Cache {
    MatrixXd input;
    std::vector<MatrixXd> post;  // activations after each hidden relu
  };

  MatrixXd forward(const MatrixXd& X, Cache* cache = nullptr) const {
    if (X.cols() != input_dim()) throw std::invalid_argument("Mlp: input dimension mismatch");
    if (cache) {
      cache->input = X;
      cache->post.clear();
    }
    MatrixXd a = X;
    for (std::size_t l = 0; l < W.size(); ++l) {
      MatrixXd z = (a * W[l]).rowwise() + bias[l];
      if (l + 1 < W.size()) {
        a = z.cwiseMax(0.0);  // relu; derivative at 0 taken as 0
        if (cache) cache->post.push_back(a);
      } else {
        a = std::move(z);
      }
    }
    return a;
  }

  VectorXd eval(const VectorXd& x) const {
    return forward(x.transpose()).row(0).transpose();
  }

  struct Grads {
    std::vector<MatrixXd> W;
    std::vector<RowVectorXd> bias;

    void zero_like(const Mlp& net) {
      W.clear();
      bias.clear();
      for (std::size_t l = 0; l < net.W.size(); ++l) {
        W.push_back(MatrixXd::Zero(net.W[l].rows(), net.W[l].cols()));
        bias.push_back(RowVectorXd::Zero(net.bias[l].size()));
      }
    }
  };

  // Accumulates d/dparams of sum_batch <cotangent_row, net(x_row)> into g.
  void backward(const Cache& cache, const MatrixXd& cotangent, Grads& g) const {
    MatrixXd delta = cotangent;  // B x out of current layer
    for (int l = layers() - 1; l >= 0; --l) {
      const MatrixXd& a_in = (l == 0) ? cache.input : cache.post[l - 1];
      g.W[l].noalias() += a_in.transpose() * delta;
      g.bias[l] += delta.colwise().sum();
      if (l > 0) {
        MatrixXd back = delta * W[l].transpose();
        delta = (cache.post[l - 1].array() > 0.0).cast<double>() * back.array();
      }
    }
  }
};

// Weights ~ N(0, 2/fan_in), biases zero.
inline Mlp he_init(const std::vector<int>& widths, SplitStream& rng) {
  if (widths.size() < 2) throw std::invalid_argument("he_init: need at least input/output widths");
  Mlp net;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    if (widths[l] <= 0 || widths[l + 1] <= 0)
      throw std::invalid_argument("he_init: widths must be positive");
    MatrixXd w(widths[l], widths[l + 1]);
    double sd = std::sqrt(2.0 / widths[l]);
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = sd * rng.normal();
    net.W.push_back(std::move(w));
    net.bias.push_back(RowVectorXd::Zero(widths[l + 1]));
  }
  return net;
}

// Standard MLP shape for the solver: two hidden layers of m units.
inline std::vector<int> solver_widths(int n_in, int hidden, int n_out, int layers = 3) {
  std::vector<int> w;
  w.push_back(n_in);
  for (int l = 0; l < layers - 1; ++l) w.push_back(hidden);
  w.push_back(n_out);
  return w;
}

struct AdamState {
  double lr = 3e-3, beta1 = 0.9, beta2 = 0.999, eps_hat = 1e-8;
  long step_count = 0;
  std::vector<MatrixXd> mW, vW;
  std::vector<RowVectorXd> mb, vb;

  void init(const Mlp& net) {
    step_count = 0;
    mW.clear();
    vW.clear();
    mb.clear();
    vb.clear();
    for (std::size_t l = 0; l < net.W.size(); ++l) {
      mW.push_back(MatrixXd::Zero(net.W[l].rows(), net.W[l].cols()));
      vW.push_back(MatrixXd::Zero(net.W[l].rows(), net.W[l].cols()));
      mb.push_back(RowVectorXd::Zero(net.bias[l].size()));
      vb.push_back(RowVectorXd::Zero(net.bias[l].size()));
    }
  }

  void step(Mlp& net, const Mlp::Grads& g, double lr_override = -1.0) {
    double rate = lr_override >= 0.0 ? lr_override : lr;
    ++step_count;
    double c1 = 1.0 - std::pow(beta1, step_count);
    double c2 = 1.0 - std::pow(beta2, step_count);
    for (std::size_t l = 0; l < net.W.size(); ++l) {
      mW[l] = beta1 * mW[l] + (1.0 - beta1) * g.W[l];
      vW[l] = beta2 * vW[l].array() + (1.0 - beta2) * g.W[l].array().square();
      net.W[l].array() -=
          rate * (mW[l].array() / c1) / ((vW[l].array() / c2).sqrt() + eps_hat);
      mb[l] = beta1 * mb[l] + (1.0 - beta1) * g.bias[l];
      vb[l] = beta2 * vb[l].array() + (1.0 - beta2) * g.bias[l].array().square();
      net.bias[l].array() -=
          rate * (mb[l].array() / c1) / ((vb[l].array() / c2).sqrt() + eps_hat);
    }
  }
};

}  // namespace jumpbsde
