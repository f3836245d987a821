// Driving noise generation and the jump-corrected Euler forward scheme.
// State lives in R^n, Brownian noise in R^d, the jump space is 1D and the
// compensating Brownian motion W~ is scalar to match it.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jumpbsde/common.hpp"
#include "jumpbsde/levy.hpp"
#include "jumpbsde/rng.hpp"

namespace jumpbsde {

// Driver f(t, x, y, z, p) with optional analytic partials in (y, z, p);
// missing partials fall back to central differences.
struct Driver {
  std::function<double(double, const VectorXd&, double, const VectorXd&, double)> f;
  std::function<double(double, const VectorXd&, double, const VectorXd&, double)> df_dy;
  std::function<VectorXd(double, const VectorXd&, double, const VectorXd&, double)> df_dz;
  std::function<double(double, const VectorXd&, double, const VectorXd&, double)> df_dp;

  bool valid() const { return static_cast<bool>(f); }

  double eval(double t, const VectorXd& x, double y, const VectorXd& z, double p) const {
    return f(t, x, y, z, p);
  }

  double partial_y(double t, const VectorXd& x, double y, const VectorXd& z, double p) const {
    if (df_dy) return df_dy(t, x, y, z, p);
    double s = 1e-6 * (1.0 + std::fabs(y));
    return (f(t, x, y + s, z, p) - f(t, x, y - s, z, p)) / (2.0 * s);
  }

  VectorXd partial_z(double t, const VectorXd& x, double y, const VectorXd& z, double p) const {
    if (df_dz) return df_dz(t, x, y, z, p);
    VectorXd g(z.size());
    for (Eigen::Index k = 0; k < z.size(); ++k) {
      double s = 1e-6 * (1.0 + std::fabs(z[k]));
      VectorXd zp = z, zm = z;
      zp[k] += s;
      zm[k] -= s;
      g[k] = (f(t, x, y, zp, p) - f(t, x, y, zm, p)) / (2.0 * s);
    }
    return g;
  }

  double partial_p(double t, const VectorXd& x, double y, const VectorXd& z, double p) const {
    if (df_dp) return df_dp(t, x, y, z, p);
    double s = 1e-6 * (1.0 + std::fabs(p));
    return (f(t, x, y, z, p + s) - f(t, x, y, z, p - s)) / (2.0 * s);
  }
};

inline Driver zero_driver() {
  Driver d;
  d.f = [](double, const VectorXd&, double, const VectorXd&, double) { return 0.0; };
  d.df_dy = d.f;
  d.df_dp = d.f;
  d.df_dz = [](double, const VectorXd&, double, const VectorXd& z, double) {
    return VectorXd::Zero(z.size()).eval();
  };
  return d;
}

struct ModelCoefficients {
  int state_dim = 1;  // n
  int bm_dim = 1;     // d
  std::function<VectorXd(const VectorXd&)> b;
  std::function<MatrixXd(const VectorXd&)> sigma;  // n x d
  JumpCoefficients jump;
  Driver driver;
  std::function<double(const VectorXd&)> terminal;  // g
  int zeta = 0;
};

struct TimeGrid {
  std::vector<double> nodes;

  static TimeGrid uniform(double T, int N) {
    if (N < 0 || !(T > 0.0)) throw std::invalid_argument("TimeGrid: bad T or N");
    TimeGrid g;
    g.nodes.resize(N + 1);
    for (int i = 0; i <= N; ++i) g.nodes[i] = T * static_cast<double>(i) / std::max(N, 1);
    if (N >= 1) g.nodes.back() = T;
    return g;
  }

  int steps() const { return static_cast<int>(nodes.size()) - 1; }
  double dt(int i) const { return nodes[i + 1] - nodes[i]; }
  double T() const { return nodes.back(); }
  double max_dt() const {
    double m = 0;
    for (int i = 0; i < steps(); ++i) m = std::max(m, dt(i));
    return m;
  }

  void validate() const {
    for (std::size_t i = 0; i + 1 < nodes.size(); ++i)
      if (!(nodes[i] < nodes[i + 1])) throw std::invalid_argument("TimeGrid: not increasing");
  }
};

// Sampled jumps of one time step for a whole batch, CSR layout.
struct StepJumps {
  std::vector<std::size_t> offsets;  // batch + 1
  std::vector<double> sizes;
  std::vector<int> cell_index;
};

// All driving increments: Brownian dW, compensating dW~, and jumps (both as
// raw sizes for the forward step and binned counts for the backward terms).
struct IncrementBatch {
  int batch = 0, steps = 0, bm_dim = 0;
  std::vector<MatrixXd> dW;      // per step, batch x d
  std::vector<VectorXd> dWtil;   // per step, batch (scalar W~)
  std::vector<MatrixXd> counts;  // per step, batch x J
  std::vector<StepJumps> jumps;  // per step
  std::uint64_t seed = 0;
};

inline IncrementBatch generate_increments(const TimeGrid& grid, const JumpPartition& part,
                                          int bm_dim, int batch, const SplitStream& root,
                                          int threads = 1) {
  if (batch < 1) throw std::invalid_argument("generate_increments: batch must be >= 1");
  grid.validate();
  int N = grid.steps();
  int J = static_cast<int>(part.size());
  IncrementBatch inc;
  inc.batch = batch;
  inc.steps = N;
  inc.bm_dim = bm_dim;
  inc.seed = root.key();
  inc.dW.assign(N, MatrixXd(batch, bm_dim));
  inc.dWtil.assign(N, VectorXd(batch));
  inc.counts.assign(N, MatrixXd::Zero(batch, J));
  inc.jumps.assign(N, StepJumps{});

  // per-path jump buffers, merged in path order afterwards (deterministic)
  std::vector<std::vector<JumpRealization>> jr(N, std::vector<JumpRealization>(batch));
  parallel_for(batch, threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t p = lo; p < hi; ++p) {
      SplitStream s = root.split("increments", p);
      for (int i = 0; i < N; ++i) {
        double sdt = std::sqrt(grid.dt(i));
        for (int k = 0; k < bm_dim; ++k) inc.dW[i](p, k) = sdt * s.normal();
        inc.dWtil[i](p) = sdt * s.normal();
        if (part.total_mass > 0.0) {
          jr[i][p] = sample_jumps(part, grid.dt(i), s);
          for (std::size_t q = 0; q < jr[i][p].counts.size(); ++q)
            inc.counts[i](p, q) = static_cast<double>(jr[i][p].counts[q]);
        }
      }
    }
  });
  for (int i = 0; i < N; ++i) {
    StepJumps& sj = inc.jumps[i];
    sj.offsets.assign(batch + 1, 0);
    for (int p = 0; p < batch; ++p) sj.offsets[p + 1] = sj.offsets[p] + jr[i][p].sizes.size();
    sj.sizes.resize(sj.offsets.back());
    sj.cell_index.resize(sj.offsets.back());
    for (int p = 0; p < batch; ++p) {
      std::copy(jr[i][p].sizes.begin(), jr[i][p].sizes.end(), sj.sizes.begin() + sj.offsets[p]);
      std::copy(jr[i][p].cell_index.begin(), jr[i][p].cell_index.end(),
                sj.cell_index.begin() + sj.offsets[p]);
    }
  }
  return inc;
}

// Per-step noise view for one path.
struct StepIncrements {
  VectorXd dW;
  double dWtil = 0.0;
  const double* sizes = nullptr;
  std::size_t n_jumps = 0;
};

// One Euler step of the jump-corrected forward scheme:
//   x' = x + b dt + sigma dW + zeta D_e beta(x,0) Sigma^{1/2} dW~
//        + sum_jumps beta(x,e) - dt * compensator(x)
// where compensator(x) defaults to the cell quadrature sum_j beta(x,e_j) lambda_j.
inline VectorXd euler_step(const VectorXd& x, const ModelCoefficients& coeffs,
                           double sqrt_sigma_eps, const JumpPartition& part, double dt,
                           const StepIncrements& inc) {
  VectorXd next = x + coeffs.b(x) * dt + coeffs.sigma(x) * inc.dW;
  if (coeffs.zeta)
    next += coeffs.jump.dbeta0(x) * (sqrt_sigma_eps * inc.dWtil);
  for (std::size_t k = 0; k < inc.n_jumps; ++k) next += coeffs.jump.beta(x, inc.sizes[k]);
  if (part.total_mass > 0.0) {
    if (coeffs.jump.exact_compensator) {
      next -= dt * coeffs.jump.exact_compensator(x, part);
    } else {
      VectorXd comp = VectorXd::Zero(x.size());
      for (const auto& c : part.cells) comp += coeffs.jump.beta(x, c.rep) * c.mass;
      next -= dt * comp;
    }
  }
  return next;
}

struct PathBatch {
  std::vector<MatrixXd> states;  // N+1 entries, batch x n
  IncrementBatch increments;
  double sqrt_sigma_eps = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t fingerprint = 0;
  std::vector<char> valid;  // per path
  int invalid_count = 0;

  int batch() const { return states.empty() ? 0 : static_cast<int>(states[0].rows()); }
  int steps() const { return static_cast<int>(states.size()) - 1; }
};

inline PathBatch simulate_forward(const ModelCoefficients& coeffs, const TimeGrid& grid,
                                  const JumpPartition& part, const VectorXd& x0, int batch,
                                  const SplitStream& root, int threads = 1) {
  if (x0.size() != coeffs.state_dim)
    throw std::invalid_argument("simulate_forward: x0 dimension mismatch");
  PathBatch pb;
  pb.seed = root.key();
  pb.increments = generate_increments(grid, part, coeffs.bm_dim, batch, root, threads);
  pb.sqrt_sigma_eps =
      part.epsilon > 0.0 ? std::sqrt(truncation_variance(*part.measure, part.epsilon)) : 0.0;
  int N = grid.steps();
  pb.states.assign(N + 1, MatrixXd(batch, coeffs.state_dim));
  pb.valid.assign(batch, 1);
  for (int p = 0; p < batch; ++p) pb.states[0].row(p) = x0.transpose();

  parallel_for(batch, threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t p = lo; p < hi; ++p) {
      VectorXd x = x0;
      for (int i = 0; i < N; ++i) {
        StepIncrements si;
        si.dW = pb.increments.dW[i].row(p).transpose();
        si.dWtil = pb.increments.dWtil[i](p);
        const StepJumps& sj = pb.increments.jumps[i];
        if (!sj.offsets.empty()) {
          si.sizes = sj.sizes.data() + sj.offsets[p];
          si.n_jumps = sj.offsets[p + 1] - sj.offsets[p];
        }
        x = euler_step(x, coeffs, pb.sqrt_sigma_eps, part, grid.dt(i), si);
        if (!x.allFinite()) {
          pb.valid[p] = 0;
          x = VectorXd::Zero(coeffs.state_dim);
        }
        pb.states[i + 1].row(p) = x.transpose();
      }
    }
  });
  for (char v : pb.valid)
    if (!v) ++pb.invalid_count;
  if (pb.invalid_count > 0.001 * batch)
    throw std::runtime_error("simulate_forward: " + std::to_string(pb.invalid_count) +
                             " invalid paths (>0.1% of batch)");
  std::uint64_t fp = fnv1a(&pb.seed, sizeof(pb.seed));
  for (const auto& s : pb.states)
    fp = fnv1a(s.data(), sizeof(double) * s.size(), fp);
  pb.fingerprint = fp;
  return pb;
}

}  // namespace jumpbsde
