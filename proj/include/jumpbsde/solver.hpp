// Multi-step deep BSDE core: the per-step residual F, the loss R_i built from
// the frozen tail of later steps, Adam training of the four per-step
// regressors, and the backward-in-time driver producing the trained solution.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "jumpbsde/common.hpp"
#include "jumpbsde/nn.hpp"
#include "jumpbsde/paths.hpp"

namespace jumpbsde {

// Four regressors of one time step: y ~ u, z ~ sigma^T D_x u, w ~ the
// compensating-Brownian control (zeta = 1 only), u ~ the jump control U(x,e).
struct StepNetworks {
  Mlp y, z, w, u;
  bool has_w = false;
};

struct SolverConfig {
  int batch = 8192;
  int epochs = 200;
  int minibatch = 512;
  double lr = 3e-3;
  bool cosine_decay = true;
  double val_fraction = 0.1;
  int hidden = 0;  // 0 -> 20 + state_dim
  int layers = 3;
  int threads = 1;
  bool resample = false;  // fresh path cloud per backward step
};

struct StepHistory {
  double initial_loss = 0, final_train_loss = 0, best_val_loss = 0;
  std::vector<double> epoch_train_loss;
};

struct SolverDiagnostics {
  std::vector<StepHistory> per_step;  // index i
};

namespace detail {

inline MatrixXd build_u_inputs(const MatrixXd& X, const std::vector<double>& reps) {
  const Eigen::Index B = X.rows(), n = X.cols();
  const Eigen::Index J = static_cast<Eigen::Index>(reps.size());
  MatrixXd in(B * J, n + 1);
  for (Eigen::Index p = 0; p < B; ++p)
    for (Eigen::Index j = 0; j < J; ++j) {
      in.block(p * J + j, 0, 1, n) = X.row(p);
      in(p * J + j, n) = reps[j];
    }
  return in;
}

template <typename T>
T gather_rows(const T& M, const std::vector<int>& idx) {
  T out(static_cast<Eigen::Index>(idx.size()), M.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(k) = M.row(idx[k]);
  return out;
}

inline VectorXd gather(const VectorXd& v, const std::vector<int>& idx) {
  VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out[k] = v[idx[k]];
  return out;
}

inline MatrixXd gather_u_rows(const MatrixXd& Uin, const std::vector<int>& idx, Eigen::Index J) {
  MatrixXd out(static_cast<Eigen::Index>(idx.size()) * J, Uin.cols());
  for (std::size_t k = 0; k < idx.size(); ++k)
    out.middleRows(static_cast<Eigen::Index>(k) * J, J) = Uin.middleRows(idx[k] * J, J);
  return out;
}

}  // namespace detail

// Frozen per-step data shared by training and tail freezing.
struct StepSlice {
  double t = 0, dt = 0;
  MatrixXd X;            // B x n
  MatrixXd dW;           // B x d
  VectorXd dWtil;        // B
  MatrixXd comp_counts;  // B x J: N_j - lambda_j dt
  MatrixXd u_inputs;     // (B*J) x (n+1)
};

// Quadrature weights and compensation constants entering F.
struct JumpTerms {
  VectorXd gamma_lambda;  // gamma_j * lambda_j per cell
  VectorXd lambda;        // lambda_j
  std::vector<double> reps;
  double dgamma0 = 0;
  double sqrt_sigma_eps = 0;
  int zeta = 0;
};

inline JumpTerms make_jump_terms(const JumpPartition& part, const ModelCoefficients& coeffs) {
  JumpTerms jt;
  const auto J = static_cast<Eigen::Index>(part.size());
  jt.gamma_lambda.resize(J);
  jt.lambda.resize(J);
  jt.reps.resize(part.size());
  for (Eigen::Index j = 0; j < J; ++j) {
    jt.gamma_lambda[j] = part.cells[j].gamma_avg * part.cells[j].mass;
    jt.lambda[j] = part.cells[j].mass;
    jt.reps[j] = part.cells[j].rep;
  }
  jt.dgamma0 = coeffs.jump.dgamma0();
  jt.sqrt_sigma_eps =
      part.epsilon > 0.0 ? std::sqrt(truncation_variance(*part.measure, part.epsilon)) : 0.0;
  jt.zeta = coeffs.zeta;
  return jt;
}

// Output of one batched forward sweep of the four nets at a step.
struct StepEval {
  VectorXd Y;     // B
  MatrixXd Z;     // B x d
  VectorXd Wn;    // B (zero when zeta = 0)
  MatrixXd U;     // B x J
  VectorXd p;     // nonlocal f-argument per sample
  VectorXd fval;  // f(t, x, Y, Z, p)
  VectorXd F;     // residual term F per sample
  Mlp::Cache cy, cz, cw, cu;
};

// Evaluates F(t_i, x, nets) = f(...) dt - Z dW - zeta W dW~ - sum_j U_j Ntil_j
// for a whole slice. Caches are filled when want_cache is set.
inline StepEval eval_step(const StepNetworks& nets, const StepSlice& s, const JumpTerms& jt,
                          const Driver& driver, bool want_cache) {
  StepEval ev;
  const Eigen::Index B = s.X.rows();
  const Eigen::Index J = jt.lambda.size();
  ev.Y = nets.y.forward(s.X, want_cache ? &ev.cy : nullptr).col(0);
  ev.Z = nets.z.forward(s.X, want_cache ? &ev.cz : nullptr);
  if (nets.has_w)
    ev.Wn = nets.w.forward(s.X, want_cache ? &ev.cw : nullptr).col(0);
  else
    ev.Wn = VectorXd::Zero(B);
  MatrixXd u_flat = nets.u.forward(s.u_inputs, want_cache ? &ev.cu : nullptr);
  ev.U = Eigen::Map<const MatrixXd>(u_flat.data(), J, B).transpose();  // col-major reshape
  ev.p = ev.U * jt.gamma_lambda;
  if (jt.zeta) ev.p += jt.zeta * jt.dgamma0 * jt.sqrt_sigma_eps * ev.Wn;
  ev.fval.resize(B);
  for (Eigen::Index pth = 0; pth < B; ++pth) {
    VectorXd x = s.X.row(pth).transpose();
    VectorXd z = ev.Z.row(pth).transpose();
    ev.fval[pth] = driver.eval(s.t, x, ev.Y[pth], z, ev.p[pth]);
  }
  ev.F = ev.fval * s.dt - (ev.Z.array() * s.dW.array()).rowwise().sum().matrix() -
         (ev.U.array() * s.comp_counts.array()).rowwise().sum().matrix();
  if (jt.zeta) ev.F -= (ev.Wn.array() * s.dWtil.array()).matrix();
  return ev;
}

// Scalar-path variant of the residual term F (test surface).
inline double residual_F(const StepNetworks& nets, double t, double dt, const VectorXd& x,
                         const VectorXd& dW, double dWtil, const VectorXd& comp_counts,
                         const JumpTerms& jt, const Driver& driver) {
  StepSlice s;
  s.t = t;
  s.dt = dt;
  s.X = x.transpose();
  s.dW = dW.transpose();
  s.dWtil = VectorXd::Constant(1, dWtil);
  s.comp_counts = comp_counts.transpose();
  s.u_inputs = detail::build_u_inputs(s.X, jt.reps);
  return eval_step(nets, s, jt, driver, false).F[0];
}

// Empirical multi-step loss R_i: mean over paths of
// |Y_i(x) - (g(X_N) + tail) - F_i|^2 where tail holds the frozen later steps.
inline double loss_Ri(const StepNetworks& nets, const StepSlice& s, const VectorXd& target,
                      const JumpTerms& jt, const Driver& driver,
                      const std::vector<char>* valid = nullptr) {
  if (target.size() != s.X.rows())
    throw std::invalid_argument("loss_Ri: tail/slice size mismatch");
  StepEval ev = eval_step(nets, s, jt, driver, false);
  VectorXd resid = ev.Y - target - ev.F;
  if (!valid) return resid.squaredNorm() / static_cast<double>(resid.size());
  double acc = 0;
  int m = 0;
  for (Eigen::Index p = 0; p < resid.size(); ++p)
    if ((*valid)[p]) {
      acc += resid[p] * resid[p];
      ++m;
    }
  return m ? acc / m : 0.0;
}

// Gradients of all four regressors of one step.
struct StepGrads {
  Mlp::Grads y, z, w, u;

  void zero_like(const StepNetworks& nets) {
    y.zero_like(nets.y);
    z.zero_like(nets.z);
    u.zero_like(nets.u);
    if (nets.has_w) w.zero_like(nets.w);
  }
};

// Loss R_i on a slice plus exact reverse-mode parameter gradients.
// resid = Y - target - f dt + Z.dW + zeta W dW~ + sum_j U_j Ntil_j, so the
// cotangents carry both the direct noise couplings and the driver partials.
inline double loss_and_grads(const StepNetworks& nets, const StepSlice& s, const VectorXd& target,
                             const JumpTerms& jt, const Driver& driver, StepGrads& g) {
  const Eigen::Index B = s.X.rows();
  const Eigen::Index J = jt.lambda.size();
  StepEval ev = eval_step(nets, s, jt, driver, true);
  VectorXd resid = ev.Y - target - ev.F;
  double loss = resid.squaredNorm() / static_cast<double>(B);
  VectorXd r2 = (2.0 / static_cast<double>(B)) * resid;

  VectorXd fy(B), fp(B);
  MatrixXd fz(B, s.dW.cols());
  for (Eigen::Index p = 0; p < B; ++p) {
    VectorXd x = s.X.row(p).transpose();
    VectorXd z = ev.Z.row(p).transpose();
    fy[p] = driver.partial_y(s.t, x, ev.Y[p], z, ev.p[p]);
    fp[p] = driver.partial_p(s.t, x, ev.Y[p], z, ev.p[p]);
    fz.row(p) = driver.partial_z(s.t, x, ev.Y[p], z, ev.p[p]).transpose();
  }

  MatrixXd cot_y = (r2.array() * (1.0 - s.dt * fy.array())).matrix();
  MatrixXd cot_z = (s.dW - s.dt * fz).array().colwise() * r2.array();
  MatrixXd cot_u(B, J);
  for (Eigen::Index j = 0; j < J; ++j)
    cot_u.col(j) =
        (r2.array() * (s.comp_counts.col(j).array() - s.dt * fp.array() * jt.gamma_lambda[j]))
            .matrix();
  // U was reshaped from a (J x B) map of the flat output; flatten back
  MatrixXd cot_u_t = cot_u.transpose();
  MatrixXd cot_u_flat = Eigen::Map<MatrixXd>(cot_u_t.data(), B * J, 1);

  g.zero_like(nets);
  nets.y.backward(ev.cy, cot_y, g.y);
  nets.z.backward(ev.cz, cot_z, g.z);
  nets.u.backward(ev.cu, cot_u_flat, g.u);
  if (nets.has_w) {
    double c = jt.dgamma0 * jt.sqrt_sigma_eps;
    MatrixXd cot_w = (r2.array() * (s.dWtil.array() - s.dt * fp.array() * c)).matrix();
    nets.w.backward(ev.cw, cot_w, g.w);
  }
  return loss;
}

struct TrainedSolution {
  std::vector<StepNetworks> nets;  // i = 0..N-1
  std::function<double(const VectorXd&)> terminal;
  TimeGrid grid;
  JumpTerms jump_terms;
  int zeta = 0;
  SolverDiagnostics diagnostics;
  std::uint64_t fingerprint = 0;

  struct Eval {
    double y = 0;
    std::optional<VectorXd> z;
    std::optional<double> l;
    std::optional<VectorXd> u_at_reps;
  };

  Eval evaluate(int i, const VectorXd& x) const {
    if (i < 0 || i > grid.steps()) throw std::out_of_range("TrainedSolution::evaluate: bad index");
    Eval e;
    if (i == grid.steps()) {
      e.y = terminal(x);
      return e;
    }
    const StepNetworks& sn = nets[i];
    e.y = sn.y.eval(x)[0];
    e.z = sn.z.eval(x);
    if (sn.has_w) e.l = sn.w.eval(x)[0];
    VectorXd u(static_cast<Eigen::Index>(jump_terms.reps.size()));
    VectorXd in(x.size() + 1);
    in.head(x.size()) = x;
    for (std::size_t j = 0; j < jump_terms.reps.size(); ++j) {
      in[x.size()] = jump_terms.reps[j];
      u[static_cast<Eigen::Index>(j)] = sn.u.eval(in)[0];
    }
    e.u_at_reps = u;
    return e;
  }

  std::uint64_t param_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& sn : nets) {
      for (const Mlp* net : {&sn.y, &sn.z, &sn.w, &sn.u}) {
        for (const auto& w : net->W) h = fnv1a(w.data(), sizeof(double) * w.size(), h);
        for (const auto& b : net->bias) h = fnv1a(b.data(), sizeof(double) * b.size(), h);
      }
    }
    return h;
  }
};

class DeepBsdeSolver {
 public:
  DeepBsdeSolver(const ModelCoefficients& coeffs, const TimeGrid& grid,
                 const JumpPartition& part, VectorXd x0, SolverConfig cfg)
      : coeffs_(coeffs), grid_(grid), part_(part), x0_(std::move(x0)), cfg_(cfg) {
    if (!coeffs_.driver.valid()) throw std::invalid_argument("DeepBsdeSolver: missing driver");
    jt_ = make_jump_terms(part_, coeffs_);
    hidden_ = cfg_.hidden > 0 ? cfg_.hidden : 20 + coeffs_.state_dim;
  }

  // Algorithm: initialize Y_N = g, then for i = N-1..0 minimize R_i and
  // freeze the step into the tail.
  TrainedSolution run(const SplitStream& root) {
    const int N = grid_.steps();
    TrainedSolution sol;
    sol.terminal = coeffs_.terminal;
    sol.grid = grid_;
    sol.jump_terms = jt_;
    sol.zeta = coeffs_.zeta;
    sol.nets.resize(std::max(N, 0));
    sol.diagnostics.per_step.resize(std::max(N, 0));

    PathBatch paths = simulate_forward(coeffs_, grid_, part_, x0_, cfg_.batch,
                                       root.split("paths", 0), cfg_.threads);
    std::vector<StepSlice> slices = make_slices(paths);
    VectorXd tail = terminal_values(paths);

    SplitStream train_root = root.split("train", 0);
    for (int i = N - 1; i >= 0; --i) {
      if (cfg_.resample && i < N - 1) {
        paths = simulate_forward(coeffs_, grid_, part_, x0_, cfg_.batch,
                                 root.split("paths", static_cast<std::uint64_t>(N - i)),
                                 cfg_.threads);
        slices = make_slices(paths);
        tail = terminal_values(paths);
        for (int l = N - 1; l > i; --l)
          tail += eval_step(sol.nets[l], slices[l], jt_, coeffs_.driver, false).F;
      }
      StepNetworks nets = (i == N - 1) ? init_networks(train_root.split("init", i), tail)
                                       : sol.nets[i + 1];  // warm start
      sol.diagnostics.per_step[i] =
          train_step(nets, slices[i], tail, paths.valid, train_root.split("sgd", i));
      sol.nets[i] = std::move(nets);
      // freeze step i into the tail (telescoping update)
      if (i > 0 && !cfg_.resample)
        tail += eval_step(sol.nets[i], slices[i], jt_, coeffs_.driver, false).F;
    }
    sol.fingerprint = fnv1a(&paths.fingerprint, sizeof(paths.fingerprint), sol.param_hash());
    return sol;
  }

  // Exposed for tests: slices and terminal targets of a given cloud.
  std::vector<StepSlice> make_slices(const PathBatch& paths) const {
    const int N = grid_.steps();
    std::vector<StepSlice> out(N);
    for (int i = 0; i < N; ++i) {
      StepSlice& s = out[i];
      s.t = grid_.nodes[i];
      s.dt = grid_.dt(i);
      s.X = paths.states[i];
      s.dW = paths.increments.dW[i];
      s.dWtil = paths.increments.dWtil[i];
      s.comp_counts = paths.increments.counts[i];
      for (Eigen::Index j = 0; j < s.comp_counts.cols(); ++j)
        s.comp_counts.col(j).array() -= jt_.lambda[j] * s.dt;
      s.u_inputs = detail::build_u_inputs(s.X, jt_.reps);
    }
    return out;
  }

  VectorXd terminal_values(const PathBatch& paths) const {
    VectorXd g(paths.batch());
    for (int p = 0; p < paths.batch(); ++p)
      g[p] = coeffs_.terminal(paths.states.back().row(p).transpose());
    return g;
  }

  const JumpTerms& jump_terms() const { return jt_; }

  StepNetworks init_networks(const SplitStream& stream, const VectorXd& targets) const {
    StepNetworks sn;
    SplitStream sy = stream.split("y", 0), sz = stream.split("z", 0), sw = stream.split("w", 0),
                su = stream.split("u", 0);
    int n = coeffs_.state_dim;
    sn.y = he_init(solver_widths(n, hidden_, 1, cfg_.layers), sy);
    sn.z = he_init(solver_widths(n, hidden_, coeffs_.bm_dim, cfg_.layers), sz);
    sn.u = he_init(solver_widths(n + 1, hidden_, 1, cfg_.layers), su);
    sn.has_w = coeffs_.zeta != 0;
    if (sn.has_w) sn.w = he_init(solver_widths(n, hidden_, 1, cfg_.layers), sw);
    // cold start: point the y head at the target mean
    sn.y.bias.back()[0] = targets.size() ? targets.mean() : 0.0;
    return sn;
  }

  // Adam over minibatches; keeps the parameters with the best validation loss.
  StepHistory train_step(StepNetworks& nets, const StepSlice& slice, const VectorXd& tail,
                         const std::vector<char>& valid, SplitStream stream) const {
    const int B = static_cast<int>(slice.X.rows());
    std::vector<int> train_idx, val_idx;
    int n_val = static_cast<int>(cfg_.val_fraction * B);
    for (int p = 0; p < B; ++p) {
      if (!valid[p]) continue;
      if (p >= B - n_val)
        val_idx.push_back(p);
      else
        train_idx.push_back(p);
    }
    if (train_idx.empty()) throw std::runtime_error("train_step: no valid training paths");
    if (val_idx.empty()) val_idx = train_idx;

    StepHistory hist;
    hist.initial_loss = subset_loss(nets, slice, tail, train_idx);

    AdamState ay, az, aw, au;
    ay.lr = az.lr = aw.lr = au.lr = cfg_.lr;
    ay.init(nets.y);
    az.init(nets.z);
    au.init(nets.u);
    if (nets.has_w) aw.init(nets.w);

    StepNetworks initial = nets;
    StepNetworks best = nets;
    double best_val = subset_loss(nets, slice, tail, val_idx);

    std::vector<int> order = train_idx;
    const Eigen::Index J = jt_.lambda.size();
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      double lr = cfg_.lr;
      if (cfg_.cosine_decay)
        lr *= 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / cfg_.epochs));
      // deterministic Fisher-Yates reshuffle
      for (std::size_t k = order.size(); k > 1; --k) {
        std::size_t r = static_cast<std::size_t>(stream.next_u64() % k);
        std::swap(order[k - 1], order[r]);
      }
      double epoch_loss = 0;
      int n_batches = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg_.minibatch) {
        std::vector<int> mb(order.begin() + start,
                            order.begin() + std::min(order.size(), start + cfg_.minibatch));
        epoch_loss += sgd_minibatch(nets, slice, tail, mb, J, lr, ay, az, aw, au);
        ++n_batches;
      }
      hist.epoch_train_loss.push_back(epoch_loss / std::max(n_batches, 1));
      double vl = subset_loss(nets, slice, tail, val_idx);
      if (vl < best_val) {
        best_val = vl;
        best = nets;
      }
    }
    nets = best;
    hist.final_train_loss = subset_loss(nets, slice, tail, train_idx);
    // selection rule: never return parameters worse on the training batch
    // than the warm start they came from
    if (hist.final_train_loss > hist.initial_loss) {
      nets = initial;
      hist.final_train_loss = hist.initial_loss;
      best_val = subset_loss(nets, slice, tail, val_idx);
    }
    hist.best_val_loss = best_val;
    return hist;
  }

  double subset_loss(const StepNetworks& nets, const StepSlice& slice, const VectorXd& tail,
                     const std::vector<int>& idx) const {
    StepSlice sub = gather_slice(slice, idx);
    return loss_Ri(nets, sub, detail::gather(tail, idx), jt_, coeffs_.driver);
  }

  StepSlice gather_slice(const StepSlice& s, const std::vector<int>& idx) const {
    StepSlice sub;
    sub.t = s.t;
    sub.dt = s.dt;
    sub.X = detail::gather_rows(s.X, idx);
    sub.dW = detail::gather_rows(s.dW, idx);
    sub.dWtil = detail::gather(s.dWtil, idx);
    sub.comp_counts = detail::gather_rows(s.comp_counts, idx);
    sub.u_inputs = detail::gather_u_rows(s.u_inputs, idx, jt_.lambda.size());
    return sub;
  }

 private:
  double sgd_minibatch(StepNetworks& nets, const StepSlice& slice, const VectorXd& tail,
                       const std::vector<int>& mb, Eigen::Index /*J*/, double lr, AdamState& ay,
                       AdamState& az, AdamState& aw, AdamState& au) const {
    StepSlice s = gather_slice(slice, mb);
    VectorXd target = detail::gather(tail, mb);
    StepGrads g;
    double loss = loss_and_grads(nets, s, target, jt_, coeffs_.driver, g);
    ay.step(nets.y, g.y, lr);
    az.step(nets.z, g.z, lr);
    au.step(nets.u, g.u, lr);
    if (nets.has_w) aw.step(nets.w, g.w, lr);
    return loss;
  }

  ModelCoefficients coeffs_;
  TimeGrid grid_;
  JumpPartition part_;
  VectorXd x0_;
  SolverConfig cfg_;
  JumpTerms jt_;
  int hidden_ = 21;
};

inline TrainedSolution run_algorithm(const ModelCoefficients& coeffs, const TimeGrid& grid,
                                     const JumpPartition& part, const VectorXd& x0,
                                     const SolverConfig& cfg, const SplitStream& root) {
  DeepBsdeSolver solver(coeffs, grid, part, x0, cfg);
  return solver.run(root);
}

}  // namespace jumpbsde
