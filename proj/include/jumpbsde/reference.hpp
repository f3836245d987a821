// Oracle and diagnostics layer: L2 projections realized by polynomial ridge
// regression, the least-squares intermediate scheme, nonlocal-operator
// quadrature for manufactured solutions, projection-error estimators, and the
// coupled small-jump strong-rate experiment.
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "jumpbsde/common.hpp"
#include "jumpbsde/paths.hpp"
#include "jumpbsde/quadrature.hpp"
#include "jumpbsde/solver.hpp"

namespace jumpbsde {

// Monomial basis of total degree <= degree in dim variables (dim <= 3).
struct PolyBasis {
  int dim = 1, degree = 3;
  std::vector<std::vector<int>> exponents;

  static PolyBasis make(int dim, int degree) {
    if (dim < 1 || dim > 3) throw std::invalid_argument("PolyBasis: dim must be in [1,3]");
    PolyBasis b;
    b.dim = dim;
    b.degree = degree;
    std::vector<int> e(dim, 0);
    std::function<void(int, int)> rec = [&](int pos, int left) {
      if (pos == dim) {
        b.exponents.push_back(e);
        return;
      }
      for (int k = 0; k <= left; ++k) {
        e[pos] = k;
        rec(pos + 1, left - k);
      }
      e[pos] = 0;
    };
    rec(0, degree);
    return b;
  }

  int size() const { return static_cast<int>(exponents.size()); }

  RowVectorXd row(const VectorXd& x) const {
    RowVectorXd phi(size());
    for (int k = 0; k < size(); ++k) {
      double v = 1.0;
      for (int d = 0; d < dim; ++d)
        for (int p = 0; p < exponents[k][d]; ++p) v *= x[d];
      phi[k] = v;
    }
    return phi;
  }

  MatrixXd features(const MatrixXd& X) const {
    MatrixXd Phi(X.rows(), size());
    for (Eigen::Index r = 0; r < X.rows(); ++r) Phi.row(r) = row(X.row(r).transpose());
    return Phi;
  }
};

// Global polynomial ridge regression via normal equations. The factorization
// is shared across right-hand sides so the intermediate scheme can fit one
// target per jump cell cheaply.
class BasisRegression {
 public:
  BasisRegression(PolyBasis basis, double ridge = 1e-8) : basis_(std::move(basis)), ridge_(ridge) {}

  void prepare(const MatrixXd& X) {
    Phi_ = basis_.features(X);
    MatrixXd G = Phi_.transpose() * Phi_;
    G.diagonal().array() += ridge_ * static_cast<double>(X.rows());
    llt_.compute(G);
    if (llt_.info() != Eigen::Success) {
      // ridge fallback with a heavier penalty
      ridge_flagged_ = true;
      G.diagonal().array() += 1e-4 * G.diagonal().mean();
      llt_.compute(G);
    }
    G_ = G;
  }

  VectorXd fit(const VectorXd& y) const {
    VectorXd rhs = Phi_.transpose() * y;
    VectorXd c = llt_.solve(rhs);
    // one refinement pass; normal equations must hold to ~1e-10 of |rhs|
    VectorXd r = rhs - G_ * c;
    c += llt_.solve(r);
    if ((rhs - G_ * c).norm() > 1e-10 * std::max(rhs.norm(), 1e-30))
      throw std::runtime_error("BasisRegression: normal equations not solved to tolerance");
    return c;
  }

  double predict(const VectorXd& coef, const VectorXd& x) const { return basis_.row(x).dot(coef); }

  VectorXd predict_all(const VectorXd& coef) const { return Phi_ * coef; }

  const PolyBasis& basis() const { return basis_; }
  bool ridge_flagged() const { return ridge_flagged_; }

 private:
  PolyBasis basis_;
  double ridge_;
  MatrixXd Phi_, G_;
  Eigen::LLT<MatrixXd> llt_;
  bool ridge_flagged_ = false;
};

// pi_{[s,t]}(Z) estimate: regress the per-path time averages of Z on the
// anchor state at s. Returns fitted coefficients plus the regression object.
struct ProjectionFit {
  std::shared_ptr<BasisRegression> reg;
  VectorXd coef;

  double operator()(const VectorXd& x) const { return reg->predict(coef, x); }
};

inline ProjectionFit project_time(const MatrixXd& anchors, const VectorXd& time_avg,
                                  int degree = 3) {
  auto reg = std::make_shared<BasisRegression>(PolyBasis::make(static_cast<int>(anchors.cols()), degree));
  reg->prepare(anchors);
  return ProjectionFit{reg, reg->fit(time_avg)};
}

// pi_{[s,t],K}(U): same machinery, the caller supplies the per-path
// (1/((t-s) nu(K))) int int U nu(de) dr values.
inline ProjectionFit project_cell(const MatrixXd& anchors, const VectorXd& cell_time_avg,
                                  int degree = 3) {
  return project_time(anchors, cell_time_avg, degree);
}

// ---------------------------------------------------------------------------
// Intermediate least-squares scheme
// ---------------------------------------------------------------------------

// Per-step fitted representations v, zbar, lbar, ubar_j of the backward
// projection scheme; the implicit v equation is solved pointwise on demand.
struct IntermediateStep {
  std::shared_ptr<BasisRegression> reg;
  VectorXd ev_coef;             // E_i[V_{i+1}]
  MatrixXd z_coef;              // one column per Brownian component
  VectorXd l_coef;              // compensating-Brownian control (zeta = 1)
  MatrixXd u_coef;              // one column per jump cell
  double t = 0, dt = 0;
  bool fixed_point_converged = true;
  double fixed_point_residual = 0;
};

struct IntermediateSolution {
  std::vector<IntermediateStep> steps;
  double v0 = 0;
  double v0_stderr = 0;

  double v_hat(int i, const VectorXd& x, const Driver& driver, const JumpTerms& jt) const;
  VectorXd z_bar(int i, const VectorXd& x) const {
    const auto& s = steps[i];
    VectorXd z(s.z_coef.cols());
    for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = s.reg->predict(s.z_coef.col(k), x);
    return z;
  }
  double l_bar(int i, const VectorXd& x) const {
    return steps[i].l_coef.size() ? steps[i].reg->predict(steps[i].l_coef, x) : 0.0;
  }
  double u_bar(int i, int j, const VectorXd& x) const {
    return steps[i].reg->predict(steps[i].u_coef.col(j), x);
  }
  double p_bar(int i, const VectorXd& x, const JumpTerms& jt) const {
    double p = 0;
    for (Eigen::Index j = 0; j < jt.gamma_lambda.size(); ++j)
      p += u_bar(i, static_cast<int>(j), x) * jt.gamma_lambda[j];
    if (jt.zeta) p += jt.zeta * jt.dgamma0 * jt.sqrt_sigma_eps * l_bar(i, x);
    return p;
  }
};

inline double IntermediateSolution::v_hat(int i, const VectorXd& x, const Driver& driver,
                                          const JumpTerms& jt) const {
  const auto& s = steps[i];
  double ev = s.reg->predict(s.ev_coef, x);
  VectorXd z = z_bar(i, x);
  double p = p_bar(i, x, jt);
  double v = ev;
  for (int it = 0; it < 50; ++it) {
    double next = ev + driver.eval(s.t, x, v, z, p) * s.dt;
    if (std::fabs(next - v) < 1e-8 * (1.0 + std::fabs(next))) return next;
    v = next;
  }
  throw std::runtime_error("IntermediateSolution: fixed point not converged in 50 iterations");
}

// Solves the projection scheme by least-squares Monte Carlo on a given path
// cloud. With nets, the auxiliary accumulator V uses the trained regressors;
// without, the scheme is self-referential (pure LSMC).
inline IntermediateSolution solve_intermediate(const ModelCoefficients& coeffs,
                                               const TimeGrid& grid, const JumpPartition& part,
                                               const PathBatch& paths,
                                               const TrainedSolution* nets = nullptr,
                                               int degree = 3) {
  if (coeffs.state_dim > 3)
    throw std::invalid_argument("solve_intermediate: basis regression limited to state_dim <= 3");
  const int N = grid.steps();
  const int B = paths.batch();
  JumpTerms jt = make_jump_terms(part, coeffs);
  const Eigen::Index J = jt.lambda.size();
  const Driver& driver = coeffs.driver;

  // Delta t guard: Picard contraction needs C_f * dt < 1.
  {
    double cf = 0.0;
    VectorXd x0 = paths.states[0].row(0).transpose();
    VectorXd z0 = VectorXd::Zero(coeffs.bm_dim);
    for (double y : {-1.0, 0.0, 1.0})
      cf = std::max(cf, std::fabs(driver.partial_y(0.0, x0, y, z0, 0.0)));
    if (cf > 0 && grid.max_dt() > 0.5 / cf)
      throw std::invalid_argument("solve_intermediate: dt too large for Picard contraction");
  }

  IntermediateSolution sol;
  sol.steps.resize(N);

  // running V_{i+1} per path
  VectorXd V(B);
  for (int p = 0; p < B; ++p) V[p] = coeffs.terminal(paths.states[N].row(p).transpose());

  for (int i = N - 1; i >= 0; --i) {
    IntermediateStep& st = sol.steps[i];
    st.t = grid.nodes[i];
    st.dt = grid.dt(i);
    st.reg = std::make_shared<BasisRegression>(PolyBasis::make(coeffs.state_dim, degree));
    st.reg->prepare(paths.states[i]);
    st.ev_coef = st.reg->fit(V);
    st.z_coef.resize(st.reg->basis().size(), coeffs.bm_dim);
    for (int k = 0; k < coeffs.bm_dim; ++k) {
      VectorXd tgt =
          (V.array() * paths.increments.dW[i].col(k).array() / st.dt).matrix();
      st.z_coef.col(k) = st.reg->fit(tgt);
    }
    if (coeffs.zeta) {
      VectorXd tgt = (V.array() * paths.increments.dWtil[i].array() / st.dt).matrix();
      st.l_coef = st.reg->fit(tgt);
    }
    st.u_coef.resize(st.reg->basis().size(), J);
    for (Eigen::Index j = 0; j < J; ++j) {
      VectorXd ntil = paths.increments.counts[i].col(j).array() - jt.lambda[j] * st.dt;
      VectorXd tgt = (V.array() * ntil.array() / (st.dt * jt.lambda[j])).matrix();
      st.u_coef.col(j) = st.reg->fit(tgt);
    }

    // advance the accumulator V_i = V_{i+1} + f(t_i, ...) dt_i
    for (int p = 0; p < B; ++p) {
      VectorXd x = paths.states[i].row(p).transpose();
      double y, pval;
      VectorXd z;
      if (nets) {
        auto e = nets->evaluate(i, x);
        y = e.y;
        z = *e.z;
        pval = e.u_at_reps->dot(jt.gamma_lambda);
        if (jt.zeta && e.l) pval += jt.zeta * jt.dgamma0 * jt.sqrt_sigma_eps * *e.l;
      } else {
        y = sol.v_hat(i, x, driver, jt);
        z = sol.z_bar(i, x);
        pval = sol.p_bar(i, x, jt);
      }
      V[p] += driver.eval(st.t, x, y, z, pval) * st.dt;
    }
  }

  // V at time 0: all paths share x0, so V_0 is the plain mean with its
  // Monte Carlo standard error.
  MeanStderr ms = mean_stderr(std::vector<double>(V.data(), V.data() + V.size()));
  sol.v0 = ms.mean;
  sol.v0_stderr = ms.stderr_;
  return sol;
}

// ---------------------------------------------------------------------------
// Nonlocal operators (1D state, 1D jumps) for manufactured solutions
// ---------------------------------------------------------------------------

struct Smooth1D {
  std::function<double(double t, double x)> u;
  std::function<double(double, double)> du_dt;
  std::function<double(double, double)> du_dx;
  std::function<double(double, double)> d2u_dx2;
};

namespace detail {
inline double fd_d1(const std::function<double(double)>& u, double x) {
  double h = 1e-4 * (1.0 + std::fabs(x));
  return (u(x + h) - u(x - h)) / (2.0 * h);
}
inline double fd_d2(const std::function<double(double)>& u, double x) {
  double h = 1e-4 * (1.0 + std::fabs(x));
  return (u(x + h) - 2.0 * u(x) + u(x - h)) / (h * h);
}
}  // namespace detail

// int_{|e|>eps_lo} [u(x + beta(x,e)) - u(x) - u'(x) beta(x,e)] nu(de).
// Below taylor_cut the integrand is replaced by its second-order Taylor form
// (1/2) u''(x) (D_e beta)^2 e^2, which absorbs both the singularity at 0 and
// the cancellation noise of the direct form.
inline double apply_nonlocal_J(const std::function<double(double)>& u, double x,
                               const LevyMeasure& m,
                               const std::function<double(double, double)>& beta,
                               double eps_lo = 0.0, double taylor_cut = 1e-2,
                               std::function<double(double)> du = nullptr,
                               std::function<double(double)> d2u = nullptr) {
  double dux = du ? du(x) : detail::fd_d1(u, x);
  double cut = std::max(eps_lo, std::min(taylor_cut, m.r_max()));
  double total = 0.0;
  if (cut > eps_lo) {
    double d2 = d2u ? d2u(x) : detail::fd_d2(u, x);
    double hb = 1e-6 * (1.0 + std::fabs(x));
    double dbeta0 = (beta(x, hb) - beta(x, -hb)) / (2.0 * hb);
    double m2 = m.radial_moment(eps_lo, cut, 1, 2) + m.radial_moment(eps_lo, cut, -1, 2);
    total += 0.5 * d2 * dbeta0 * dbeta0 * m2;
  }
  for (int sign : {1, -1}) {
    if (m.r_max() <= cut) break;
    auto f = [&](double s) {
      double r = std::exp(s);
      double e = sign * r;
      double bx = beta(x, e);
      return (u(x + bx) - u(x) - dux * bx) * m.density(e) * r;
    };
    total += integrate(f, std::log(cut), std::log(m.r_max()), 1e-9);
  }
  return total;
}

// B^eps[u](x) = int_{|e|>eps} [u(x+beta(x,e)) - u(x)] gamma(e) nu(de)
//              + zeta sigma_eps^T Dgamma(0) u'(x),  sigma_eps = D_e beta(x,0) Sigma^{1/2}.
inline double apply_nonlocal_B(const std::function<double(double)>& u, double x,
                               const LevyMeasure& m,
                               const std::function<double(double, double)>& beta,
                               const std::function<double(double)>& gamma, double eps, int zeta,
                               double sqrt_sigma_eps, double dgamma0,
                               std::function<double(double)> du = nullptr) {
  double total = 0.0;
  for (int sign : {1, -1}) {
    if (m.r_max() <= eps) break;
    auto f = [&](double s) {
      double r = std::exp(s);
      double e = sign * r;
      return (u(x + beta(x, e)) - u(x)) * gamma(e) * m.density(e) * r;
    };
    total += integrate(f, std::log(eps), std::log(m.r_max()), 1e-9);
  }
  if (zeta) {
    double hb = 1e-6 * (1.0 + std::fabs(x));
    double dbeta0 = (beta(x, hb) - beta(x, -hb)) / (2.0 * hb);
    double dux = du ? du(x) : detail::fd_d1(u, x);
    total += zeta * dbeta0 * sqrt_sigma_eps * dgamma0 * dux;
  }
  return total;
}

// Full generator Ltilde^eps[u](t,x) of the compensated-truncation equation.
struct Generator1D {
  std::shared_ptr<const LevyMeasure> measure;
  std::function<double(double x)> b;
  std::function<double(double x)> sigma;
  std::function<double(double x, double e)> beta;
  int zeta = 0;
  double eps = 0.0;  // truncation; 0 means the full operator
  double taylor_cut = 1e-2;

  double apply(const Smooth1D& u, double t, double x) const {
    auto ux = [&](double xx) { return u.u(t, xx); };
    auto dux = [&](double xx) { return u.du_dx(t, xx); };
    auto d2ux = [&](double xx) { return u.d2u_dx2(t, xx); };
    double sig = sigma(x);
    double diff = sig * sig;
    if (zeta && eps > 0.0) {
      double hb = 1e-6 * (1.0 + std::fabs(x));
      double dbeta0 = (beta(x, hb) - beta(x, -hb)) / (2.0 * hb);
      diff += dbeta0 * dbeta0 * truncation_variance(*measure, eps);
    }
    return b(x) * u.du_dx(t, x) + 0.5 * diff * u.d2u_dx2(t, x) +
           apply_nonlocal_J(ux, x, *measure, beta, eps, std::max(eps, taylor_cut), dux, d2ux);
  }
};

// Manufactured driver: f(t,x,y,z,p) = h(t,x) + kappa sin(y) with
// h = -(du*/dt + L[u*]) - kappa sin(u*), so u* solves the equation exactly.
// h is memoized: the solver calls f on a fixed path cloud, so (t,x) repeat.
class ManufacturedDriver {
 public:
  ManufacturedDriver(Smooth1D ustar, Generator1D gen, double kappa = 0.5)
      : ustar_(std::move(ustar)), gen_(std::move(gen)), kappa_(kappa),
        cache_(std::make_shared<Cache>()) {}

  double h(double t, double x) const {
    std::pair<double, double> key{t, x};
    {
      std::lock_guard<std::mutex> lk(cache_->mu);
      auto it = cache_->map.find(key);
      if (it != cache_->map.end()) return it->second;
    }
    double val = -(ustar_.du_dt(t, x) + gen_.apply(ustar_, t, x)) - kappa_ * std::sin(ustar_.u(t, x));
    std::lock_guard<std::mutex> lk(cache_->mu);
    cache_->map[key] = val;
    return val;
  }

  Driver driver() const {
    Driver d;
    auto self = std::make_shared<ManufacturedDriver>(*this);
    d.f = [self](double t, const VectorXd& x, double y, const VectorXd&, double) {
      return self->h(t, x[0]) + self->kappa_ * std::sin(y);
    };
    d.df_dy = [self](double, const VectorXd&, double y, const VectorXd&, double) {
      return self->kappa_ * std::cos(y);
    };
    d.df_dz = [](double, const VectorXd&, double, const VectorXd& z, double) {
      return VectorXd::Zero(z.size()).eval();
    };
    d.df_dp = [](double, const VectorXd&, double, const VectorXd&, double) { return 0.0; };
    return d;
  }

  // residual of u* in the equation; 0 up to quadrature tolerance by design
  double pde_residual(double t, double x) const {
    return ustar_.du_dt(t, x) + gen_.apply(ustar_, t, x) + h(t, x) +
           kappa_ * std::sin(ustar_.u(t, x));
  }

  double kappa() const { return kappa_; }

 private:
  struct Cache {
    std::map<std::pair<double, double>, double> map;
    std::mutex mu;
  };

  Smooth1D ustar_;
  Generator1D gen_;
  double kappa_;
  std::shared_ptr<Cache> cache_;  // shared by copies so memoization survives
};

// ---------------------------------------------------------------------------
// Projection error estimators
// ---------------------------------------------------------------------------

struct ProjErrorEstimate {
  double value = 0;
  double stderr_ = 0;
};

// R^2_Z(dt) for a scalar process given on a fine subgrid (sub steps per coarse
// step). anchors holds the conditioning state at each coarse node; the
// projection is realized by polynomial regression on the anchor.
inline ProjErrorEstimate projection_error_time(const MatrixXd& z_fine, const MatrixXd& anchors,
                                               const TimeGrid& grid, int sub, int degree = 3) {
  const int B = static_cast<int>(z_fine.rows());
  const int N = grid.steps();
  if (z_fine.cols() != static_cast<Eigen::Index>(N) * sub + 1)
    throw std::invalid_argument("projection_error_time: fine grid shape mismatch");
  VectorXd per_path = VectorXd::Zero(B);
  for (int i = 0; i < N; ++i) {
    double dt_sub = grid.dt(i) / sub;
    // per-path time average over the coarse interval (left-rule on sub cells)
    VectorXd avg = VectorXd::Zero(B);
    for (int k = 0; k < sub; ++k) avg += z_fine.col(i * sub + k);
    avg /= static_cast<double>(sub);
    ProjectionFit fit = project_time(anchors.col(i), avg, degree);
    VectorXd pi_vals = fit.reg->predict_all(fit.coef);
    for (int k = 0; k < sub; ++k) {
      VectorXd diff = z_fine.col(i * sub + k) - pi_vals;
      per_path += dt_sub * diff.array().square().matrix();
    }
  }
  auto ms = mean_stderr(std::vector<double>(per_path.data(), per_path.data() + B));
  return {ms.mean, ms.stderr_};
}

// R^2_U(dt,h) with the time variable frozen at the left node: measures the
// cell-quadrature part. U is a closed-form function u(t, x, e); the tail-cell
// share is reported separately.
struct CellProjError {
  double value = 0;
  double tail_share = 0;
};

inline CellProjError projection_error_cells(
    const std::function<double(double t, double x, double e)>& U, const PathBatch& paths,
    const TimeGrid& grid, const JumpPartition& part) {
  const int B = paths.batch();
  const int N = grid.steps();
  const LevyMeasure& m = *part.measure;
  double total = 0, tail = 0;
  for (int i = 0; i < N; ++i) {
    double t = grid.nodes[i];
    for (int p = 0; p < B; ++p) {
      double x = paths.states[i](p, 0);
      for (const auto& c : part.cells) {
        auto udens = [&](double r) { return U(t, x, c.sign * r) * m.density(c.sign * r); };
        double ubar = integrate(udens, c.a, c.b, 1e-8) / c.mass;
        auto u2dens = [&](double r) {
          double dfe = U(t, x, c.sign * r) - ubar;
          return dfe * dfe * m.density(c.sign * r);
        };
        double cell = grid.dt(i) * integrate(u2dens, c.a, c.b, 1e-8);
        total += cell;
        if (c.tail) tail += cell;
      }
    }
  }
  total /= B;
  tail /= B;
  return {total, total > 0 ? tail / total : 0.0};
}

// ---------------------------------------------------------------------------
// Coupled small-jump strong-rate experiment
// ---------------------------------------------------------------------------

struct RateRow {
  double eps = 0;
  double sigma_eps2 = 0;
  double error = 0;   // E|X_T^{eps_ref} - X_T^{eps}|^2
  double stderr_ = 0;
  bool flagged = false;  // std error > 25% of the estimate
};

struct RateResult {
  std::vector<RateRow> rows;
  double slope = 0;  // log error vs log sigma_eps^2
};

// All epsilons share the Brownian draws, the compensating Brownian draws, and
// one jump realization truncated at eps_ref; the eps-path just filters out
// |e| <= eps. Assumes an odd-in-e beta with symmetric nu (zero compensator)
// unless an exact compensator is supplied on coeffs.jump.
inline RateResult smalljump_rate_experiment(const ModelCoefficients& coeffs,
                                            std::shared_ptr<const LevyMeasure> measure,
                                            const std::vector<double>& epsilons, double eps_ref,
                                            double T, int N, int batch, const SplitStream& root,
                                            int threads = 1) {
  for (double e : epsilons)
    if (!(eps_ref < e))
      throw std::invalid_argument("smalljump_rate_experiment: eps_ref must be < all epsilons");
  const LevyMeasure& m = *measure;
  const int K = static_cast<int>(epsilons.size());
  const double dt = T / N, sdt = std::sqrt(dt);
  std::vector<double> sqrt_sig(K + 1);
  std::vector<double> sig2(K);
  for (int k = 0; k < K; ++k) {
    sig2[k] = truncation_variance(m, epsilons[k]);
    sqrt_sig[k] = std::sqrt(sig2[k]);
  }
  sqrt_sig[K] = std::sqrt(truncation_variance(m, eps_ref));

  double mass_pos = m.mass(eps_ref, m.r_max(), 1);
  double mass_neg = m.mass(eps_ref, m.r_max(), -1);
  double lam = mass_pos + mass_neg;

  std::vector<std::vector<double>> sq_err(K, std::vector<double>(batch, 0.0));
  parallel_for(batch, threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t p = lo; p < hi; ++p) {
      SplitStream s = root.split("rate", p);
      std::vector<VectorXd> x(K + 1, VectorXd::Zero(coeffs.state_dim));  // last = reference
      for (int i = 0; i < N; ++i) {
        VectorXd dW(coeffs.bm_dim);
        for (int c = 0; c < coeffs.bm_dim; ++c) dW[c] = sdt * s.normal();
        double dWt = sdt * s.normal();
        std::uint64_t nj = s.poisson(lam * dt);
        std::vector<double> jumps(nj);
        for (auto& e : jumps) {
          int sign = (s.uniform() * lam < mass_pos) ? 1 : -1;
          e = sign * m.invert_mass(eps_ref, m.r_max(), sign, s.uniform());
        }
        for (int k = 0; k <= K; ++k) {
          double cut = (k == K) ? eps_ref : epsilons[k];
          VectorXd& xs = x[k];
          VectorXd next = xs + coeffs.b(xs) * dt + coeffs.sigma(xs) * dW;
          if (coeffs.zeta) next += coeffs.jump.dbeta0(xs) * (sqrt_sig[k] * dWt);
          for (double e : jumps)
            if (std::fabs(e) > cut) next += coeffs.jump.beta(xs, e);
          xs = next;
        }
      }
      for (int k = 0; k < K; ++k) sq_err[k][p] = (x[k] - x[K]).squaredNorm();
    }
  });

  RateResult out;
  std::vector<double> lx, ly;
  for (int k = 0; k < K; ++k) {
    auto ms = mean_stderr(sq_err[k]);
    RateRow row{epsilons[k], sig2[k], ms.mean, ms.stderr_, ms.stderr_ > 0.25 * ms.mean};
    out.rows.push_back(row);
    if (row.error > 0) {
      lx.push_back(std::log(row.sigma_eps2));
      ly.push_back(std::log(row.error));
    }
  }
  if (lx.size() >= 2) out.slope = fit_line(lx, ly).slope;
  return out;
}

}  // namespace jumpbsde
