#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "jumpbsde/reference.hpp"

namespace jumpbsde {
namespace {

std::shared_ptr<LevyMeasure> alpha_half() {
  return std::make_shared<LevyMeasure>(power_law_measure(1.0, 0.5, 1.0));
}

JumpPartition no_jumps() {
  JumpPartition p;
  p.measure = alpha_half();
  p.total_mass = 0.0;
  return p;
}

ModelCoefficients diffusion_model(double sig, std::function<double(const VectorXd&)> g) {
  ModelCoefficients c;
  c.state_dim = 1;
  c.bm_dim = 1;
  c.b = [](const VectorXd&) { return VectorXd::Zero(1).eval(); };
  c.sigma = [sig](const VectorXd&) { return MatrixXd::Constant(1, 1, sig).eval(); };
  c.jump.beta = [](const VectorXd&, double e) { return VectorXd::Constant(1, e).eval(); };
  c.jump.gamma = [](double e) { return e; };
  c.driver = zero_driver();
  c.terminal = std::move(g);
  return c;
}

TEST(PolyBasis, SizesAndValues) {
  auto b1 = PolyBasis::make(1, 3);
  EXPECT_EQ(b1.size(), 4);
  auto b2 = PolyBasis::make(2, 2);
  EXPECT_EQ(b2.size(), 6);  // 1, y, y^2, x, xy, x^2
  VectorXd x(1);
  x << 2.0;
  RowVectorXd phi = b1.row(x);
  // monomials of x up to degree 3 in some fixed order; the set must be {1,2,4,8}
  std::vector<double> vals(phi.data(), phi.data() + phi.size());
  std::sort(vals.begin(), vals.end());
  EXPECT_DOUBLE_EQ(vals[0], 1.0);
  EXPECT_DOUBLE_EQ(vals[3], 8.0);
  EXPECT_THROW(PolyBasis::make(4, 2), std::invalid_argument);
}

TEST(BasisRegression, RecoversCubicExactly) {
  SplitStream s(11);
  MatrixXd X(200, 1);
  VectorXd y(200);
  for (int r = 0; r < 200; ++r) {
    X(r, 0) = 2.0 * s.normal();
    double x = X(r, 0);
    y[r] = 1.0 - 2.0 * x + 0.5 * x * x * x;
  }
  BasisRegression reg(PolyBasis::make(1, 3), 1e-10);
  reg.prepare(X);
  VectorXd c = reg.fit(y);
  for (int r = 0; r < 10; ++r) {
    double x = X(r, 0);
    EXPECT_NEAR(reg.predict(c, X.row(r).transpose()), 1.0 - 2.0 * x + 0.5 * x * x * x, 1e-6);
  }
  EXPECT_FALSE(reg.ridge_flagged());
}

TEST(ProjectTime, ConditionalMeanOfNoisyLinear) {
  SplitStream s(13);
  MatrixXd anchors(20000, 1);
  VectorXd target(20000);
  for (int r = 0; r < 20000; ++r) {
    anchors(r, 0) = s.normal();
    target[r] = 3.0 * anchors(r, 0) + 0.5 + s.normal();  // E[target|x] = 3x + 0.5
  }
  ProjectionFit fit = project_time(anchors, target, 3);
  for (double x : {-1.0, 0.0, 1.0})
    EXPECT_NEAR(fit(VectorXd::Constant(1, x)), 3.0 * x + 0.5, 0.05);
}

TEST(SolveIntermediate, ConstantTerminalZeroDriver) {
  auto coeffs = diffusion_model(0.3, [](const VectorXd&) { return 4.0; });
  auto grid = TimeGrid::uniform(0.5, 2);
  auto part = no_jumps();
  SplitStream root(31);
  auto paths = simulate_forward(coeffs, grid, part, VectorXd::Zero(1), 20000, root);
  auto sol = solve_intermediate(coeffs, grid, part, paths);
  EXPECT_NEAR(sol.v0, 4.0, 1e-12);
  EXPECT_NEAR(sol.v0_stderr, 0.0, 1e-12);
  JumpTerms jt = make_jump_terms(part, coeffs);
  // V is constant so the martingale controls vanish in expectation;
  // se of mean(dW)/dt scales like 4 / sqrt(dt B) = 0.057 here
  EXPECT_NEAR(sol.z_bar(0, VectorXd::Zero(1))[0], 0.0, 0.25);
  EXPECT_NEAR(sol.v_hat(0, VectorXd::Zero(1), coeffs.driver, jt), 4.0, 0.05);
}

TEST(SolveIntermediate, LinearTerminalRecoversZ) {
  auto coeffs = diffusion_model(0.3, [](const VectorXd& x) { return x[0]; });
  auto grid = TimeGrid::uniform(0.5, 2);
  auto part = no_jumps();
  SplitStream root(37);
  auto paths = simulate_forward(coeffs, grid, part, VectorXd::Constant(1, 1.0), 100000, root, 4);
  auto sol = solve_intermediate(coeffs, grid, part, paths);
  EXPECT_NEAR(sol.v0, 1.0, 4.0 * sol.v0_stderr + 1e-9);
  EXPECT_NEAR(sol.z_bar(0, VectorXd::Constant(1, 1.0))[0], 0.3, 0.05);
  EXPECT_NEAR(sol.z_bar(1, VectorXd::Constant(1, 1.2))[0], 0.3, 0.08);
}

TEST(SolveIntermediate, DiscountingDriverImplicitStep) {
  // f = -y, g = 1: v(t) = e^{-(T-t)}, testable against v0
  auto coeffs = diffusion_model(0.2, [](const VectorXd&) { return 1.0; });
  coeffs.driver = Driver{};
  coeffs.driver.f = [](double, const VectorXd&, double y, const VectorXd&, double) { return -y; };
  auto grid = TimeGrid::uniform(0.5, 20);
  auto part = no_jumps();
  SplitStream root(41);
  auto paths = simulate_forward(coeffs, grid, part, VectorXd::Zero(1), 5000, root);
  auto sol = solve_intermediate(coeffs, grid, part, paths);
  EXPECT_NEAR(sol.v0, std::exp(-0.5), 0.01);
}

TEST(SolveIntermediate, DtGuardThrows) {
  auto coeffs = diffusion_model(0.2, [](const VectorXd&) { return 1.0; });
  coeffs.driver = Driver{};
  coeffs.driver.f = [](double, const VectorXd&, double y, const VectorXd&, double) {
    return -4.0 * y;
  };
  auto grid = TimeGrid::uniform(0.5, 1);  // dt = 0.5 > 0.5 / 4
  auto part = no_jumps();
  SplitStream root(2);
  auto paths = simulate_forward(coeffs, grid, part, VectorXd::Zero(1), 64, root);
  EXPECT_THROW(solve_intermediate(coeffs, grid, part, paths), std::invalid_argument);
}

TEST(SolveIntermediate, JumpControlRecoversCellRepresentative) {
  // u(t,x) = x so the jump control is U(x, e_j) = beta = e_j
  auto m = alpha_half();
  auto part = build_partition(m, 0.3, 0.4, 0.9, [](double e) { return e; });
  auto coeffs = diffusion_model(0.1, [](const VectorXd& x) { return x[0]; });
  coeffs.zeta = 1;
  auto grid = TimeGrid::uniform(0.4, 2);
  SplitStream root(53);
  auto paths = simulate_forward(coeffs, grid, part, VectorXd::Zero(1), 200000, root, 4);
  auto sol = solve_intermediate(coeffs, grid, part, paths);
  for (std::size_t j = 0; j < part.size(); ++j) {
    double lam = part.cells[j].mass;
    double se = 1.0 / std::sqrt(lam * grid.dt(0) * 200000.0);
    EXPECT_NEAR(sol.u_bar(0, static_cast<int>(j), VectorXd::Zero(1)), part.cells[j].rep,
                4.0 * se + 0.02)
        << "cell " << j;
  }
  // the compensating control approximates sqrt_sigma_eps * dbeta0 * u' = ss
  JumpTerms jt = make_jump_terms(part, coeffs);
  EXPECT_NEAR(sol.l_bar(0, VectorXd::Zero(1)), jt.sqrt_sigma_eps, 0.05);
}

TEST(ApplyNonlocalJ, QuadraticGivesFullSecondMoment) {
  // u = x^2, beta = e: integrand is exactly e^2, all x
  auto m = alpha_half();
  double m2 = 2.0 / 1.5;
  auto u = [](double x) { return x * x; };
  auto beta = [](double, double e) { return e; };
  for (double x : {-0.7, 0.0, 1.3}) {
    double J = apply_nonlocal_J(u, x, *m, beta);
    EXPECT_NEAR(J, m2, 1e-7) << "x=" << x;
  }
}

TEST(ApplyNonlocalJ, TaylorCutConsistency) {
  auto m = alpha_half();
  auto u = [](double x) { return std::exp(x); };
  auto beta = [](double, double e) { return e; };
  double a = apply_nonlocal_J(u, 0.3, *m, beta, 0.0, 1e-2);
  double b = apply_nonlocal_J(u, 0.3, *m, beta, 0.0, 1e-3);
  double c = apply_nonlocal_J(u, 0.3, *m, beta, 0.0, 1e-4);
  EXPECT_NEAR(a, b, 1e-6 * std::fabs(a));
  EXPECT_NEAR(a, c, 1e-5 * std::fabs(a));
}

TEST(ApplyNonlocalJ, TruncationRemovesSmallJumps) {
  auto m = alpha_half();
  auto u = [](double x) { return x * x; };
  auto beta = [](double, double e) { return e; };
  double eps = 0.1;
  double expect = 2.0 * (1.0 - std::pow(eps, 1.5)) / 1.5;  // int_{|e|>eps} e^2
  EXPECT_NEAR(apply_nonlocal_J(u, 0.2, *m, beta, eps, eps), expect, 1e-7);
}

TEST(ApplyNonlocalB, LinearClosedForm) {
  // u = x, beta = e, gamma = e: integrand e * gamma = e^2 over |e| > eps,
  // plus the zeta correction dbeta0 * ss * dgamma0 * u'
  auto m = alpha_half();
  auto u = [](double x) { return x; };
  auto beta = [](double, double e) { return e; };
  auto gamma = [](double e) { return e; };
  double eps = 0.1;
  double base = 2.0 * (1.0 - std::pow(eps, 1.5)) / 1.5;
  double ss = std::sqrt(truncation_variance(*m, eps));
  EXPECT_NEAR(apply_nonlocal_B(u, 0.4, *m, beta, gamma, eps, 0, ss, 1.0), base, 1e-7);
  EXPECT_NEAR(apply_nonlocal_B(u, 0.4, *m, beta, gamma, eps, 1, ss, 1.0), base + ss, 1e-6);
}

TEST(Generator1D, CompensatedEqualsFullOnQuadratic) {
  // on u = x^2 the zeta-diffusion exactly replaces the removed small-jump mass
  auto m = alpha_half();
  Smooth1D u;
  u.u = [](double, double x) { return x * x; };
  u.du_dt = [](double, double) { return 0.0; };
  u.du_dx = [](double, double x) { return 2.0 * x; };
  u.d2u_dx2 = [](double, double) { return 2.0; };
  Generator1D full{m, [](double) { return 0.0; }, [](double) { return 0.4; },
                   [](double, double e) { return e; }, 0, 0.0};
  Generator1D comp{m, [](double) { return 0.0; }, [](double) { return 0.4; },
                   [](double, double e) { return e; }, 1, 0.1};
  double expect = 0.4 * 0.4 + 2.0 / 1.5;  // sigma^2 + m2
  EXPECT_NEAR(full.apply(u, 0.0, 0.7), expect, 1e-7);
  EXPECT_NEAR(comp.apply(u, 0.0, 0.7), expect, 1e-7);
  // drift term enters through u'
  Generator1D drift = full;
  drift.b = [](double x) { return 2.0 + 0.0 * x; };
  EXPECT_NEAR(drift.apply(u, 0.0, 0.7), expect + 2.0 * 2.0 * 0.7, 1e-7);
}

TEST(ManufacturedDriver, ResidualVanishesAndPartialsMatch) {
  auto m = alpha_half();
  Smooth1D us;
  us.u = [](double t, double x) { return std::exp(-t) * std::sin(x); };
  us.du_dt = [](double t, double x) { return -std::exp(-t) * std::sin(x); };
  us.du_dx = [](double t, double x) { return std::exp(-t) * std::cos(x); };
  us.d2u_dx2 = [](double t, double x) { return -std::exp(-t) * std::sin(x); };
  Generator1D gen{m, [](double) { return 0.1; }, [](double) { return 0.3; },
                  [](double, double e) { return e; }, 1, 0.1};
  ManufacturedDriver md(us, gen, 0.5);
  SplitStream s(61);
  for (int k = 0; k < 100; ++k) {
    double t = s.uniform();
    double x = 2.0 * s.normal();
    EXPECT_LT(std::fabs(md.pde_residual(t, x)), 1e-6);
  }
  Driver d = md.driver();
  VectorXd x = VectorXd::Constant(1, 0.4), z = VectorXd::Constant(1, 0.2);
  EXPECT_NEAR(d.partial_y(0.3, x, 1.1, z, 0.2), 0.5 * std::cos(1.1), 1e-12);
  EXPECT_NEAR(d.partial_p(0.3, x, 1.1, z, 0.2), 0.0, 1e-12);
  // memoized h: repeated evaluation is bit-identical
  EXPECT_EQ(md.h(0.25, 0.5), md.h(0.25, 0.5));
}

TEST(ProjectionErrorTime, BrownianClosedForm) {
  // Z = W: R^2_Z = T dt / 2 up to O(dt^2)
  const int B = 20000, N = 4, sub = 64;
  const double T = 1.0;
  auto grid = TimeGrid::uniform(T, N);
  SplitStream root(71);
  MatrixXd z(B, N * sub + 1);
  MatrixXd anchors(B, N);
  double dt_fine = T / (N * sub);
  for (int p = 0; p < B; ++p) {
    SplitStream s = root.split(p);
    double w = 0;
    z(p, 0) = 0;
    for (int k = 1; k <= N * sub; ++k) {
      w += std::sqrt(dt_fine) * s.normal();
      z(p, k) = w;
    }
    for (int i = 0; i < N; ++i) anchors(p, i) = z(p, i * sub);
  }
  auto est = projection_error_time(z, anchors, grid, sub);
  EXPECT_NEAR(est.value, T * (T / N) / 2.0, 0.1 * T * (T / N) / 2.0);

  // halving dt halves the estimate
  auto grid2 = TimeGrid::uniform(T, 2 * N);
  MatrixXd anchors2(B, 2 * N);
  for (int p = 0; p < B; ++p)
    for (int i = 0; i < 2 * N; ++i) anchors2(p, i) = z(p, i * (sub / 2));
  auto est2 = projection_error_time(z, anchors2, grid2, sub / 2);
  EXPECT_NEAR(est2.value / est.value, 0.5, 0.08);
}

TEST(ProjectionErrorCells, MatchesGammaErrorTimesHorizon) {
  auto m = alpha_half();
  JumpPartition part;
  part.epsilon = 0.5;
  part.r_work = 1.0;
  part.measure = m;
  JumpCell c;
  c.a = 0.5;
  c.b = 1.0;
  c.sign = 1;
  c.mass = m->mass(0.5, 1.0, 1);
  part.cells.push_back(c);
  part.total_mass = c.mass;

  auto coeffs = diffusion_model(0.2, [](const VectorXd& x) { return x[0]; });
  auto grid = TimeGrid::uniform(0.5, 2);
  SplitStream root(3);
  auto paths = simulate_forward(coeffs, grid, no_jumps(), VectorXd::Zero(1), 32, root);
  // U independent of (t, x): total = T * single-cell quadrature error
  auto est = projection_error_cells([](double, double, double e) { return e; }, paths, grid, part);
  EXPECT_NEAR(est.value, 0.5 * 0.0167508, 1e-6);
  EXPECT_DOUBLE_EQ(est.tail_share, 0.0);
}

TEST(RateExperiment, SlopeOneForLinearJumps) {
  auto m = alpha_half();
  ModelCoefficients coeffs = diffusion_model(0.0, [](const VectorXd& x) { return x[0]; });
  RateResult r = smalljump_rate_experiment(coeffs, m, {0.4, 0.2, 0.1}, 0.01, 0.25, 8, 20000,
                                           SplitStream(5), 4);
  ASSERT_EQ(r.rows.size(), 3u);
  // uncompensated: E|X - X^eps|^2 = T sigma_eps^2 exactly
  for (const auto& row : r.rows) {
    EXPECT_FALSE(row.flagged);
    EXPECT_NEAR(row.error, 0.25 * row.sigma_eps2, 4.0 * row.stderr_);
  }
  EXPECT_GT(r.rows[0].error, r.rows[1].error);
  EXPECT_GT(r.rows[1].error, r.rows[2].error);
  EXPECT_NEAR(r.slope, 1.0, 0.15);
}

TEST(RateExperiment, BadEpsRefThrows) {
  auto m = alpha_half();
  auto coeffs = diffusion_model(0.0, [](const VectorXd& x) { return x[0]; });
  EXPECT_THROW(smalljump_rate_experiment(coeffs, m, {0.1, 0.2}, 0.15, 0.25, 4, 16, SplitStream(1)),
               std::invalid_argument);
}

}  // namespace
}  // namespace jumpbsde
