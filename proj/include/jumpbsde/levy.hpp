// Levy measures with singular small-jump behaviour (1D jump space), the
// small-jump compensation moments, jump-space partitions, and compound-Poisson
// sampling that is consistent between path level and cell level.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jumpbsde/quadrature.hpp"
#include "jumpbsde/rng.hpp"

namespace jumpbsde {

// Jump measure nu(de) = m(e) de on E = [-r_max, r_max] \ {0}. Shipped
// families are symmetric; the interface keeps both sides explicit so an
// asymmetric density still works through the quadrature path.
class LevyMeasure {
 public:
  using RadialMoment = std::function<double(double a, double b, int sign, int power)>;

  // density m(e); alpha < 0 means "not known"; moment_cf optional closed form
  // for int_a^b r^power m(sign*r) dr with 0 <= a < b <= r_max.
  LevyMeasure(std::function<double(double)> density, double alpha, double r_max,
              RadialMoment moment_cf = nullptr)
      : density_(std::move(density)), alpha_(alpha), r_max_(r_max), moment_cf_(std::move(moment_cf)) {
    if (!(r_max_ > 0.0)) throw std::invalid_argument("LevyMeasure: r_max must be > 0");
    validate();
  }

  double density(double e) const { return density_(e); }
  double alpha() const { return alpha_; }
  bool has_alpha() const { return alpha_ >= 0.0; }
  double r_max() const { return r_max_; }

  // int over sign*[a,b] of r^power m(sign*r) dr (radial coordinates, a > 0
  // unless power >= 2 where the closed form may absorb the singularity).
  double radial_moment(double a, double b, int sign, int power) const {
    a = std::max(a, 0.0);
    b = std::min(b, r_max_);
    if (b <= a) return 0.0;
    if (moment_cf_) return moment_cf_(a, b, sign, power);
    if (a > 0.0) return log_quadrature(a, b, sign, power);
    // Singular lower limit: sum dyadic shells down from b until they stop
    // contributing. Requires an integrable singularity (power >= 2).
    double total = 0.0;
    double hi = b;
    for (int k = 0; k < 60; ++k) {
      double lo = hi * 0.5;
      double shell = log_quadrature(lo, hi, sign, power);
      total += shell;
      if (std::fabs(shell) < 1e-14 * std::max(1.0, std::fabs(total)) || lo < 1e-16) break;
      hi = lo;
    }
    return total;
  }

  double mass(double a, double b, int sign) const { return radial_moment(a, b, sign, 0); }

  double mass_both(double a, double b) const { return mass(a, b, 1) + mass(a, b, -1); }

  // Inverse CDF within one radial cell: smallest r in [a,b] with
  // mass(a,r) = u * mass(a,b). Bisection on the mass function.
  double invert_mass(double a, double b, int sign, double u) const {
    double target = u * mass(a, b, sign);
    double lo = a, hi = b;
    for (int it = 0; it < 60; ++it) {
      double mid = 0.5 * (lo + hi);
      if (mass(a, mid, sign) < target)
        lo = mid;
      else
        hi = mid;
    }
    return 0.5 * (lo + hi);
  }

 private:
  double log_quadrature(double a, double b, int sign, int power) const {
    // substitution r = exp(s): dr = r ds kills the |e|^{-1-alpha} blowup.
    auto f = [&](double s) {
      double r = std::exp(s);
      return std::pow(r, power + 1) * density_(sign * r);
    };
    return integrate(f, std::log(a), std::log(b), 1e-10);
  }

  void validate() const {
    // int (|e|^2 ^ 1) m(e) de < inf on the working range.
    double v = radial_moment(0.0, std::min(1.0, r_max_), 1, 2) +
               radial_moment(0.0, std::min(1.0, r_max_), -1, 2) +
               mass_both(std::min(1.0, r_max_), r_max_);
    if (!std::isfinite(v)) throw std::invalid_argument("LevyMeasure: |e|^2 ^ 1 moment not finite");
    if (has_alpha()) {
      // m(e) <= C |e|^{-1-alpha} for small e: the ratio m(e)|e|^{1+alpha}
      // must stay bounded along a decreasing sample.
      double rmax_ratio = 0.0, rmin_ratio = std::numeric_limits<double>::infinity();
      for (int k = 1; k <= 6; ++k) {
        double e = std::pow(10.0, -k);
        if (e > r_max_) continue;
        double ratio = density_(e) * std::pow(e, 1.0 + alpha_);
        rmax_ratio = std::max(rmax_ratio, ratio);
        rmin_ratio = std::min(rmin_ratio, ratio);
      }
      if (!std::isfinite(rmax_ratio) || (rmin_ratio > 0.0 && rmax_ratio / rmin_ratio > 1e3))
        throw std::invalid_argument("LevyMeasure: density incompatible with declared alpha");
    }
  }

  std::function<double(double)> density_;
  double alpha_;
  double r_max_;
  RadialMoment moment_cf_;
};

// m(e) = C |e|^{-1-alpha} on [-r_max, r_max]; closed-form moments.
inline LevyMeasure power_law_measure(double C, double alpha, double r_max) {
  auto dens = [C, alpha](double e) {
    double r = std::fabs(e);
    return r > 0 ? C * std::pow(r, -1.0 - alpha) : 0.0;
  };
  auto mom = [C, alpha](double a, double b, int /*sign*/, int power) {
    double p = static_cast<double>(power) - alpha;  // integrand r^{p-1}
    if (std::fabs(p) < 1e-14) return C * std::log(b / a);
    if (a == 0.0 && p <= 0.0)
      throw std::invalid_argument("power_law_measure: divergent moment at 0");
    double lo = (a == 0.0) ? 0.0 : std::pow(a, p);
    return C * (std::pow(b, p) - lo) / p;
  };
  return LevyMeasure(dens, alpha, r_max, mom);
}

// m(e) = C e^{-lambda |e|} |e|^{-1-alpha}; moments by quadrature.
inline LevyMeasure tempered_power_law_measure(double C, double alpha, double lambda,
                                              double r_max) {
  auto dens = [C, alpha, lambda](double e) {
    double r = std::fabs(e);
    return r > 0 ? C * std::exp(-lambda * r) * std::pow(r, -1.0 - alpha) : 0.0;
  };
  return LevyMeasure(dens, alpha, r_max);
}

// Finite-activity measure: piecewise-constant radial density on the breaks
// grid, zero below breaks.front(). Symmetric.
inline LevyMeasure finite_activity_table(std::vector<double> breaks, std::vector<double> values) {
  if (breaks.size() != values.size() + 1 || breaks.size() < 2)
    throw std::invalid_argument("finite_activity_table: need breaks.size() == values.size()+1");
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i)
    if (!(breaks[i] < breaks[i + 1]))
      throw std::invalid_argument("finite_activity_table: breaks not increasing");
  double r_max = breaks.back();
  auto dens = [breaks, values](double e) {
    double r = std::fabs(e);
    if (r < breaks.front() || r > breaks.back()) return 0.0;
    auto it = std::upper_bound(breaks.begin(), breaks.end(), r);
    std::size_t idx = std::min(values.size() - 1, static_cast<std::size_t>(it - breaks.begin()) - 1);
    return values[idx];
  };
  auto mom = [breaks, values](double a, double b, int /*sign*/, int power) {
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      double lo = std::max(a, breaks[i]);
      double hi = std::min(b, breaks[i + 1]);
      if (hi <= lo) continue;
      double p = static_cast<double>(power) + 1.0;
      total += values[i] * (std::pow(hi, p) - std::pow(lo, p)) / p;
    }
    return total;
  };
  return LevyMeasure(dens, -1.0, r_max, mom);
}

// Sigma_eps = int_{|e|<=eps} e e^T nu(de); 1x1 here since E is 1D.
inline Eigen::MatrixXd small_jump_covariance(const LevyMeasure& m, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("small_jump_covariance: eps must be > 0");
  double cut = std::min(eps, m.r_max());
  Eigen::MatrixXd sigma(1, 1);
  sigma(0, 0) = m.radial_moment(0.0, cut, 1, 2) + m.radial_moment(0.0, cut, -1, 2);
  return sigma;
}

// sigma_eps^2 = trace Sigma_eps = int_{|e|<=eps} |e|^2 nu(de).
inline double truncation_variance(const LevyMeasure& m, double eps) {
  return small_jump_covariance(m, eps).trace();
}

struct JumpCell {
  double a = 0, b = 0;   // radial interval (a, b]
  int sign = 1;          // side of the origin
  double mass = 0;       // nu(K_j)
  double rep = 0;        // representative e_j in K_j (signed)
  double gamma_avg = 0;  // gamma_j of (D2)
  bool tail = false;     // beyond r_work

  bool contains(double e) const {
    if (sign > 0) return e > a && e <= b;
    return e < -a && e >= -b;
  }
};

struct JumpPartition {
  double epsilon = 0, h = 0, r_work = 0;
  std::vector<JumpCell> cells;
  double total_mass = 0;  // Lambda
  double tail_mass = 0;
  std::shared_ptr<const LevyMeasure> measure;

  std::size_t size() const { return cells.size(); }

  // min_j nu(K_j) gamma_j^2 over cells with gamma_j != 0 (partition diagnostic).
  double k_h() const {
    double k = std::numeric_limits<double>::infinity();
    for (const auto& c : cells)
      if (c.gamma_avg != 0.0) k = std::min(k, c.mass * c.gamma_avg * c.gamma_avg);
    return std::isfinite(k) ? k : 0.0;
  }

  int cell_of(double e) const {
    for (std::size_t j = 0; j < cells.size(); ++j)
      if (cells[j].contains(e)) return static_cast<int>(j);
    return -1;
  }
};

// Radius R with nu({|e| > R}) = tail_fraction * nu(E^eps): default r_work.
inline double quantile_radius(const LevyMeasure& m, double eps, double tail_fraction = 1e-6) {
  double total = m.mass_both(eps, m.r_max());
  if (total <= 0.0) return m.r_max();
  double lo = eps, hi = m.r_max();
  for (int it = 0; it < 80; ++it) {
    double mid = 0.5 * (lo + hi);
    if (m.mass_both(mid, m.r_max()) > tail_fraction * total)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

// Partition of E^eps: per side, geometric cells from eps to the crossover
// radius, uniform cells from there to r_work, plus one tail cell (r_work,
// r_max] when it carries mass. Zero-mass cells are merged into neighbours.
inline JumpPartition build_partition(std::shared_ptr<const LevyMeasure> measure, double eps,
                                     double h, double r_work = 0.0,
                                     const std::function<double(double)>& gamma = nullptr) {
  const LevyMeasure& m = *measure;
  if (!(eps > 0.0)) throw std::invalid_argument("build_partition: eps must be > 0");
  if (r_work <= 0.0) r_work = quantile_radius(m, eps);
  if (!(eps < r_work)) throw std::invalid_argument("build_partition: need eps < r_work");

  JumpPartition part;
  part.epsilon = eps;
  part.h = h;
  part.r_work = r_work;
  part.measure = measure;

  // Radial boundaries shared by both sides. The cell count scales like 1/h so
  // halving h doubles the count (within rounding).
  double cross = std::sqrt(eps * r_work);
  double geo_span = std::log(cross / eps);
  double uni_span = (r_work - cross) / cross;
  int n_total = std::max(2, static_cast<int>(std::ceil((geo_span + uni_span) / h)));
  int n_geo = std::max(1, static_cast<int>(std::lround(n_total * geo_span / (geo_span + uni_span))));
  int n_uni = std::max(1, n_total - n_geo);

  std::vector<double> bounds;
  bounds.push_back(eps);
  double ratio = std::pow(cross / eps, 1.0 / n_geo);
  for (int k = 1; k <= n_geo; ++k) bounds.push_back(eps * std::pow(ratio, k));
  double w = (r_work - cross) / n_uni;
  for (int k = 1; k <= n_uni; ++k) bounds.push_back(cross + k * w);
  bounds.back() = r_work;

  auto push_side = [&](int sign) {
    std::vector<JumpCell> side;
    for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
      JumpCell c;
      c.a = bounds[k];
      c.b = bounds[k + 1];
      c.sign = sign;
      c.mass = m.mass(c.a, c.b, sign);
      side.push_back(c);
    }
    if (m.r_max() > r_work) {
      JumpCell t;
      t.a = r_work;
      t.b = m.r_max();
      t.sign = sign;
      t.tail = true;
      t.mass = m.mass(t.a, t.b, sign);
      if (t.mass > 0.0) side.push_back(t);
    }
    // merge zero-mass cells into a neighbour so no lambda_j = 0 is emitted
    std::vector<JumpCell> merged;
    for (std::size_t k = 0; k < side.size(); ++k) {
      JumpCell c = side[k];
      if (c.mass <= 0.0) {
        if (!merged.empty()) {
          merged.back().b = c.b;
          merged.back().tail = merged.back().tail || c.tail;
        } else if (k + 1 < side.size()) {
          side[k + 1].a = c.a;
        }
        continue;
      }
      merged.push_back(c);
    }
    for (auto& c : merged) {
      double m1 = m.radial_moment(c.a, c.b, sign, 1);
      c.rep = sign * std::clamp(m1 / c.mass, c.a, c.b);  // nu-barycenter, clamped
      if (gamma) {
        auto gdens = [&](double r) { return gamma(sign * r) * m.density(sign * r); };
        c.gamma_avg = integrate(gdens, c.a, c.b, 1e-10) / c.mass;
      }
      part.cells.push_back(c);
      part.total_mass += c.mass;
      if (c.tail) part.tail_mass += c.mass;
    }
  };
  push_side(1);
  push_side(-1);
  if (part.cells.empty() || !(part.total_mass < std::numeric_limits<double>::infinity()))
    throw std::invalid_argument("build_partition: empty or infinite-mass partition");
  return part;
}

// R^2_gamma(h) = sum_j int_{K_j} |gamma(e) - gamma_j|^2 nu(de).
inline double gamma_quadrature_error(const JumpPartition& part,
                                     const std::function<double(double)>& gamma) {
  const LevyMeasure& m = *part.measure;
  double total = 0.0;
  for (const auto& c : part.cells) {
    auto gdens = [&](double r) { return gamma(c.sign * r) * m.density(c.sign * r); };
    double gj = integrate(gdens, c.a, c.b, 1e-10) / c.mass;
    auto g2dens = [&](double r) {
      double d = gamma(c.sign * r) - gj;
      return d * d * m.density(c.sign * r);
    };
    total += integrate(g2dens, c.a, c.b, 1e-10);
  }
  return total;
}

struct JumpRealization {
  std::vector<double> sizes;
  std::vector<int> cell_index;
  std::vector<std::uint32_t> counts;  // per cell, binned from the same sizes
};

// Compound-Poisson draw on E^eps over a window of length dt. Jumps are
// sampled once (cell proportional to its mass, size by inverse CDF within the
// cell) and the per-cell counts are obtained by binning the same draws, so
// forward and backward noise see one realization.
inline JumpRealization sample_jumps(const JumpPartition& part, double dt, SplitStream& rng) {
  if (!(dt > 0.0)) throw std::invalid_argument("sample_jumps: dt must be > 0");
  JumpRealization out;
  out.counts.assign(part.size(), 0);
  double lam_dt = part.total_mass * dt;
  if (lam_dt <= 0.0) return out;
  std::uint64_t n = rng.poisson(lam_dt);
  out.sizes.reserve(n);
  out.cell_index.reserve(n);
  for (std::uint64_t k = 0; k < n; ++k) {
    double u = rng.uniform() * part.total_mass;
    std::size_t j = 0;
    double acc = 0.0;
    for (; j + 1 < part.cells.size(); ++j) {
      acc += part.cells[j].mass;
      if (u <= acc) break;
    }
    const JumpCell& c = part.cells[j];
    double r = part.measure->invert_mass(c.a, c.b, c.sign, rng.uniform());
    out.sizes.push_back(c.sign * r);
    out.cell_index.push_back(static_cast<int>(j));
    out.counts[j] += 1;
  }
  return out;
}

// Jump coefficients beta(x,e), gamma(e) with derivative data at e = 0.
struct JumpCoefficients {
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, double)> beta;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> d_beta0;  // optional
  std::function<double(double)> gamma;
  double d_gamma0 = 0.0;
  bool has_d_gamma0 = false;
  // optional exact compensator int_{E^eps} beta(x,e) nu(de)
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, const JumpPartition&)> exact_compensator;

  Eigen::VectorXd dbeta0(const Eigen::VectorXd& x) const {
    if (d_beta0) return d_beta0(x);
    double step = 1e-6 * (1.0 + x.norm());
    return (beta(x, step) - beta(x, -step)) / (2.0 * step);
  }

  double dgamma0() const {
    if (has_d_gamma0) return d_gamma0;
    double step = 1e-6;
    return (gamma(step) - gamma(-step)) / (2.0 * step);
  }
};

}  // namespace jumpbsde
