// Adaptive composite Gauss-Legendre quadrature. Singular Levy integrands are
// handled by the callers via the log substitution e = +/- exp(s) before this
// routine sees them.
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

namespace jumpbsde {

struct QuadratureError : std::runtime_error {
  QuadratureError(const std::string& msg, double achieved)
      : std::runtime_error(msg + " (achieved error estimate " + std::to_string(achieved) + ")"),
        achieved_error(achieved) {}
  double achieved_error;
};

namespace detail {

// 15-point Gauss-Legendre nodes/weights on [-1,1].
inline constexpr double kGL15Nodes[15] = {
    -0.9879925180204854, -0.9372733924007060, -0.8482065834104272,
    -0.7244177313601701, -0.5709721726085388, -0.3941513470775634,
    -0.2011940939974345, 0.0,                 0.2011940939974345,
    0.3941513470775634,  0.5709721726085388,  0.7244177313601701,
    0.8482065834104272,  0.9372733924007060,  0.9879925180204854};
inline constexpr double kGL15Weights[15] = {
    0.0307532419961173, 0.0703660474881081, 0.1071592204671719,
    0.1395706779261543, 0.1662692058169939, 0.1861610000155622,
    0.1984314853271116, 0.2025782419255613, 0.1984314853271116,
    0.1861610000155622, 0.1662692058169939, 0.1395706779261543,
    0.1071592204671719, 0.0703660474881081, 0.0307532419961173};

inline double gl15(const std::function<double(double)>& f, double a, double b) {
  double c = 0.5 * (a + b), h = 0.5 * (b - a);
  double s = 0;
  for (int i = 0; i < 15; ++i) s += kGL15Weights[i] * f(c + h * kGL15Nodes[i]);
  return s * h;
}

inline double adapt_rec(const std::function<double(double)>& f, double a, double b,
                        double whole, double tol, int depth, double* err_out) {
  double m = 0.5 * (a + b);
  double left = gl15(f, a, m);
  double right = gl15(f, m, b);
  double delta = left + right - whole;
  if (std::fabs(delta) <= tol || depth >= 40) {
    *err_out += std::fabs(delta);
    return left + right;
  }
  double e1 = 0, e2 = 0;
  double r = adapt_rec(f, a, m, left, 0.5 * tol, depth + 1, &e1) +
             adapt_rec(f, m, b, right, 0.5 * tol, depth + 1, &e2);
  *err_out += e1 + e2;
  return r;
}

}  // namespace detail

// Integrates f over [a,b] to relative tolerance rel_tol (with a small absolute
// floor for integrals near zero). Throws QuadratureError when the error
// estimate does not reach tolerance.
inline double integrate(const std::function<double(double)>& f, double a, double b,
                        double rel_tol = 1e-10, double abs_floor = 1e-14) {
  if (a == b) return 0.0;
  double coarse = detail::gl15(f, a, b);
  double scale = std::max(std::fabs(coarse), abs_floor);
  double err = 0.0;
  double v = detail::adapt_rec(f, a, b, coarse, rel_tol * scale, 0, &err);
  double tol = rel_tol * std::max(std::fabs(v), abs_floor) * 64.0;
  if (err > tol)
    throw QuadratureError("quadrature did not converge on [" + std::to_string(a) + "," +
                              std::to_string(b) + "]",
                          err);
  return v;
}

}  // namespace jumpbsde
