#include <gtest/gtest.h>

#include <cmath>

#include "jumpbsde/quadrature.hpp"

namespace jumpbsde {
namespace {

TEST(Quadrature, PolynomialExact) {
  auto f = [](double x) { return 3.0 * x * x - 2.0 * x + 1.0; };
  EXPECT_NEAR(integrate(f, 0.0, 2.0, 1e-12), 8.0 - 4.0 + 2.0, 1e-10);
}

TEST(Quadrature, EmptyInterval) {
  auto f = [](double x) { return x; };
  EXPECT_EQ(integrate(f, 1.0, 1.0), 0.0);
}

TEST(Quadrature, OscillatoryNeedsRefinement) {
  auto f = [](double x) { return std::sin(50.0 * x); };
  double exact = (1.0 - std::cos(50.0)) / 50.0;
  EXPECT_NEAR(integrate(f, 0.0, 1.0, 1e-11), exact, 1e-9);
}

TEST(Quadrature, LogSubstitutedPowerLaw) {
  // int_a^b r^{0.5} dr via r = exp(s)
  double a = 1e-8, b = 1.0;
  auto f = [](double s) {
    double r = std::exp(s);
    return std::sqrt(r) * r;
  };
  double exact = 2.0 / 3.0 * (std::pow(b, 1.5) - std::pow(a, 1.5));
  EXPECT_NEAR(integrate(f, std::log(a), std::log(b), 1e-11), exact, 1e-10);
}

}  // namespace
}  // namespace jumpbsde
