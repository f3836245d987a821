#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "jumpbsde/rng.hpp"

namespace jumpbsde {
namespace {

TEST(SplitStream, SameSeedSameSequence) {
  SplitStream a(1234, 7), b(1234, 7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(SplitStream, DifferentStreamsDiffer) {
  SplitStream a(1234, 0), b(1234, 1);
  int same = 0;
  for (int i = 0; i < 64; ++i)
    if (a.next_u64() == b.next_u64()) ++same;
  EXPECT_EQ(same, 0);
}

TEST(SplitStream, SplitIsDeterministicAndDistinct) {
  SplitStream root(99);
  SplitStream a = root.split("paths", 3);
  SplitStream b = root.split("paths", 3);
  SplitStream c = root.split("paths", 4);
  SplitStream d = root.split("train", 3);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(a.key(), c.key());
  EXPECT_NE(a.key(), d.key());
}

TEST(SplitStream, UniformMoments) {
  SplitStream s(42);
  const int M = 1000000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < M; ++i) {
    double u = s.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sumsq += u * u;
  }
  double mean = sum / M;
  double var = sumsq / M - mean * mean;
  EXPECT_NEAR(mean, 0.5, 4.0 / std::sqrt(12.0 * M));
  EXPECT_NEAR(var, 1.0 / 12.0, 4.0 * 1e-3);
}

TEST(SplitStream, NormalMoments) {
  SplitStream s(7);
  const int M = 1000000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < M; ++i) {
    double x = s.normal();
    sum += x;
    sumsq += x * x;
  }
  double mean = sum / M;
  double var = sumsq / M - mean * mean;
  EXPECT_NEAR(mean, 0.0, 4.0 / std::sqrt(static_cast<double>(M)));
  EXPECT_NEAR(var, 1.0, 4.0 * std::sqrt(2.0 / M));
}

void check_poisson(double lam, int M) {
  SplitStream s(5, static_cast<std::uint64_t>(lam * 100));
  double sum = 0, sumsq = 0;
  for (int i = 0; i < M; ++i) {
    double k = static_cast<double>(s.poisson(lam));
    sum += k;
    sumsq += k * k;
  }
  double mean = sum / M;
  double var = sumsq / M - mean * mean;
  double se_mean = std::sqrt(lam / M);
  double se_var = std::sqrt((lam + 2.0 * lam * lam) / M);  // approx
  EXPECT_NEAR(mean, lam, 4.0 * se_mean) << "lambda=" << lam;
  EXPECT_NEAR(var, lam, 5.0 * se_var) << "lambda=" << lam;
}

TEST(SplitStream, PoissonSmallMean) { check_poisson(0.7, 400000); }
TEST(SplitStream, PoissonMediumMean) { check_poisson(12.5, 200000); }
TEST(SplitStream, PoissonLargeMeanPTRS) { check_poisson(80.0, 200000); }

TEST(SplitStream, PoissonZeroMean) {
  SplitStream s(1);
  EXPECT_EQ(s.poisson(0.0), 0u);
  EXPECT_EQ(s.poisson(-1.0), 0u);
}

}  // namespace
}  // namespace jumpbsde
