#include <gtest/gtest.h>

#include <vector>

#include "emac/rng.hpp"

using emac::RngStream;

TEST(Rng, SameSeedSameSequence) {
  RngStream a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DifferentSeedsDiverge) {
  RngStream a(1), b(2);
  int same = 0;
  for (int i = 0; i < 100; ++i)
    if (a.next_u64() == b.next_u64()) ++same;
  EXPECT_LT(same, 3);
}

TEST(Rng, UniformRangeAndMean) {
  RngStream r(7);
  double s = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    s += u;
  }
  EXPECT_NEAR(s / n, 0.5, 0.01);
}

TEST(Rng, UniformIntBounds) {
  RngStream r(3);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const int k = r.uniform_int(7);
    ASSERT_GE(k, 0);
    ASSERT_LT(k, 7);
    ++counts[k];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
}

TEST(Rng, NormalMoments) {
  RngStream r(11);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.02);
  EXPECT_NEAR(s2 / n, 1.0, 0.03);
}

TEST(Rng, GammaMean) {
  RngStream r(5);
  for (double shape : {0.5, 1.0, 2.5}) {
    double s = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) s += r.gamma(shape);
    EXPECT_NEAR(s / n, shape, 0.05 * std::max(1.0, shape)) << "shape " << shape;
  }
}

TEST(Rng, Dirichlet2AlphaOneIsUniform) {
  // Dirichlet(1,1) marginal is Uniform(0,1)
  RngStream r(13);
  double s = 0.0, s2 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double l = r.dirichlet2(1.0);
    s += l;
    s2 += l * l;
  }
  EXPECT_NEAR(s / n, 0.5, 0.01);
  EXPECT_NEAR(s2 / n - 0.25, 1.0 / 12.0, 0.005);  // variance of U(0,1)
}

TEST(Rng, ShuffleIsPermutation) {
  RngStream r(17);
  auto p = r.permutation(100);
  std::vector<bool> seen(100, false);
  for (int v : p) {
    ASSERT_GE(v, 0);
    ASSERT_LT(v, 100);
    ASSERT_FALSE(seen[v]);
    seen[v] = true;
  }
}

TEST(Rng, SubstreamsIndependentAndStable) {
  RngStream base(99);
  RngStream s1 = base.substream(1);
  RngStream s2 = base.substream(2);
  RngStream s1b = RngStream(99).substream(1);
  EXPECT_NE(s1.next_u64(), s2.next_u64());
  RngStream s1c = base.substream(1);
  EXPECT_EQ(s1c.next_u64(), s1b.next_u64());
}
