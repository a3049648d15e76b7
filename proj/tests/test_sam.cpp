#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "emac/sam.hpp"

using namespace emac;

namespace {

// brute-force top-k under stable ascending-index tie-breaking
std::vector<int> topk_oracle(const std::vector<double>& v, int k, bool descending) {
  std::vector<int> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (v[a] != v[b]) return descending ? v[a] > v[b] : v[a] < v[b];
    return a < b;
  });
  order.resize(k);
  return order;
}

MaskPlan full_plan(std::vector<double> mass, int ni_ret, int nd, int nd_ret,
                   double brp, RngStream& rng) {
  MaskPlan plan = adaptive_mask(mass, ni_ret, brp, rng);
  plan.n_density = nd;
  plan.n_density_ret = nd_ret;
  plan.mask_random = random_density_mask(nd, nd_ret, rng);
  return plan;
}

TokenSequence make_tokens(int n_image, int n_density, int c, RngStream& rng) {
  TokenSequence ts;
  ts.tokens = Tensor::randn({n_image + n_density, c}, rng);
  for (int i = 0; i < n_image; ++i) {
    ts.modality.push_back(Modality::image);
    ts.position.push_back(i);
  }
  for (int j = 0; j < n_density; ++j) {
    ts.modality.push_back(Modality::density);
    ts.position.push_back(j);
  }
  ts.grid_rows = 1;
  ts.grid_cols = n_image;
  ts.patch = 1;
  return ts;
}

}  // namespace

TEST(Budget, FullMaskRetainsNothing) {
  RngStream rng(1);
  auto [ni, nd] = sample_token_budget(100, 100, 1.0, 1.0, rng);
  EXPECT_EQ(ni, 0);
  EXPECT_EQ(nd, 0);
}

TEST(Budget, PaperMaskRatioTotals) {
  RngStream rng(2);
  for (int t = 0; t < 200; ++t) {
    auto [ni, nd] = sample_token_budget(100, 100, 0.72, 1.0, rng);
    ASSERT_EQ(ni + nd, 56);
    ASSERT_GE(ni, 0);
    ASSERT_LE(ni, 100);
    ASSERT_GE(nd, 0);
    ASSERT_LE(nd, 100);
  }
}

TEST(Budget, DirichletAlphaOneMeanSplit) {
  // Dirichlet(1,1) split is Uniform(0,1): mean image budget ~ 28
  RngStream rng(3);
  double s = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto [ni, nd] = sample_token_budget(100, 100, 0.72, 1.0, rng);
    s += ni;
  }
  EXPECT_NEAR(s / n, 28.0, 0.02 * 28.0);
}

TEST(Budget, OverflowPushedBackToOtherModality) {
  RngStream rng(4);
  // N_I = 4 cannot absorb most of R = 26; the density side takes the rest
  for (int t = 0; t < 500; ++t) {
    auto [ni, nd] = sample_token_budget(4, 100, 0.75, 1.0, rng);
    ASSERT_EQ(ni + nd, 26);
    ASSERT_LE(ni, 4);
    ASSERT_LE(nd, 100);
  }
}

TEST(AdaptiveMask, ForcedDescending) {
  RngStream rng(5);
  MaskPlan plan = adaptive_mask({3, 0, 5, 1}, 2, 0.0, rng);
  EXPECT_TRUE(plan.sort_descending);
  EXPECT_EQ(plan.keep_set, (std::vector<int>{2, 0}));
  EXPECT_EQ(plan.mask_adaptive, (std::vector<int>{0, 1, 0, 1}));
}

TEST(AdaptiveMask, ForcedAscending) {
  RngStream rng(6);
  MaskPlan plan = adaptive_mask({3, 0, 5, 1}, 2, 1.0, rng);
  EXPECT_FALSE(plan.sort_descending);
  EXPECT_EQ(plan.keep_set, (std::vector<int>{1, 3}));
  EXPECT_EQ(plan.mask_adaptive, (std::vector<int>{1, 0, 1, 0}));
}

TEST(AdaptiveMask, StableTieBreakByIndex) {
  RngStream rng(7);
  MaskPlan plan = adaptive_mask({0, 0, 2, 0}, 2, 0.0, rng);
  EXPECT_EQ(plan.keep_set, (std::vector<int>{2, 0}));
}

TEST(AdaptiveMask, MatchesBruteForceTopK) {
  RngStream rng(8);
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + rng.uniform_int(64);
    std::vector<double> mass(n);
    for (auto& m : mass) m = rng.uniform_int(6);  // many ties
    const int k = rng.uniform_int(n + 1);
    MaskPlan plan = adaptive_mask(mass, k, 0.0, rng);
    ASSERT_EQ(plan.keep_set, topk_oracle(mass, k, true));
  }
}

TEST(AdaptiveMask, AscendingBranchFrequencyConvergesToBrp) {
  RngStream rng(9);
  const double brp = 0.2;
  int ascending = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    MaskPlan plan = adaptive_mask({1, 2, 3, 4}, 2, brp, rng);
    if (!plan.sort_descending) ++ascending;
  }
  EXPECT_NEAR(static_cast<double>(ascending) / n, brp, 0.01);
}

TEST(AdaptiveMask, KeepSeparatesMassWhenDescending) {
  RngStream rng(10);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> mass(16);
    for (auto& m : mass) m = rng.uniform();
    MaskPlan plan = adaptive_mask(mass, 5, 0.0, rng);
    double kept_min = 1e300, dropped_max = -1e300;
    for (int i = 0; i < 16; ++i) {
      if (plan.mask_adaptive[i] == 0)
        kept_min = std::min(kept_min, mass[i]);
      else
        dropped_max = std::max(dropped_max, mass[i]);
    }
    ASSERT_GE(kept_min, dropped_max);
  }
}

TEST(AdaptiveMask, ForegroundCoverage) {
  // all mass inside a known patch set F with |F| <= budget -> F within K
  RngStream rng(11);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> mass(25, 0.0);
    std::set<int> fg;
    while (fg.size() < 4) fg.insert(rng.uniform_int(25));
    for (int i : fg) mass[i] = rng.uniform(0.1, 2.0);
    MaskPlan plan = adaptive_mask(mass, 6, 0.0, rng);
    for (int i : fg) ASSERT_EQ(plan.mask_adaptive[i], 0);
  }
}

TEST(RandomDensityMask, FullRetention) {
  RngStream rng(12);
  auto m = random_density_mask(8, 8, rng);
  for (int x : m) EXPECT_EQ(x, 0);
}

TEST(RandomDensityMask, FullMasking) {
  RngStream rng(13);
  auto m = random_density_mask(8, 0, rng);
  for (int x : m) EXPECT_EQ(x, 1);
}

TEST(RandomDensityMask, UniformKeepFrequency) {
  RngStream rng(14);
  std::vector<int> kept(10, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto m = random_density_mask(10, 3, rng);
    for (int j = 0; j < 10; ++j)
      if (m[j] == 0) ++kept[j];
  }
  for (int j = 0; j < 10; ++j)
    EXPECT_NEAR(static_cast<double>(kept[j]) / n, 0.3, 0.01) << "index " << j;
}

TEST(SelectRestore, KeepAllIsIdentity) {
  RngStream rng(15);
  TokenSequence ts = make_tokens(4, 4, 6, rng);
  MaskPlan plan = full_plan({1, 1, 1, 1}, 4, 4, 4, 0.0, rng);
  SelectedTokens sel = select_and_restore(ts, plan);
  EXPECT_EQ(sel.retained.tokens.data(), ts.tokens.data());
  for (int i = 0; i < 8; ++i) EXPECT_EQ(sel.inverse[i], i);
}

TEST(SelectRestore, AscendingOriginalOrder) {
  RngStream rng(16);
  TokenSequence ts = make_tokens(4, 0, 3, rng);
  ts.modality.resize(4);
  ts.position.resize(4);
  MaskPlan plan = adaptive_mask({3, 0, 5, 1}, 2, 0.0, rng);  // K = {2, 0}
  plan.n_density = 0;
  SelectedTokens sel = select_and_restore(ts, plan);
  // output order is (token0, token2) despite the descending selection order
  for (int j = 0; j < 3; ++j) {
    EXPECT_EQ(sel.retained.tokens.at(0, j), ts.tokens.at(0, j));
    EXPECT_EQ(sel.retained.tokens.at(1, j), ts.tokens.at(2, j));
  }
  EXPECT_EQ(sel.inverse, (std::vector<int>{0, 2}));
}

TEST(SelectRestore, RoundTripReproducesOriginal) {
  RngStream rng(17);
  for (int t = 0; t < 50; ++t) {
    const int ni = 1 + rng.uniform_int(8), nd = 1 + rng.uniform_int(8);
    TokenSequence ts = make_tokens(ni, nd, 5, rng);
    std::vector<double> mass(ni);
    for (auto& m : mass) m = rng.uniform();
    const int ni_ret = 1 + rng.uniform_int(ni);
    const int nd_ret = rng.uniform_int(nd + 1);
    MaskPlan plan = full_plan(mass, ni_ret, nd, nd_ret, 0.5, rng);
    SelectedTokens sel = select_and_restore(ts, plan);
    // re-insert at the recorded positions into a copy with kept rows zeroed
    Tensor buf = Tensor::from(ts.tokens.shape(), ts.tokens.data());
    for (int idx : sel.inverse)
      for (int j = 0; j < 5; ++j) buf.data()[idx * 5 + j] = 0.0;
    Tensor back = restore_rows(sel.retained.tokens, sel.inverse, ni + nd);
    for (int64_t i = 0; i < buf.numel(); ++i) buf.data()[i] += back.data()[i];
    ASSERT_EQ(buf.data(), ts.tokens.data());
  }
}

TEST(SelectRestore, InconsistentPlanIsContractError) {
  RngStream rng(18);
  TokenSequence ts = make_tokens(4, 4, 3, rng);
  MaskPlan plan = full_plan({1, 1, 1, 1}, 2, 4, 2, 0.0, rng);
  plan.n_image_ret = 3;  // now inconsistent with mask_adaptive
  EXPECT_THROW(select_and_restore(ts, plan), std::invalid_argument);
}

TEST(MaskViz, MaskedPatchesDimmedToQuarter) {
  RngStream rng(19);
  Plane img(8, 8);
  for (auto& v : img.v) v = rng.uniform(0.2, 1.0);
  MaskPlan plan = adaptive_mask({0, 1, 2, 3}, 2, 0.0, rng);  // keeps patches 3, 2
  Plane out = mask_overlay(img, plan, 4);
  for (int t = 0; t < 4; ++t) {
    const int pr = t / 2, pc = t % 2;
    const double expect_scale = (plan.mask_adaptive[t] == 0) ? 1.0 : 0.25;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        ASSERT_EQ(out.at(pr * 4 + r, pc * 4 + c),
                  img.at(pr * 4 + r, pc * 4 + c) * expect_scale);
  }
}

TEST(Determinism, SameSeedSamePlans) {
  auto run = [](uint64_t seed) {
    RngStream rng(seed);
    auto [ni, nd] = sample_token_budget(64, 64, 0.72, 1.0, rng);
    MaskPlan p = adaptive_mask(std::vector<double>(64, 0.5), ni, 0.2, rng);
    p.n_density = 64;
    p.n_density_ret = nd;
    p.mask_random = random_density_mask(64, nd, rng);
    return p;
  };
  MaskPlan a = run(123), b = run(123);
  EXPECT_EQ(a.keep_set, b.keep_set);
  EXPECT_EQ(a.mask_adaptive, b.mask_adaptive);
  EXPECT_EQ(a.mask_random, b.mask_random);
  EXPECT_EQ(a.n_image_ret, b.n_image_ret);
}

TEST(PerModalityBudget, SplitsEachModality) {
  auto [ni, nd] = per_modality_budget(100, 50, 0.72);
  EXPECT_EQ(ni, 28);
  EXPECT_EQ(nd, 14);
}
