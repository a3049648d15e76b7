#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "emac/plane.hpp"
#include "emac/rng.hpp"
#include "emac/tokens.hpp"

namespace emac {

// keep/mask decision over the combined image+density token sequence;
// 0 = keep, 1 = mask
struct MaskPlan {
  int n_image = 0;    // N_I
  int n_density = 0;  // N_D
  std::vector<int> keep_set;        // K, image-token indices in selection order
  std::vector<int> mask_adaptive;   // N_I entries
  std::vector<int> mask_random;     // N_D entries
  int n_image_ret = 0;
  int n_density_ret = 0;
  double brp = 0.0;
  bool sort_descending = true;  // realized branch of the BRP draw

  void validate() const {
    if (static_cast<int>(mask_adaptive.size()) != n_image ||
        static_cast<int>(mask_random.size()) != n_density)
      throw std::invalid_argument("mask plan: vector lengths inconsistent");
    int ki = 0, kd = 0;
    for (int m : mask_adaptive) ki += 1 - m;
    for (int m : mask_random) kd += 1 - m;
    if (ki != n_image_ret || kd != n_density_ret ||
        static_cast<int>(keep_set.size()) != n_image_ret)
      throw std::invalid_argument("mask plan: budgets inconsistent with masks");
  }
};

namespace detail {
inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }
}  // namespace detail

// Split the retained budget R = round((1-mask_ratio)(N_I+N_D)) across the
// two modalities with a symmetric Dirichlet(alpha, alpha) draw; overflow
// beyond a modality's capacity goes back to the other one.
inline std::pair<int, int> sample_token_budget(int n_image, int n_density,
                                               double mask_ratio, double alpha,
                                               RngStream& rng) {
  if (mask_ratio < 0.0 || mask_ratio > 1.0)
    throw std::invalid_argument("sample_token_budget: mask_ratio outside [0,1]");
  if (alpha <= 0.0) throw std::invalid_argument("sample_token_budget: alpha must be positive");
  const int total = n_image + n_density;
  int r = std::min(total, detail::round_half_up((1.0 - mask_ratio) * total));
  const double lambda = rng.dirichlet2(alpha);
  int ni = detail::round_half_up(lambda * r);
  ni = std::clamp(ni, std::max(0, r - n_density), std::min(n_image, r));
  return {ni, r - ni};
}

// per-modality variant: each modality keeps round((1-mask_ratio)*N) of its own
inline std::pair<int, int> per_modality_budget(int n_image, int n_density,
                                               double mask_ratio) {
  return {detail::round_half_up((1.0 - mask_ratio) * n_image),
          detail::round_half_up((1.0 - mask_ratio) * n_density)};
}

// Keep the n_ret most populated patches, or with probability brp the least
// populated ones. Stable tie-break by ascending original index.
inline MaskPlan adaptive_mask(const std::vector<double>& patch_mass, int n_image_ret,
                              double brp, RngStream& rng) {
  const int n = static_cast<int>(patch_mass.size());
  if (n_image_ret < 0 || n_image_ret > n)
    throw std::invalid_argument("adaptive_mask: budget outside [0, N_I]");
  if (brp < 0.0 || brp > 1.0)
    throw std::invalid_argument("adaptive_mask: brp outside [0,1]");
  MaskPlan plan;
  plan.n_image = n;
  plan.n_image_ret = n_image_ret;
  plan.brp = brp;
  const double u = rng.uniform();
  plan.sort_descending = (u <= 1.0 - brp);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (plan.sort_descending) {
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return patch_mass[a] > patch_mass[b];
    });
  } else {
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return patch_mass[a] < patch_mass[b];
    });
  }
  plan.keep_set.assign(order.begin(), order.begin() + n_image_ret);
  plan.mask_adaptive.assign(n, 1);
  for (int i : plan.keep_set) plan.mask_adaptive[i] = 0;
  return plan;
}

// uniformly random keep-subset for the image tokens (the ablation baseline)
inline MaskPlan random_image_mask(int n_image, int n_image_ret, RngStream& rng) {
  if (n_image_ret < 0 || n_image_ret > n_image)
    throw std::invalid_argument("random_image_mask: budget outside [0, N_I]");
  MaskPlan plan;
  plan.n_image = n_image;
  plan.n_image_ret = n_image_ret;
  auto perm = rng.permutation(n_image);
  plan.keep_set.assign(perm.begin(), perm.begin() + n_image_ret);
  plan.mask_adaptive.assign(n_image, 1);
  for (int i : plan.keep_set) plan.mask_adaptive[i] = 0;
  return plan;
}

// shuffle then keep a prefix: a uniformly random n_ret-subset of density tokens
inline std::vector<int> random_density_mask(int n_density, int n_density_ret,
                                            RngStream& rng) {
  if (n_density_ret < 0 || n_density_ret > n_density)
    throw std::invalid_argument("random_density_mask: budget outside [0, N_D]");
  auto perm = rng.permutation(n_density);
  std::vector<int> mask(n_density, 1);
  for (int k = 0; k < n_density_ret; ++k) mask[perm[k]] = 0;
  return mask;
}

// kept positions of the combined sequence, ascending original order
inline std::vector<int> kept_positions(const MaskPlan& plan) {
  std::vector<int> keep;
  keep.reserve(plan.n_image_ret + plan.n_density_ret);
  for (int i = 0; i < plan.n_image; ++i)
    if (plan.mask_adaptive[i] == 0) keep.push_back(i);
  for (int j = 0; j < plan.n_density; ++j)
    if (plan.mask_random[j] == 0) keep.push_back(plan.n_image + j);
  return keep;
}

struct SelectedTokens {
  TokenSequence retained;        // ascending original positional order
  std::vector<int> inverse;      // original combined index of each retained row
};

// Drop masked tokens, keeping the survivors in their original positional
// order regardless of the sort used to choose them; the inverse list allows
// exact re-insertion.
inline SelectedTokens select_and_restore(const TokenSequence& tokens,
                                         const MaskPlan& plan) {
  plan.validate();
  if (tokens.length() != plan.n_image + plan.n_density)
    throw std::invalid_argument("select_and_restore: plan covers " +
                                std::to_string(plan.n_image + plan.n_density) +
                                " tokens, sequence has " +
                                std::to_string(tokens.length()));
  for (int i = 0; i < plan.n_image; ++i)
    if (tokens.modality[i] != Modality::image)
      throw std::invalid_argument("select_and_restore: token layout inconsistent with plan");
  SelectedTokens out;
  out.inverse = kept_positions(plan);
  if (out.inverse.empty())
    throw std::invalid_argument("select_and_restore: empty retained set");
  out.retained.tokens = gather_rows(tokens.tokens, out.inverse);
  out.retained.grid_rows = tokens.grid_rows;
  out.retained.grid_cols = tokens.grid_cols;
  out.retained.patch = tokens.patch;
  for (int idx : out.inverse) {
    out.retained.modality.push_back(tokens.modality[idx]);
    out.retained.position.push_back(tokens.position[idx]);
  }
  return out;
}

// re-insert rows of `selected` at the recorded positions in an n_rows buffer
inline Tensor restore_rows(const Tensor& selected, const std::vector<int>& inverse,
                           int n_rows) {
  return scatter_rows(selected, inverse, n_rows);
}

// kept patches at original intensity, masked patches dimmed to 25%
inline Plane mask_overlay(const Plane& image, const MaskPlan& plan, int patch) {
  if (image.h % patch != 0 || image.w % patch != 0)
    throw std::invalid_argument("mask_overlay: image not tileable by patch");
  const int gc = image.w / patch;
  if (static_cast<int>(plan.mask_adaptive.size()) != (image.h / patch) * gc)
    throw std::invalid_argument("mask_overlay: plan does not match patch grid");
  Plane out = image;
  for (int t = 0; t < plan.n_image; ++t) {
    if (plan.mask_adaptive[t] == 0) continue;
    const int pr = t / gc, pc = t % gc;
    for (int r = 0; r < patch; ++r)
      for (int c = 0; c < patch; ++c) out.at(pr * patch + r, pc * patch + c) *= 0.25;
  }
  return out;
}

}  // namespace emac
