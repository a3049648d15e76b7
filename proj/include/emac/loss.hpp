#pragma once

#include <stdexcept>
#include <string>

#include "emac/tensor.hpp"

namespace emac {

struct LossWeights {
  double fuse = 10.0;  // lambda_1
  double cur = 10.0;   // lambda_2
  double opt = 1.0;    // lambda_3
  double tv = 20.0;    // lambda_4

  void validate() const {
    if (fuse < 0 || cur < 0 || opt < 0 || tv < 0)
      throw std::invalid_argument("loss weights must be non-negative");
  }
};

struct LossReport {
  double l_fuse = 0.0;
  double l_cur = 0.0;
  double l_opt = 0.0;
  double l_tv = 0.0;
  double total = 0.0;
};

// (1/2hw) sum (E - G)^2
inline Tensor mse(const Tensor& estimate, const Tensor& target) {
  if (estimate.shape() != target.shape())
    throw std::invalid_argument("mse: shape mismatch " + shape_str(estimate.shape()) +
                                " vs " + shape_str(target.shape()));
  Tensor d = sub(estimate, target);
  return mul_scalar(sum(mul(d, d)), 1.0 / (2.0 * static_cast<double>(estimate.numel())));
}

// (1/hw) [ sum_{i>=2} (D_ij - D_{i-1,j})^2 + sum_{j>=2} (D_ij - D_{i,j-1})^2 ];
// the first row/column has no defined predecessor and is skipped
inline Tensor tv(const Tensor& d) {
  if (d.shape().size() != 2)
    throw std::invalid_argument("tv: expects a 2-d map, got " + shape_str(d.shape()));
  const int h = d.dim(0), w = d.dim(1);
  if (h < 2 && w < 2) throw std::invalid_argument("tv: map must extend in some direction");
  Tensor acc = Tensor::scalar(0.0);
  if (h >= 2) {
    Tensor dv = sub(slice2d(d, 1, h, 0, w), slice2d(d, 0, h - 1, 0, w));
    acc = add(acc, sum(mul(dv, dv)));
  }
  if (w >= 2) {
    Tensor dh = sub(slice2d(d, 0, h, 1, w), slice2d(d, 0, h, 0, w - 1));
    acc = add(acc, sum(mul(dh, dh)));
  }
  return mul_scalar(acc, 1.0 / (static_cast<double>(h) * w));
}

// weighted total per the objective; all components recorded
inline std::pair<Tensor, LossReport> total(const Tensor& l_fuse, const Tensor& l_cur,
                                           const Tensor& l_opt, const Tensor& l_tv,
                                           const LossWeights& w) {
  w.validate();
  Tensor t = add(add(mul_scalar(l_fuse, w.fuse), mul_scalar(l_cur, w.cur)),
                 add(mul_scalar(l_opt, w.opt), mul_scalar(l_tv, w.tv)));
  LossReport rep;
  rep.l_fuse = l_fuse.value();
  rep.l_cur = l_cur.value();
  rep.l_opt = l_opt.value();
  rep.l_tv = l_tv.value();
  rep.total = t.value();
  return {t, rep};
}

struct StepLosses {
  Tensor fuse, cur, opt, tv;
};

// l_fuse = mse(D_fuse, D_t), l_cur = mse(D_t_hat, D_t),
// l_opt = mse(I_prev_warp, I_t), l_tv = tv(D_fuse)
inline StepLosses assemble_step_losses(const Tensor& d_fuse, const Tensor& d_cur,
                                       const Tensor& warped_prev_image,
                                       const Tensor& cur_image,
                                       const Tensor& target_std) {
  StepLosses out;
  out.fuse = mse(d_fuse, target_std);
  out.cur = mse(d_cur, target_std);
  out.opt = mse(warped_prev_image, cur_image);
  out.tv = tv(d_fuse);
  return out;
}

}  // namespace emac
