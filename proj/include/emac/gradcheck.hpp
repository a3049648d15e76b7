#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "emac/demo.hpp"
#include "emac/flow.hpp"
#include "emac/loss.hpp"
#include "emac/tcf.hpp"
#include "emac/tensor.hpp"

namespace emac {

// Central finite differences against the taped gradients. The numeric side
// only re-runs forward evaluations, so it stays independent of every
// gradient rule it checks.
struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 1e-4;
  int instances = 0;
  bool pass() const { return max_rel_err < tol; }
};

namespace gradcheck_detail {

// max_coords_per_tensor = 0 checks every coordinate; a positive value checks
// that many deterministically sampled coordinates per tensor (used by the
// end-to-end checks, where a full sweep would dominate the suite's runtime)
inline double fd_max_rel_err(const std::function<Tensor()>& loss_fn,
                             std::vector<Tensor> params, double step = 1e-5,
                             int max_coords_per_tensor = 0,
                             RngStream* coord_rng = nullptr) {
  for (auto& p : params) p.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss_fn());
  }
  double max_rel = 0.0;
  for (auto& p : params) {
    std::vector<int64_t> coords;
    if (max_coords_per_tensor > 0 && p.numel() > max_coords_per_tensor && coord_rng) {
      for (int j = 0; j < max_coords_per_tensor; ++j)
        coords.push_back(coord_rng->uniform_int(static_cast<int>(p.numel())));
    } else {
      for (int64_t i = 0; i < p.numel(); ++i) coords.push_back(i);
    }
    for (int64_t i : coords) {
      const double keep = p.data()[i];
      p.data()[i] = keep + step;
      const double fp = loss_fn().value();
      p.data()[i] = keep - step;
      const double fm = loss_fn().value();
      p.data()[i] = keep;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = p.grad()[i];
      const double rel =
          std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace gradcheck_detail

// every instance builds fresh random inputs; the report keeps the worst error
inline GradCheckReport run_check(
    const std::string& name, int instances, uint64_t seed,
    const std::function<double(RngStream&)>& one_instance) {
  GradCheckReport rep;
  rep.name = name;
  rep.instances = instances;
  RngStream rng(seed);
  for (int t = 0; t < instances; ++t) {
    RngStream sub = rng.substream(static_cast<uint64_t>(t));
    rep.max_rel_err = std::max(rep.max_rel_err, one_instance(sub));
  }
  return rep;
}

// the operator suite plus the end-to-end model checks; `instances` random
// instances per entry
inline std::vector<GradCheckReport> run_gradient_suite(uint64_t seed,
                                                       int instances = 20) {
  using gradcheck_detail::fd_max_rel_err;
  std::vector<GradCheckReport> out;

  out.push_back(run_check("matmul", instances, seed + 1, [&](RngStream& rng) {
    Tensor a = Tensor::randn({4, 3}, rng, 1.0, true);
    Tensor b = Tensor::randn({3, 5}, rng, 1.0, true);
    Tensor w = Tensor::randn({4, 5}, rng);
    return fd_max_rel_err([&] { return sum(mul(matmul(a, b), w)); }, {a, b});
  }));
  out.push_back(run_check("elementwise_add_sub_mul", instances, seed + 2,
                          [&](RngStream& rng) {
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor b = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor w = Tensor::randn({3, 4}, rng);
    return fd_max_rel_err(
        [&] { return sum(mul(sub(add(a, b), mul(a, b)), w)); }, {a, b});
  }));
  out.push_back(run_check("scalar_ops", instances, seed + 3, [&](RngStream& rng) {
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor w = Tensor::randn({3, 4}, rng);
    return fd_max_rel_err(
        [&] { return sum(mul(add_scalar(mul_scalar(neg(a), 1.7), 0.3), w)); }, {a});
  }));
  out.push_back(run_check("transpose_reshape", instances, seed + 4,
                          [&](RngStream& rng) {
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor w = Tensor::randn({2, 6}, rng);
    return fd_max_rel_err(
        [&] { return sum(mul(reshape(transpose(a), {2, 6}), w)); }, {a});
  }));
  out.push_back(run_check("concat_split", instances, seed + 5, [&](RngStream& rng) {
    Tensor a = Tensor::randn({2, 4}, rng, 1.0, true);
    Tensor b = Tensor::randn({2, 4}, rng, 1.0, true);
    Tensor w = Tensor::randn({4, 2}, rng);
    return fd_max_rel_err(
        [&] {
          auto parts = split(concat({a, b}, 1), 4, 1);
          return sum(mul(concat({parts[2], parts[0]}, 0), w));
        },
        {a, b});
  }));
  out.push_back(run_check("gather_scatter", instances, seed + 6, [&](RngStream& rng) {
    Tensor a = Tensor::randn({5, 3}, rng, 1.0, true);
    std::vector<int> idx = {4, 2, 2, 0};
    std::vector<int> where = {1, 3, 5, 0};
    Tensor w = Tensor::randn({7, 3}, rng);
    return fd_max_rel_err(
        [&] { return sum(mul(scatter_rows(gather_rows(a, idx), where, 7), w)); },
        {a});
  }));
  out.push_back(run_check("broadcast_add_row_slice", instances, seed + 7,
                          [&](RngStream& rng) {
    Tensor row = Tensor::randn({1, 4}, rng, 1.0, true);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor w = Tensor::randn({2, 3}, rng);
    return fd_max_rel_err(
        [&] {
          return sum(mul(slice2d(add(broadcast_rows(row, 3), add_row(a, row)), 0, 2,
                                 1, 4),
                         w));
        },
        {row, a});
  }));
  out.push_back(run_check("reductions", instances, seed + 8, [&](RngStream& rng) {
    Tensor a = Tensor::randn({4, 4}, rng, 1.0, true);
    return fd_max_rel_err([&] { return add(sum(mul(a, a)), mean(a)); }, {a});
  }));
  out.push_back(run_check("gelu", instances, seed + 9, [&](RngStream& rng) {
    Tensor a = Tensor::randn({4, 4}, rng, 1.5, true);
    Tensor w = Tensor::randn({4, 4}, rng);
    return fd_max_rel_err([&] { return sum(mul(gelu(a), w)); }, {a});
  }));
  out.push_back(run_check("softmax_lastdim", instances, seed + 10,
                          [&](RngStream& rng) {
    Tensor a = Tensor::randn({3, 6}, rng, 2.0, true);
    Tensor w = Tensor::randn({3, 6}, rng);
    return fd_max_rel_err([&] { return sum(mul(softmax_lastdim(a), w)); }, {a});
  }));
  out.push_back(run_check("layer_norm", instances, seed + 11, [&](RngStream& rng) {
    Tensor x = Tensor::randn({4, 6}, rng, 1.0, true);
    Tensor g = Tensor::randn({6}, rng, 0.4, true);
    Tensor b = Tensor::randn({6}, rng, 0.4, true);
    Tensor w = Tensor::randn({4, 6}, rng);
    return fd_max_rel_err(
        [&] { return sum(mul(layer_norm(x, g, b, 1e-5), w)); }, {x, g, b});
  }));
  out.push_back(run_check("patchify_unpatchify", instances, seed + 12,
                          [&](RngStream& rng) {
    Tensor m = Tensor::randn({8, 8}, rng, 1.0, true);
    Tensor w = Tensor::randn({8, 8}, rng);
    return fd_max_rel_err(
        [&] { return sum(mul(unpatchify_op(patchify_op(m, 4), 2, 2, 4), w)); }, {m});
  }));
  out.push_back(run_check("warp_bilinear", instances, seed + 13, [&](RngStream& rng) {
    Tensor field = Tensor::randn({8, 8}, rng, 1.0, true);
    FlowField flow(8, 8);
    for (auto& u : flow.u) u = rng.uniform(-2.0, 2.0);
    for (auto& v : flow.v) v = rng.uniform(-2.0, 2.0);
    Tensor w = Tensor::randn({8, 8}, rng);
    return fd_max_rel_err([&] { return sum(mul(warp_bilinear(field, flow), w)); },
                          {field});
  }));
  out.push_back(run_check("mse", instances, seed + 14, [&](RngStream& rng) {
    Tensor e = Tensor::randn({5, 5}, rng, 1.0, true);
    Tensor g = Tensor::randn({5, 5}, rng, 1.0, true);
    return fd_max_rel_err([&] { return mse(e, g); }, {e, g});
  }));
  out.push_back(run_check("tv", instances, seed + 15, [&](RngStream& rng) {
    Tensor d = Tensor::randn({5, 6}, rng, 1.0, true);
    return fd_max_rel_err([&] { return tv(d); }, {d});
  }));
  out.push_back(run_check("tcf_residual", instances, seed + 16, [&](RngStream& rng) {
    TcfConfig cfg;
    cfg.fusion_patch = 4;
    cfg.channels = 6;
    TcfHead head(cfg, rng);
    for (auto& [name, t] : head.named_params())
      if (name.rfind("tcf.out", 0) == 0)
        for (auto& v : t.data()) v = rng.normal() * 0.1;
    Tensor a = Tensor::randn({8, 8}, rng, 1.0, true);
    Tensor b = Tensor::randn({8, 8}, rng, 1.0, true);
    Tensor w = Tensor::randn({8, 8}, rng);
    std::vector<Tensor> params = head.params();
    params.push_back(a);
    params.push_back(b);
    return fd_max_rel_err([&] { return sum(mul(head.residual(a, b), w)); }, params);
  }));
  out.push_back(run_check("demo_pipeline", instances, seed + 17, [&](RngStream& rng) {
    DemoConfig cfg;
    cfg.patch = 8;
    cfg.channels = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    DemoModel model(cfg, rng);
    // a zero output head blocks every upstream gradient; randomize it so the
    // check exercises the whole stack
    for (auto& [name, t] : model.named_params())
      if (name.rfind("head.", 0) == 0)
        for (auto& v : t.data()) v = rng.normal() * 0.1;
    Plane img(16, 16);
    for (auto& v : img.v) v = rng.uniform();
    DensityMap den = rasterize_density(
        {{rng.uniform(2.0, 14.0), rng.uniform(2.0, 14.0)}}, 16, 16, 2.0);
    Standardizer z;
    z.mean = 0.004;
    z.std = 0.02;
    Plane target = z.standardize(den);
    SamConfig sam;
    sam.mask_ratio = 0.5;
    const uint64_t plan_seed = rng.next_u64();
    auto loss_fn = [&] {
      RngStream plan_rng(plan_seed);
      auto res = model.forward_train({img}, den, z, sam, plan_rng);
      return mse(res.pred_std, to_tensor(target));
    };
    return fd_max_rel_err(loss_fn, model.params(), 1e-5, 12, &rng);
  }));
  out.push_back(run_check("emac_full_forward", instances, seed + 18,
                          [&](RngStream& rng) {
    // embed -> SAM-selected encode -> decode -> warp -> TCF -> weighted total
    DemoConfig mc;
    mc.patch = 8;
    mc.channels = 8;
    mc.depth = 2;
    mc.heads = 2;
    mc.mlp_ratio = 2;
    TcfConfig tc;
    tc.fusion_patch = 8;
    tc.channels = 8;
    DemoModel model(mc, rng);
    TcfHead tcf(tc, rng);
    for (auto& [name, t] : model.named_params())
      if (name.rfind("head.", 0) == 0)
        for (auto& v : t.data()) v = rng.normal() * 0.1;
    for (auto& [name, t] : tcf.named_params())
      if (name.rfind("tcf.out", 0) == 0)
        for (auto& v : t.data()) v = rng.normal() * 0.1;
    Plane img_t(16, 16), img_p(16, 16);
    for (auto& v : img_t.v) v = rng.uniform();
    for (auto& v : img_p.v) v = rng.uniform();
    DensityMap den_t = rasterize_density(
        {{rng.uniform(2.0, 14.0), rng.uniform(2.0, 14.0)}}, 16, 16, 2.0);
    DensityMap den_p = rasterize_density(
        {{rng.uniform(2.0, 14.0), rng.uniform(2.0, 14.0)}}, 16, 16, 2.0);
    Standardizer z;
    z.mean = 0.004;
    z.std = 0.02;
    Tensor target = to_tensor(z.standardize(den_t));
    SamConfig sam;
    sam.mask_ratio = 0.5;
    LossWeights weights;
    FlowField flow = estimate_blockmatch(img_t, img_p, 8, 2);
    Tensor warped_img = warp_bilinear(to_tensor(img_p), flow);
    const uint64_t plan_seed = rng.next_u64();
    auto loss_fn = [&] {
      RngStream plan_rng(plan_seed);
      auto cur = model.forward_train({img_t}, den_t, z, sam, plan_rng);
      auto prev = model.forward_train({img_p}, den_p, z, sam, plan_rng);
      Tensor fused = tcf.fuse(cur.pred_std, prev.pred_std, flow);
      auto losses =
          assemble_step_losses(fused, cur.pred_std, warped_img, to_tensor(img_t), target);
      return total(losses.fuse, losses.cur, losses.opt, losses.tv, weights).first;
    };
    std::vector<Tensor> params = model.params();
    for (auto& p : tcf.params()) params.push_back(p);
    return fd_max_rel_err(loss_fn, params, 1e-5, 12, &rng);
  }));
  return out;
}

// fault-injection fixture: an op with a deliberately wrong gradient rule must
// be caught by the harness
inline GradCheckReport run_corrupted_check(uint64_t seed) {
  auto corrupted_square = [](const Tensor& a) {
    const bool taped = detail::taping_for({&a});
    Tensor out = detail::make_output(a.shape(), taped);
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * a.data()[i];
    if (taped) {
      auto an = a.node(), on = out.node();
      detail::record([an, on] {
        // wrong by a factor of 3
        for (size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += 3.0 * on->grad[i] * an->data[i];
      });
    }
    return out;
  };
  return run_check("corrupted_square_fixture", 1, seed, [&](RngStream& rng) {
    Tensor a = Tensor::randn({3, 3}, rng, 1.0, true);
    return gradcheck_detail::fd_max_rel_err([&] { return sum(corrupted_square(a)); },
                                            {a});
  });
}

}  // namespace emac
