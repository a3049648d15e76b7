#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "emac/density.hpp"
#include "emac/plane.hpp"
#include "emac/tensor.hpp"

namespace emac {

// per-pixel displacement: frame t at (x, y) corresponds to frame t-1 at
// (x + u, y + v)
struct FlowField {
  int h = 0;
  int w = 0;
  std::vector<double> u, v;

  FlowField() = default;
  FlowField(int h_, int w_)
      : h(h_), w(w_), u(static_cast<size_t>(h_) * w_, 0.0),
        v(static_cast<size_t>(h_) * w_, 0.0) {}

  double& u_at(int r, int c) { return u[static_cast<size_t>(r) * w + c]; }
  double& v_at(int r, int c) { return v[static_cast<size_t>(r) * w + c]; }
  double u_at(int r, int c) const { return u[static_cast<size_t>(r) * w + c]; }
  double v_at(int r, int c) const { return v[static_cast<size_t>(r) * w + c]; }
};

inline FlowField hflip(const FlowField& f) {
  FlowField out(f.h, f.w);
  for (int r = 0; r < f.h; ++r)
    for (int c = 0; c < f.w; ++c) {
      out.u_at(r, c) = -f.u_at(r, f.w - 1 - c);  // u negates under mirroring
      out.v_at(r, c) = f.v_at(r, f.w - 1 - c);
    }
  return out;
}

// Exhaustive SSD block matching over integer displacements in
// [-radius, radius]^2. Ties break toward the smaller displacement magnitude,
// then lexicographically on (u, v). Candidate windows that leave the previous
// frame are skipped; (0, 0) is always valid. Blocks are anchored every
// `stride` pixels (default: stride == block, a partition); each anchor tile's
// pixels take the winning displacement of the block starting there.
inline FlowField estimate_blockmatch(const Plane& cur, const Plane& prev, int block,
                                     int radius, int stride = 0) {
  if (!cur.same_size(prev))
    throw std::invalid_argument("estimate_blockmatch: frames differ in size");
  if (block < 3 || radius < 1)
    throw std::invalid_argument("estimate_blockmatch: block >= 3 and radius >= 1 required");
  if (stride <= 0) stride = block;
  FlowField flow(cur.h, cur.w);
  for (int by = 0; by < cur.h; by += stride) {
    const int bh = std::min(block, cur.h - by);
    for (int bx = 0; bx < cur.w; bx += stride) {
      const int bw = std::min(block, cur.w - bx);
      double best_ssd = 0.0;
      int best_u = 0, best_v = 0;
      long best_mag = 0;
      bool have = false;
      for (int dv = -radius; dv <= radius; ++dv) {
        if (by + dv < 0 || by + dv + bh > cur.h) continue;
        for (int du = -radius; du <= radius; ++du) {
          if (bx + du < 0 || bx + du + bw > cur.w) continue;
          double ssd = 0.0;
          for (int r = 0; r < bh; ++r)
            for (int c = 0; c < bw; ++c) {
              const double d = cur.at(by + r, bx + c) - prev.at(by + dv + r, bx + du + c);
              ssd += d * d;
            }
          const long mag = long(du) * du + long(dv) * dv;
          const bool better =
              !have || ssd < best_ssd ||
              (ssd == best_ssd &&
               (mag < best_mag ||
                (mag == best_mag && (du < best_u || (du == best_u && dv < best_v)))));
          if (better) {
            best_ssd = ssd;
            best_u = du;
            best_v = dv;
            best_mag = mag;
            have = true;
          }
        }
      }
      const int th = std::min(stride, cur.h - by);
      const int tw = std::min(stride, cur.w - bx);
      for (int r = 0; r < th; ++r)
        for (int c = 0; c < tw; ++c) {
          flow.u_at(by + r, bx + c) = best_u;
          flow.v_at(by + r, bx + c) = best_v;
        }
    }
  }
  return flow;
}

// Backward warp: out(x, y) = bilinear sample of `field` at (x+u, y+v), zero
// outside bounds. Differentiable with respect to the sampled field.
inline Tensor warp_bilinear(const Tensor& field, const FlowField& flow) {
  if (field.shape().size() != 2 || field.dim(0) != flow.h || field.dim(1) != flow.w)
    throw std::invalid_argument("warp_bilinear: field " + shape_str(field.shape()) +
                                " does not match flow " + std::to_string(flow.h) +
                                "x" + std::to_string(flow.w));
  const int h = flow.h, w = flow.w;
  const bool taped = detail::taping_for({&field});
  Tensor out = detail::make_output({h, w}, taped);

  // (index, weight) quadruples per output pixel; also reused by the gradient.
  // The gradient closure may outlive the caller's FlowField, so it samples a
  // shared copy.
  struct Tap {
    int idx;
    double wgt;
  };
  auto flow_copy = std::make_shared<FlowField>(flow);
  auto taps_for = [flow_copy, h, w](int r, int c, Tap taps[4]) -> int {
    const double sx = c + flow_copy->u_at(r, c);
    const double sy = r + flow_copy->v_at(r, c);
    const double fx0 = std::floor(sx), fy0 = std::floor(sy);
    const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
    const double ax = sx - fx0, ay = sy - fy0;
    const double w00 = (1.0 - ax) * (1.0 - ay), w10 = ax * (1.0 - ay);
    const double w01 = (1.0 - ax) * ay, w11 = ax * ay;
    int n = 0;
    auto push = [&](int x, int y, double wt) {
      if (wt != 0.0 && x >= 0 && x < w && y >= 0 && y < h)
        taps[n++] = {y * w + x, wt};
    };
    push(x0, y0, w00);
    push(x0 + 1, y0, w10);
    push(x0, y0 + 1, w01);
    push(x0 + 1, y0 + 1, w11);
    return n;
  };

  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      Tap taps[4];
      const int n = taps_for(r, c, taps);
      double s = 0.0;
      for (int k = 0; k < n; ++k) s += field.data()[taps[k].idx] * taps[k].wgt;
      out.data()[r * w + c] = s;
    }

  if (taped) {
    auto fn = field.node(), on = out.node();
    detail::record([fn, on, taps_for, h, w] {
      if (!fn->requires_grad) return;
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const double g = on->grad[r * w + c];
          if (g == 0.0) continue;
          Tap taps[4];
          const int n = taps_for(r, c, taps);
          for (int k = 0; k < n; ++k) fn->grad[taps[k].idx] += g * taps[k].wgt;
        }
    });
  }
  return out;
}

inline Plane warp_bilinear(const Plane& field, const FlowField& flow) {
  return to_plane(warp_bilinear(to_tensor(field), flow));
}

// ---------------------------------------------------------------------------
// Middlebury .flo: float32 LE magic 202021.25, int32 LE width, int32 LE
// height, then interleaved float32 LE (u, v) row-major

inline void write_flo(const std::string& path, const FlowField& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_flo: cannot open " + path);
  detail::put_f32le(os, 202021.25f);
  detail::put_u32le(os, static_cast<uint32_t>(f.w));
  detail::put_u32le(os, static_cast<uint32_t>(f.h));
  for (int r = 0; r < f.h; ++r)
    for (int c = 0; c < f.w; ++c) {
      detail::put_f32le(os, static_cast<float>(f.u_at(r, c)));
      detail::put_f32le(os, static_cast<float>(f.v_at(r, c)));
    }
  if (!os) throw std::runtime_error("write_flo: write failed for " + path);
}

inline FlowField read_flo(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_flo: cannot open " + path);
  const float magic = detail::get_f32le(is, path, "magic");
  if (magic != 202021.25f)
    throw std::runtime_error(path + ": bad .flo magic at byte offset 0");
  const int w = static_cast<int>(detail::get_u32le(is, path, "width"));
  const int h = static_cast<int>(detail::get_u32le(is, path, "height"));
  if (w <= 0 || h <= 0)
    throw std::runtime_error(path + ": bad .flo dimensions at byte offset 4");
  FlowField f(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      f.u_at(r, c) = detail::get_f32le(is, path, "flow data");
      f.v_at(r, c) = detail::get_f32le(is, path, "flow data");
    }
  return f;
}

// ---------------------------------------------------------------------------
// Flow providers: ground truth from the dataset, block matching, or zero flow

enum class FlowKind { ground_truth, blockmatch, identity };

struct FlowProvider {
  FlowKind kind = FlowKind::blockmatch;
  int block = 8;
  int radius = 8;
  int stride = 0;  // 0: stride == block

  // `gt` is the current frame's stored flow (may be null for non-gt kinds)
  FlowField get(const Plane& cur, const Plane& prev, const FlowField* gt) const {
    switch (kind) {
      case FlowKind::ground_truth:
        if (!gt || gt->h != cur.h || gt->w != cur.w)
          throw std::runtime_error("flow provider: ground-truth flow missing for frame");
        return *gt;
      case FlowKind::blockmatch:
        return estimate_blockmatch(cur, prev, block, radius, stride);
      case FlowKind::identity:
        return FlowField(cur.h, cur.w);
    }
    throw std::logic_error("flow provider: bad kind");
  }
};

}  // namespace emac
