#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "emac/tensor.hpp"

namespace emac {

// dense h x w real field, row-major
struct Plane {
  int h = 0;
  int w = 0;
  std::vector<double> v;

  Plane() = default;
  Plane(int h_, int w_, double fill = 0.0)
      : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {
    if (h_ <= 0 || w_ <= 0)
      throw std::invalid_argument("plane: dimensions must be positive");
  }

  double& at(int r, int c) { return v[static_cast<size_t>(r) * w + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * w + c]; }

  double total() const {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }

  bool same_size(const Plane& o) const { return h == o.h && w == o.w; }
};

inline Tensor to_tensor(const Plane& p, bool requires_grad = false) {
  return Tensor::from({p.h, p.w}, p.v, requires_grad);
}

inline Plane to_plane(const Tensor& t) {
  if (t.shape().size() != 2)
    throw std::invalid_argument("to_plane: expected 2-d tensor, got " +
                                shape_str(t.shape()));
  Plane p(t.dim(0), t.dim(1));
  p.v = t.data();
  return p;
}

inline Plane hflip(const Plane& p) {
  Plane out(p.h, p.w);
  for (int r = 0; r < p.h; ++r)
    for (int c = 0; c < p.w; ++c) out.at(r, c) = p.at(r, p.w - 1 - c);
  return out;
}

}  // namespace emac
