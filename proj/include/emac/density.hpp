#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "emac/plane.hpp"

namespace emac {

using DensityMap = Plane;

struct Point {
  double x = 0.0;  // column, px
  double y = 0.0;  // row, px
};

// One Gaussian per annotated point, truncated at +-4 sigma and renormalized
// to unit mass inside the image, so the map integral equals the point count
// exactly (up to summation rounding).
inline DensityMap rasterize_density(const std::vector<Point>& points, int h, int w,
                                    double sigma) {
  if (sigma <= 0.0) throw std::invalid_argument("rasterize_density: sigma must be positive");
  DensityMap d(h, w);
  const double support = 4.0 * sigma;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (size_t pi = 0; pi < points.size(); ++pi) {
    const auto& p = points[pi];
    if (!(p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h))
      throw std::invalid_argument("rasterize_density: point " + std::to_string(pi) +
                                  " (" + std::to_string(p.x) + "," +
                                  std::to_string(p.y) + ") outside " +
                                  std::to_string(w) + "x" + std::to_string(h));
    const int c0 = std::max(0, static_cast<int>(std::ceil(p.x - support)));
    const int c1 = std::min(w - 1, static_cast<int>(std::floor(p.x + support)));
    const int r0 = std::max(0, static_cast<int>(std::ceil(p.y - support)));
    const int r1 = std::min(h - 1, static_cast<int>(std::floor(p.y + support)));
    double mass = 0.0;
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c)
        mass += std::exp(-((c - p.x) * (c - p.x) + (r - p.y) * (r - p.y)) * inv2s2);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c)
        d.at(r, c) +=
            std::exp(-((c - p.x) * (c - p.x) + (r - p.y) * (r - p.y)) * inv2s2) / mass;
  }
  return d;
}

// per-patch pixel sums, patches enumerated row-major
inline std::vector<double> patch_counts(const DensityMap& d, int patch) {
  if (patch <= 0 || d.h % patch != 0 || d.w % patch != 0)
    throw std::invalid_argument("patch_counts: map " + std::to_string(d.h) + "x" +
                                std::to_string(d.w) + " not tileable by patch " +
                                std::to_string(patch));
  const int gr = d.h / patch, gc = d.w / patch;
  std::vector<double> v(static_cast<size_t>(gr) * gc, 0.0);
  for (int t = 0; t < gr * gc; ++t) {
    const int pr = t / gc, pc = t % gc;
    double s = 0.0;
    for (int r = 0; r < patch; ++r)
      for (int c = 0; c < patch; ++c) s += d.at(pr * patch + r, pc * patch + c);
    v[t] = s;
  }
  return v;
}

// affine normalization fitted over all pixels of the training maps
struct Standardizer {
  double mean = 0.0;
  double std = 1.0;  // already guarded, > 0

  static Standardizer fit(const std::vector<DensityMap>& training_maps) {
    if (training_maps.empty())
      throw std::invalid_argument("standardizer: empty training set");
    double s = 0.0;
    int64_t n = 0;
    for (const auto& m : training_maps) {
      for (double x : m.v) s += x;
      n += static_cast<int64_t>(m.v.size());
    }
    double mu = s / static_cast<double>(n);
    // corrected two-pass mean: a constant corpus yields the exact constant
    double resid = 0.0;
    for (const auto& m : training_maps)
      for (double x : m.v) resid += x - mu;
    mu += resid / static_cast<double>(n);
    double var = 0.0;
    for (const auto& m : training_maps)
      for (double x : m.v) var += (x - mu) * (x - mu);
    var /= static_cast<double>(n);
    Standardizer z;
    z.mean = mu;
    z.std = std::max(std::sqrt(var), 1e-8);
    return z;
  }

  Plane standardize(const Plane& p) const {
    Plane out(p.h, p.w);
    for (size_t i = 0; i < p.v.size(); ++i) out.v[i] = (p.v[i] - mean) / std;
    return out;
  }

  Plane destandardize(const Plane& p) const {
    Plane out(p.h, p.w);
    for (size_t i = 0; i < p.v.size(); ++i) out.v[i] = p.v[i] * std + mean;
    return out;
  }

  double destandardize_value(double v) const { return v * std + mean; }
};

// count of a predicted map: clamp negatives to zero, then integrate
inline double clamped_count(const Plane& p) {
  double s = 0.0;
  for (double x : p.v) s += std::max(x, 0.0);
  return s;
}

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  int n = 0;
};

inline Metrics evaluate(const std::vector<double>& pred_counts,
                        const std::vector<double>& gt_counts) {
  if (pred_counts.size() != gt_counts.size() || pred_counts.empty())
    throw std::invalid_argument("evaluate: count vectors must match and be non-empty");
  Metrics m;
  m.n = static_cast<int>(pred_counts.size());
  double sa = 0.0, sq = 0.0;
  for (size_t i = 0; i < pred_counts.size(); ++i) {
    const double e = gt_counts[i] - pred_counts[i];
    sa += std::abs(e);
    sq += e * e;
  }
  m.mae = sa / m.n;
  m.rmse = std::sqrt(sq / m.n);
  return m;
}

// ---------------------------------------------------------------------------
// DMAP file format: "DMAP", u32 LE h, u32 LE w, h*w float32 LE row-major

namespace detail {
inline void put_u32le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32le(std::istream& is, const std::string& path, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(path + ": truncated " + what + " at byte offset " +
                             std::to_string(is.tellg()));
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 |
         uint32_t(b[3]) << 24;
}

inline void put_f32le(std::ostream& os, float v) {
  uint32_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, 4);
  put_u32le(os, bits);
}

inline float get_f32le(std::istream& is, const std::string& path, const char* what) {
  const uint32_t bits = get_u32le(is, path, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}
}  // namespace detail

inline void write_dmap(const std::string& path, const Plane& d) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_dmap: cannot open " + path);
  os.write("DMAP", 4);
  detail::put_u32le(os, static_cast<uint32_t>(d.h));
  detail::put_u32le(os, static_cast<uint32_t>(d.w));
  for (double x : d.v) detail::put_f32le(os, static_cast<float>(x));
  if (!os) throw std::runtime_error("write_dmap: write failed for " + path);
}

inline Plane read_dmap(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_dmap: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "DMAP")
    throw std::runtime_error(path + ": bad DMAP magic at byte offset 0");
  const uint32_t h = detail::get_u32le(is, path, "height");
  const uint32_t w = detail::get_u32le(is, path, "width");
  Plane d(static_cast<int>(h), static_cast<int>(w));
  for (auto& x : d.v) x = detail::get_f32le(is, path, "pixel data");
  return d;
}

}  // namespace emac
