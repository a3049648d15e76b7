#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "emac/plane.hpp"

namespace emac {

// binary PGM (P5), 8-bit, values mapped from [0,1]
inline void write_pgm(const std::string& path, const Plane& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P5\n" << img.w << " " << img.h << "\n255\n";
  for (double v : img.v) {
    const int g = std::clamp(static_cast<int>(std::lround(v * 255.0)), 0, 255);
    os.put(static_cast<char>(g));
  }
  if (!os) throw std::runtime_error("write_pgm: write failed for " + path);
}

inline Plane read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pgm: cannot open " + path);
  auto fail = [&](const char* what) {
    throw std::runtime_error(path + ": " + what + " at byte offset " +
                             std::to_string(static_cast<long>(is.tellg())));
  };
  std::string magic;
  is >> magic;
  if (magic != "P5") fail("not a P5 PGM");
  int w = 0, h = 0, maxval = 0;
  if (!(is >> w >> h >> maxval)) fail("bad PGM header");
  if (w <= 0 || h <= 0 || maxval != 255) fail("unsupported PGM header");
  is.get();  // single whitespace after maxval
  Plane img(h, w);
  for (auto& v : img.v) {
    const int c = is.get();
    if (c == EOF) fail("truncated pixel data");
    v = static_cast<double>(c) / 255.0;
  }
  return img;
}

}  // namespace emac
