#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "emac/density.hpp"
#include "emac/flow.hpp"
#include "emac/pgm.hpp"
#include "emac/plane.hpp"
#include "emac/rng.hpp"

namespace emac {

struct SceneConfig {
  int h = 64;
  int w = 64;
  int n_frames = 30;
  int n_objects_min = 5;
  int n_objects_max = 20;     // equal bounds give a fixed count
  double dot_radius = 16.0;   // blob truncation and flow support, px
  double dot_sigma = 1.6;     // blob intensity profile
  double intensity_min = 0.5;
  double intensity_max = 0.9;
  double velocity_max = 2.0;  // per-axis px/frame, linear motion, wall bounce
  double background = 0.08;
  double texture_amp = 0.02;  // static per-sequence texture
  uint64_t seed = 0;

  void validate() const {
    if (h <= 0 || w <= 0) throw std::invalid_argument("scene: bad dimensions");
    if (n_frames < 2) throw std::invalid_argument("scene: n_frames must be >= 2");
    if (n_objects_min < 0 || n_objects_max < n_objects_min)
      throw std::invalid_argument("scene: bad object count range");
    if (dot_radius <= 0 || dot_radius >= std::min(h, w) / 2.0)
      throw std::invalid_argument("scene: dot radius must lie in (0, min(h,w)/2)");
    if (dot_sigma <= 0) throw std::invalid_argument("scene: bad dot sigma");
    if (velocity_max < 0) throw std::invalid_argument("scene: bad velocity range");
  }
};

struct FrameSample {
  int index = 0;
  Plane image;  // grayscale in [0,1]
  std::vector<Point> points;
  std::vector<int> track_ids;
  bool has_flow = false;   // frame 0 has no predecessor
  FlowField gt_flow;       // displacement from this frame back to the previous
};

struct Sequence {
  std::string name;
  std::string split;  // train | val | test
  std::vector<FrameSample> frames;
};

// Moving Gaussian dots on a static textured background; objects move linearly
// and reflect off the walls. Per-pixel ground-truth flow carries the nearest
// object's displacement inside its blob support and is zero elsewhere.
inline std::vector<FrameSample> generate_sequence(const SceneConfig& cfg) {
  cfg.validate();
  RngStream rng(cfg.seed);

  Plane texture(cfg.h, cfg.w);
  for (auto& t : texture.v) t = rng.uniform();

  const int count = cfg.n_objects_min == cfg.n_objects_max
                        ? cfg.n_objects_min
                        : cfg.n_objects_min +
                              rng.uniform_int(cfg.n_objects_max - cfg.n_objects_min + 1);
  struct Obj {
    double x, y, vx, vy, intensity;
  };
  std::vector<Obj> objs(count);
  for (auto& o : objs) {
    o.x = rng.uniform(0.0, cfg.w - 1.0);
    o.y = rng.uniform(0.0, cfg.h - 1.0);
    o.vx = rng.uniform(-cfg.velocity_max, cfg.velocity_max);
    o.vy = rng.uniform(-cfg.velocity_max, cfg.velocity_max);
    o.intensity = rng.uniform(cfg.intensity_min, cfg.intensity_max);
  }

  auto render = [&](const std::vector<Obj>& state) {
    Plane img(cfg.h, cfg.w);
    for (int r = 0; r < cfg.h; ++r)
      for (int c = 0; c < cfg.w; ++c)
        img.at(r, c) = cfg.background + cfg.texture_amp * texture.at(r, c);
    const double inv2s2 = 1.0 / (2.0 * cfg.dot_sigma * cfg.dot_sigma);
    for (const auto& o : state) {
      const int c0 = std::max(0, static_cast<int>(std::floor(o.x - cfg.dot_radius)));
      const int c1 = std::min(cfg.w - 1, static_cast<int>(std::ceil(o.x + cfg.dot_radius)));
      const int r0 = std::max(0, static_cast<int>(std::floor(o.y - cfg.dot_radius)));
      const int r1 = std::min(cfg.h - 1, static_cast<int>(std::ceil(o.y + cfg.dot_radius)));
      for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
          const double d2 = (c - o.x) * (c - o.x) + (r - o.y) * (r - o.y);
          if (d2 > cfg.dot_radius * cfg.dot_radius) continue;
          img.at(r, c) += o.intensity * std::exp(-d2 * inv2s2);
        }
    }
    for (auto& v : img.v) v = std::clamp(v, 0.0, 1.0);
    return img;
  };

  auto bounce = [](double& pos, double& vel, double limit) {
    pos += vel;
    while (pos < 0.0 || pos > limit) {
      if (pos < 0.0) {
        pos = -pos;
        vel = -vel;
      } else {
        pos = 2.0 * limit - pos;
        vel = -vel;
      }
    }
  };

  std::vector<FrameSample> frames;
  std::vector<Obj> prev_state;
  for (int f = 0; f < cfg.n_frames; ++f) {
    if (f > 0) {
      prev_state = objs;
      for (auto& o : objs) {
        bounce(o.x, o.vx, cfg.w - 1.0);
        bounce(o.y, o.vy, cfg.h - 1.0);
      }
    }
    FrameSample fs;
    fs.index = f;
    fs.image = render(objs);
    for (int i = 0; i < count; ++i) {
      fs.points.push_back({objs[i].x, objs[i].y});
      fs.track_ids.push_back(i);
    }
    if (f > 0) {
      fs.has_flow = true;
      fs.gt_flow = FlowField(cfg.h, cfg.w);
      for (int r = 0; r < cfg.h; ++r)
        for (int c = 0; c <= cfg.w - 1; ++c) {
          int best = -1;
          double best_d2 = cfg.dot_radius * cfg.dot_radius;
          for (int i = 0; i < count; ++i) {
            const double d2 =
                (c - objs[i].x) * (c - objs[i].x) + (r - objs[i].y) * (r - objs[i].y);
            if (d2 <= best_d2) {
              best_d2 = d2;
              best = i;
            }
          }
          if (best >= 0) {
            fs.gt_flow.u_at(r, c) = prev_state[best].x - objs[best].x;
            fs.gt_flow.v_at(r, c) = prev_state[best].y - objs[best].y;
          }
        }
    }
    frames.push_back(std::move(fs));
  }
  return frames;
}

// ---------------------------------------------------------------------------
// on-disk layout:
//   <dir>/manifest.json                      sequences and split assignment
//   <dir>/<seq>/frame_%05d.pgm               8-bit frames
//   <dir>/<seq>/ann.json                     points + track ids per frame
//   <dir>/<seq>/flow_%05d.flo                ground-truth flow (frames >= 1)

namespace detail {
inline std::string frame_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%05d.pgm", index);
  return buf;
}
inline std::string flow_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "flow_%05d.flo", index);
  return buf;
}
}  // namespace detail

inline void write_dataset(const std::string& dir, const std::vector<Sequence>& seqs) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["sequences"] = nlohmann::ordered_json::array();
  for (const auto& seq : seqs) {
    manifest["sequences"].push_back({{"name", seq.name}, {"split", seq.split}});
    const fs::path sdir = fs::path(dir) / seq.name;
    fs::create_directories(sdir);
    nlohmann::ordered_json ann;
    ann["frames"] = nlohmann::ordered_json::array();
    for (const auto& f : seq.frames) {
      write_pgm((sdir / detail::frame_name(f.index)).string(), f.image);
      if (f.has_flow) write_flo((sdir / detail::flow_name(f.index)).string(), f.gt_flow);
      nlohmann::ordered_json jf;
      jf["index"] = f.index;
      jf["points"] = nlohmann::ordered_json::array();
      for (const auto& p : f.points) jf["points"].push_back({p.x, p.y});
      jf["track_ids"] = f.track_ids;
      ann["frames"].push_back(std::move(jf));
    }
    std::ofstream os(sdir / "ann.json");
    if (!os) throw std::runtime_error("write_dataset: cannot open ann.json in " +
                                      sdir.string());
    os << ann.dump(1) << "\n";
  }
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw std::runtime_error("write_dataset: cannot open manifest.json in " + dir);
  os << manifest.dump(1) << "\n";
}

inline nlohmann::json parse_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path + ": parse error at byte offset " +
                             std::to_string(e.byte) + ": " + e.what());
  }
}

inline std::vector<Sequence> read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const nlohmann::json manifest = parse_json_file((fs::path(dir) / "manifest.json").string());
  std::vector<Sequence> seqs;
  for (const auto& entry : manifest.at("sequences")) {
    Sequence seq;
    seq.name = entry.at("name").get<std::string>();
    seq.split = entry.at("split").get<std::string>();
    const fs::path sdir = fs::path(dir) / seq.name;
    const nlohmann::json ann = parse_json_file((sdir / "ann.json").string());
    for (const auto& jf : ann.at("frames")) {
      FrameSample f;
      f.index = jf.at("index").get<int>();
      f.image = read_pgm((sdir / detail::frame_name(f.index)).string());
      for (const auto& jp : jf.at("points"))
        f.points.push_back({jp.at(0).get<double>(), jp.at(1).get<double>()});
      f.track_ids = jf.at("track_ids").get<std::vector<int>>();
      const fs::path flow_path = sdir / detail::flow_name(f.index);
      if (fs::exists(flow_path)) {
        f.has_flow = true;
        f.gt_flow = read_flo(flow_path.string());
      }
      seq.frames.push_back(std::move(f));
    }
    seqs.push_back(std::move(seq));
  }
  return seqs;
}

}  // namespace emac
