#pragma once

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "emac/config.hpp"
#include "emac/density.hpp"
#include "emac/tensor.hpp"

namespace emac {

constexpr uint32_t kCheckpointVersion = 1;

// "EMAC", u32 LE version, u32 LE header length, JSON header (ordered
// parameter list + hyperparameter record), then float32 LE data in header
// order
inline void save_checkpoint(const std::string& path, const RunConfig& cfg,
                            const Standardizer& z,
                            const std::vector<std::pair<std::string, Tensor>>& params) {
  nlohmann::ordered_json header;
  header["params"] = nlohmann::ordered_json::array();
  for (const auto& [name, t] : params)
    header["params"].push_back({{"name", name}, {"shape", t.shape()}});
  header["hparams"] = to_json(cfg);
  header["standardizer"] = {{"mean", z.mean}, {"std", z.std}};
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write("EMAC", 4);
  detail::put_u32le(os, kCheckpointVersion);
  detail::put_u32le(os, static_cast<uint32_t>(hs.size()));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : params)
    for (double v : t.data()) detail::put_f32le(os, static_cast<float>(v));
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

struct Checkpoint {
  RunConfig cfg;
  Standardizer z;
  std::vector<std::pair<std::string, std::vector<int>>> param_shapes;
  std::vector<std::vector<double>> param_data;  // same order
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "EMAC")
    throw std::runtime_error(path + ": bad EMAC magic at byte offset 0");
  const uint32_t version = detail::get_u32le(is, path, "version");
  if (version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  const uint32_t hlen = detail::get_u32le(is, path, "header length");
  std::string hs(hlen, '\0');
  if (!is.read(hs.data(), hlen))
    throw std::runtime_error(path + ": truncated header at byte offset 12");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path + ": header parse error at byte offset " +
                             std::to_string(12 + e.byte));
  }
  Checkpoint ck;
  ck.cfg = run_config_from_json(header.at("hparams"));
  ck.z.mean = header.at("standardizer").at("mean").get<double>();
  ck.z.std = header.at("standardizer").at("std").get<double>();
  for (const auto& p : header.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    const std::vector<int> shape = p.at("shape").get<std::vector<int>>();
    int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<double> data(static_cast<size_t>(n));
    for (auto& v : data)
      v = static_cast<double>(detail::get_f32le(is, path, "parameter data"));
    ck.param_shapes.emplace_back(name, shape);
    ck.param_data.push_back(std::move(data));
  }
  return ck;
}

// copies stored parameters into live tensors by name; shape mismatches name
// the offending parameter
inline void apply_checkpoint(const Checkpoint& ck,
                             const std::vector<std::pair<std::string, Tensor>>& params) {
  if (ck.param_shapes.size() != params.size())
    throw std::runtime_error("checkpoint: parameter count mismatch: stored " +
                             std::to_string(ck.param_shapes.size()) + ", model has " +
                             std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [stored_name, stored_shape] = ck.param_shapes[i];
    const auto& [name, t] = params[i];
    if (stored_name != name)
      throw std::runtime_error("checkpoint: parameter order mismatch at '" +
                               stored_name + "' vs model '" + name + "'");
    if (stored_shape != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for parameter '" + name +
                               "': stored " + shape_str(stored_shape) + ", model " +
                               shape_str(t.shape()));
    t.node()->data = ck.param_data[i];
  }
}

}  // namespace emac
