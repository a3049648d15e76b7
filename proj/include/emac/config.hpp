#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

#include "emac/demo.hpp"
#include "emac/flow.hpp"
#include "emac/loss.hpp"
#include "emac/synthdata.hpp"
#include "emac/tcf.hpp"

namespace emac {

struct OptimConfig {
  double lr = 1.5e-3;
  double weight_decay = 0.05;
  int warmup_epochs = 15;  // capped at epochs/4 for short runs
  int epochs = 30;
  int batch_pairs = 4;  // frame pairs whose gradients are averaged per step
  // per-layer lr decay for the encoder stack; 1.0 disables it (the desk-scale
  // default: there is no pretrained encoder to protect)
  double layer_lr_decay = 1.0;
};

struct DataGenConfig {
  SceneConfig scene;
  int n_train = 16;
  int n_val = 4;
  int n_test = 4;
};

struct RunConfig {
  uint64_t seed = 7;
  DemoConfig model;
  TcfConfig tcf;
  SamConfig sam;
  LossWeights loss;
  OptimConfig optim;
  FlowProvider flow;
  DataGenConfig data;
  double density_sigma = 6.0;
  bool hflip_augment = true;
  bool eval_clamp = true;  // comparison mode: raw (signed) integration
};

// ---------------------------------------------------------------------------
// json round trip; every field has a default, unknown fields are rejected only
// where they would silently change behaviour (flow kind)

inline std::string to_string(FlowKind k) {
  switch (k) {
    case FlowKind::ground_truth: return "ground_truth";
    case FlowKind::blockmatch: return "blockmatch";
    case FlowKind::identity: return "identity";
  }
  throw std::logic_error("bad flow kind");
}

inline FlowKind flow_kind_from_string(const std::string& s) {
  if (s == "ground_truth") return FlowKind::ground_truth;
  if (s == "blockmatch") return FlowKind::blockmatch;
  if (s == "identity") return FlowKind::identity;
  throw std::invalid_argument("unknown flow kind: " + s);
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["model"] = {{"patch", c.model.patch},       {"channels", c.model.channels},
                {"depth", c.model.depth},       {"heads", c.model.heads},
                {"mlp_ratio", c.model.mlp_ratio}, {"in_channels", c.model.in_channels}};
  j["tcf"] = {{"fusion_patch", c.tcf.fusion_patch},
              {"channels", c.tcf.channels},
              {"query_warped", c.tcf.query_warped}};
  j["sam"] = {{"mask_ratio", c.sam.mask_ratio},
              {"brp", c.sam.brp},
              {"alpha", c.sam.alpha},
              {"per_modality", c.sam.per_modality},
              {"random_image_masking", c.sam.random_image_masking},
              {"infer_budget_prob", c.sam.infer_budget_prob}};
  j["loss"] = {{"fuse", c.loss.fuse}, {"cur", c.loss.cur}, {"opt", c.loss.opt}, {"tv", c.loss.tv}};
  j["optim"] = {{"lr", c.optim.lr},
                {"weight_decay", c.optim.weight_decay},
                {"warmup_epochs", c.optim.warmup_epochs},
                {"epochs", c.optim.epochs},
                {"batch_pairs", c.optim.batch_pairs},
                {"layer_lr_decay", c.optim.layer_lr_decay}};
  j["flow"] = {{"kind", to_string(c.flow.kind)},
               {"block", c.flow.block},
               {"radius", c.flow.radius},
               {"stride", c.flow.stride}};
  j["data"] = {{"h", c.data.scene.h},
               {"w", c.data.scene.w},
               {"n_frames", c.data.scene.n_frames},
               {"objects_min", c.data.scene.n_objects_min},
               {"objects_max", c.data.scene.n_objects_max},
               {"dot_radius", c.data.scene.dot_radius},
               {"dot_sigma", c.data.scene.dot_sigma},
               {"intensity_min", c.data.scene.intensity_min},
               {"intensity_max", c.data.scene.intensity_max},
               {"velocity_max", c.data.scene.velocity_max},
               {"background", c.data.scene.background},
               {"texture_amp", c.data.scene.texture_amp},
               {"n_train", c.data.n_train},
               {"n_val", c.data.n_val},
               {"n_test", c.data.n_test}};
  j["density_sigma"] = c.density_sigma;
  j["hflip_augment"] = c.hflip_augment;
  j["eval_clamp"] = c.eval_clamp;
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("model")) {
    const auto& m = j["model"];
    c.model.patch = m.value("patch", c.model.patch);
    c.model.channels = m.value("channels", c.model.channels);
    c.model.depth = m.value("depth", c.model.depth);
    c.model.heads = m.value("heads", c.model.heads);
    c.model.mlp_ratio = m.value("mlp_ratio", c.model.mlp_ratio);
    c.model.in_channels = m.value("in_channels", c.model.in_channels);
  }
  if (j.contains("tcf")) {
    const auto& t = j["tcf"];
    c.tcf.fusion_patch = t.value("fusion_patch", c.tcf.fusion_patch);
    c.tcf.channels = t.value("channels", c.tcf.channels);
    c.tcf.query_warped = t.value("query_warped", c.tcf.query_warped);
  }
  if (j.contains("sam")) {
    const auto& s = j["sam"];
    c.sam.mask_ratio = s.value("mask_ratio", c.sam.mask_ratio);
    c.sam.brp = s.value("brp", c.sam.brp);
    c.sam.alpha = s.value("alpha", c.sam.alpha);
    c.sam.per_modality = s.value("per_modality", c.sam.per_modality);
    c.sam.random_image_masking =
        s.value("random_image_masking", c.sam.random_image_masking);
    c.sam.infer_budget_prob = s.value("infer_budget_prob", c.sam.infer_budget_prob);
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    c.loss.fuse = l.value("fuse", c.loss.fuse);
    c.loss.cur = l.value("cur", c.loss.cur);
    c.loss.opt = l.value("opt", c.loss.opt);
    c.loss.tv = l.value("tv", c.loss.tv);
  }
  if (j.contains("optim")) {
    const auto& o = j["optim"];
    c.optim.lr = o.value("lr", c.optim.lr);
    c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
    c.optim.warmup_epochs = o.value("warmup_epochs", c.optim.warmup_epochs);
    c.optim.epochs = o.value("epochs", c.optim.epochs);
    c.optim.batch_pairs = o.value("batch_pairs", c.optim.batch_pairs);
    c.optim.layer_lr_decay = o.value("layer_lr_decay", c.optim.layer_lr_decay);
  }
  if (j.contains("flow")) {
    const auto& f = j["flow"];
    c.flow.kind = flow_kind_from_string(f.value("kind", to_string(c.flow.kind)));
    c.flow.block = f.value("block", c.flow.block);
    c.flow.radius = f.value("radius", c.flow.radius);
    c.flow.stride = f.value("stride", c.flow.stride);
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    c.data.scene.h = d.value("h", c.data.scene.h);
    c.data.scene.w = d.value("w", c.data.scene.w);
    c.data.scene.n_frames = d.value("n_frames", c.data.scene.n_frames);
    c.data.scene.n_objects_min = d.value("objects_min", c.data.scene.n_objects_min);
    c.data.scene.n_objects_max = d.value("objects_max", c.data.scene.n_objects_max);
    c.data.scene.dot_radius = d.value("dot_radius", c.data.scene.dot_radius);
    c.data.scene.dot_sigma = d.value("dot_sigma", c.data.scene.dot_sigma);
    c.data.scene.intensity_min = d.value("intensity_min", c.data.scene.intensity_min);
    c.data.scene.intensity_max = d.value("intensity_max", c.data.scene.intensity_max);
    c.data.scene.velocity_max = d.value("velocity_max", c.data.scene.velocity_max);
    c.data.scene.background = d.value("background", c.data.scene.background);
    c.data.scene.texture_amp = d.value("texture_amp", c.data.scene.texture_amp);
    c.data.n_train = d.value("n_train", c.data.n_train);
    c.data.n_val = d.value("n_val", c.data.n_val);
    c.data.n_test = d.value("n_test", c.data.n_test);
  }
  c.density_sigma = j.value("density_sigma", c.density_sigma);
  c.hflip_augment = j.value("hflip_augment", c.hflip_augment);
  c.eval_clamp = j.value("eval_clamp", c.eval_clamp);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(parse_json_file(path));
}

inline void save_run_config(const std::string& path, const RunConfig& c) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write config to " + path);
  os << to_json(c).dump(1) << "\n";
}

}  // namespace emac
