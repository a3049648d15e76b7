#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "emac/checkpoint.hpp"
#include "emac/config.hpp"
#include "emac/demo.hpp"
#include "emac/density.hpp"
#include "emac/flow.hpp"
#include "emac/loss.hpp"
#include "emac/optim.hpp"
#include "emac/pgm.hpp"
#include "emac/synthdata.hpp"
#include "emac/tcf.hpp"

namespace emac {

// ---------------------------------------------------------------------------
// dataset generation + loading

inline std::vector<Sequence> make_dataset(const DataGenConfig& gen) {
  std::vector<Sequence> seqs;
  RngStream master(gen.scene.seed);
  int idx = 0;
  auto push = [&](const std::string& split, int count) {
    for (int i = 0; i < count; ++i, ++idx) {
      SceneConfig sc = gen.scene;
      sc.seed = master.substream(static_cast<uint64_t>(idx) + 1).next_u64();
      Sequence seq;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "seq_%03d", idx);
      seq.name = buf;
      seq.split = split;
      seq.frames = generate_sequence(sc);
      seqs.push_back(std::move(seq));
    }
  };
  push("train", gen.n_train);
  push("val", gen.n_val);
  push("test", gen.n_test);
  return seqs;
}

struct LoadedSequence {
  std::string name;
  std::string split;
  std::vector<FrameSample> frames;
  std::vector<DensityMap> densities;  // rasterized ground truth per frame
};

struct LoadedDataset {
  std::vector<LoadedSequence> seqs;
  Standardizer z;  // fitted on the train split

  std::vector<int> split_indices(const std::string& split) const {
    std::vector<int> out;
    for (size_t i = 0; i < seqs.size(); ++i)
      if (seqs[i].split == split) out.push_back(static_cast<int>(i));
    return out;
  }
};

inline LoadedDataset load_dataset(const std::string& dir, double sigma) {
  LoadedDataset ds;
  for (auto& seq : read_dataset(dir)) {
    LoadedSequence ls;
    ls.name = seq.name;
    ls.split = seq.split;
    for (auto& f : seq.frames) {
      ls.densities.push_back(
          rasterize_density(f.points, f.image.h, f.image.w, sigma));
      ls.frames.push_back(std::move(f));
    }
    ds.seqs.push_back(std::move(ls));
  }
  std::vector<DensityMap> train_maps;
  for (const auto& s : ds.seqs)
    if (s.split == "train")
      for (const auto& d : s.densities) train_maps.push_back(d);
  if (train_maps.empty())
    throw std::runtime_error("dataset at " + dir + " has no train split");
  ds.z = Standardizer::fit(train_maps);
  return ds;
}

// ---------------------------------------------------------------------------
// evaluation: fused two-frame inference per Alg. 1, first frame single

struct SequenceEval {
  std::string name;
  Metrics metrics;
};

struct EvalOutput {
  Metrics aggregate;
  std::vector<SequenceEval> per_sequence;
};

inline double frame_count(const Plane& standardized_pred, const Standardizer& z,
                          bool clamp) {
  Plane d = z.destandardize(standardized_pred);
  if (clamp) return clamped_count(d);
  return d.total();
}

inline EvalOutput evaluate_model(const DemoModel& model, const TcfHead& tcf,
                                 const Standardizer& z, const LoadedDataset& ds,
                                 const std::string& split, const FlowProvider& flow,
                                 bool clamp, bool oracle = false) {
  EvalOutput out;
  std::vector<double> all_pred, all_gt;
  for (int si : ds.split_indices(split)) {
    const auto& seq = ds.seqs[si];
    std::vector<double> pred, gt;
    std::vector<Tensor> infers(seq.frames.size());
    for (size_t f = 0; f < seq.frames.size(); ++f)
      infers[f] = model.forward_infer({seq.frames[f].image});
    for (size_t f = 0; f < seq.frames.size(); ++f) {
      double count;
      if (oracle) {
        count = static_cast<double>(seq.frames[f].points.size());
      } else if (f == 0) {
        count = frame_count(to_plane(infers[0]), z, clamp);
      } else {
        const FlowField fl = flow.get(
            seq.frames[f].image, seq.frames[f - 1].image,
            seq.frames[f].has_flow ? &seq.frames[f].gt_flow : nullptr);
        Tensor fused = tcf.fuse(infers[f], infers[f - 1], fl);
        count = frame_count(to_plane(fused), z, clamp);
      }
      pred.push_back(count);
      gt.push_back(static_cast<double>(seq.frames[f].points.size()));
    }
    out.per_sequence.push_back({seq.name, evaluate(pred, gt)});
    all_pred.insert(all_pred.end(), pred.begin(), pred.end());
    all_gt.insert(all_gt.end(), gt.begin(), gt.end());
  }
  if (all_pred.empty())
    throw std::runtime_error("evaluate: split '" + split + "' is empty");
  out.aggregate = evaluate(all_pred, all_gt);
  return out;
}

inline nlohmann::ordered_json eval_to_json(const EvalOutput& ev, const std::string& split) {
  nlohmann::ordered_json j;
  j["split"] = split;
  j["aggregate"] = {{"mae", ev.aggregate.mae}, {"rmse", ev.aggregate.rmse}, {"n", ev.aggregate.n}};
  j["sequences"] = nlohmann::ordered_json::array();
  for (const auto& s : ev.per_sequence)
    j["sequences"].push_back({{"name", s.name},
                              {"mae", s.metrics.mae},
                              {"rmse", s.metrics.rmse},
                              {"n", s.metrics.n}});
  return j;
}

// ---------------------------------------------------------------------------
// training (Alg. 1): per adjacent pair, forward both frames, estimate flow,
// warp, fuse, assemble the four losses, backprop, optimizer step

struct TrainResult {
  double best_val_mae = 0.0;
  int best_epoch = -1;
  double final_total_loss = 0.0;
  std::vector<double> val_mae_per_epoch;
};

struct PairRef {
  int seq;
  int t;  // current frame index, pairs with t-1
};

inline TrainResult train_run(const RunConfig& cfg, const std::string& data_dir,
                             const std::string& out_ckpt,
                             const std::string& log_path = "",
                             std::ostream* progress = nullptr) {
  LoadedDataset ds = load_dataset(data_dir, cfg.density_sigma);
  const auto train_idx = ds.split_indices("train");
  if (train_idx.empty()) throw std::runtime_error("train: no train split in " + data_dir);
  const bool have_val = !ds.split_indices("val").empty();

  RngStream root(cfg.seed);
  RngStream init_rng = root.substream(0);
  RngStream loop_rng = root.substream(1);

  DemoModel model(cfg.model, init_rng);
  TcfHead tcf(cfg.tcf, init_rng);
  auto named = model.named_params();
  {
    auto tcf_named = tcf.named_params();
    named.insert(named.end(), tcf_named.begin(), tcf_named.end());
  }
  std::vector<Tensor> params;
  for (auto& [n, t] : named) params.push_back(t);

  std::vector<double> lr_scales;
  if (cfg.optim.layer_lr_decay != 1.0)
    lr_scales = layer_lr_scales(named, cfg.model.depth, cfg.optim.layer_lr_decay);
  AdamW opt(params, cfg.optim.weight_decay, 0.9, 0.999, 1e-8, lr_scales);
  LrSchedule sched = LrSchedule::make(cfg.optim.lr, cfg.optim.warmup_epochs,
                                      cfg.optim.epochs);

  std::vector<PairRef> pairs;
  for (int si : train_idx)
    for (int t = 1; t < static_cast<int>(ds.seqs[si].frames.size()); ++t)
      pairs.push_back({si, t});
  if (pairs.empty()) throw std::runtime_error("train: no adjacent frame pairs");

  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path);
    if (!log) throw std::runtime_error("train: cannot open log " + log_path);
  }

  TrainResult result;
  double best = 1e300;
  const int steps_per_epoch = static_cast<int>(pairs.size());
  const int batch = std::max(1, cfg.optim.batch_pairs);
  int64_t step = 0;
  int in_batch = 0;
  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    loop_rng.shuffle(pairs);
    double epoch_loss = 0.0;
    for (int k = 0; k < steps_per_epoch; ++k, ++step) {
      const auto [si, t] = pairs[k];
      const auto& seq = ds.seqs[si];
      const bool flip = cfg.hflip_augment && loop_rng.uniform() < 0.5;

      Plane img_t = seq.frames[t].image;
      Plane img_p = seq.frames[t - 1].image;
      DensityMap den_t = seq.densities[t];
      DensityMap den_p = seq.densities[t - 1];
      FlowField gt_flow = seq.frames[t].gt_flow;
      if (flip) {
        img_t = hflip(img_t);
        img_p = hflip(img_p);
        den_t = hflip(den_t);
        den_p = hflip(den_p);
        if (seq.frames[t].has_flow) gt_flow = hflip(gt_flow);
      }

      const double lr =
          sched.at(epoch + static_cast<double>(k + 1) / steps_per_epoch);

      Tape tape;
      LossReport rep;
      {
        TapeScope scope(tape);
        auto cur = model.forward_train({img_t}, den_t, ds.z, cfg.sam, loop_rng);
        auto prev = model.forward_train({img_p}, den_p, ds.z, cfg.sam, loop_rng);
        const FlowField fl = cfg.flow.get(
            img_t, img_p, seq.frames[t].has_flow ? &gt_flow : nullptr);
        Tensor fused = tcf.fuse(cur.pred_std, prev.pred_std, fl);
        Tensor target = to_tensor(ds.z.standardize(den_t));
        Tensor warped_prev_img = warp_bilinear(to_tensor(img_p), fl);
        auto losses = assemble_step_losses(fused, cur.pred_std, warped_prev_img,
                                           to_tensor(img_t), target);
        auto [total_loss, report] =
            total(losses.fuse, losses.cur, losses.opt, losses.tv, cfg.loss);
        rep = report;
        if (in_batch == 0) opt.zero_grad();
        tape.backward(total_loss);
      }
      ++in_batch;
      if (in_batch == batch || k + 1 == steps_per_epoch) {
        if (in_batch > 1)
          for (auto& p : params)
            for (auto& g : p.grad()) g /= in_batch;
        opt.step(lr);
        in_batch = 0;
      }
      epoch_loss += rep.total;

      if (log.is_open()) {
        nlohmann::ordered_json j;
        j["epoch"] = epoch;
        j["step"] = step;
        j["lr"] = lr;
        j["l_fuse"] = rep.l_fuse;
        j["l_cur"] = rep.l_cur;
        j["l_opt"] = rep.l_opt;
        j["l_tv"] = rep.l_tv;
        j["total"] = rep.total;
        log << j.dump() << "\n";
      }
    }
    result.final_total_loss = epoch_loss / steps_per_epoch;

    if (have_val) {
      EvalOutput ev =
          evaluate_model(model, tcf, ds.z, ds, "val", cfg.flow, cfg.eval_clamp);
      result.val_mae_per_epoch.push_back(ev.aggregate.mae);
      if (ev.aggregate.mae < best) {
        best = ev.aggregate.mae;
        result.best_val_mae = best;
        result.best_epoch = epoch;
        save_checkpoint(out_ckpt, cfg, ds.z, named);
      }
      if (progress)
        *progress << "epoch " << epoch << " loss " << result.final_total_loss
                  << " val_mae " << ev.aggregate.mae << "\n";
    } else if (progress) {
      *progress << "epoch " << epoch << " loss " << result.final_total_loss << "\n";
    }
  }
  if (!have_val) save_checkpoint(out_ckpt, cfg, ds.z, named);
  return result;
}

// ---------------------------------------------------------------------------
// model loading

struct LoadedModel {
  RunConfig cfg;
  Standardizer z;
  DemoModel model;
  TcfHead tcf;
};

inline LoadedModel load_model(const std::string& ckpt_path) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  RngStream dummy(0);
  LoadedModel lm{ck.cfg, ck.z, DemoModel(ck.cfg.model, dummy),
                 TcfHead(ck.cfg.tcf, dummy)};
  auto named = lm.model.named_params();
  auto tcf_named = lm.tcf.named_params();
  named.insert(named.end(), tcf_named.begin(), tcf_named.end());
  apply_checkpoint(ck, named);
  return lm;
}

// ---------------------------------------------------------------------------
// directory inference: one DMAP per frame plus counts.csv; unreadable frames
// are reported and skipped, and the command exits non-zero

inline int infer_dir(const LoadedModel& lm, const std::string& frames_dir,
                     const std::string& out_dir, std::ostream& err) {
  namespace fs = std::filesystem;
  std::vector<fs::path> frame_files;
  for (const auto& entry : fs::directory_iterator(frames_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("frame_", 0) == 0 && name.size() >= 4 &&
        name.substr(name.size() - 4) == ".pgm")
      frame_files.push_back(entry.path());
  }
  std::sort(frame_files.begin(), frame_files.end());
  if (frame_files.empty())
    throw std::runtime_error("infer: no frame_*.pgm files in " + frames_dir);
  fs::create_directories(out_dir);

  std::ofstream csv(fs::path(out_dir) / "counts.csv");
  if (!csv) throw std::runtime_error("infer: cannot write counts.csv in " + out_dir);
  csv << "frame_index,count\n";

  int failures = 0;
  std::optional<Plane> prev_img;
  std::optional<Tensor> prev_pred;
  for (size_t i = 0; i < frame_files.size(); ++i) {
    Plane img;
    try {
      img = read_pgm(frame_files[i].string());
    } catch (const std::exception& e) {
      err << "infer: " << e.what() << "\n";
      ++failures;
      prev_img.reset();
      prev_pred.reset();
      continue;
    }
    Tensor pred = lm.model.forward_infer({img});
    Plane out_std;
    if (prev_img && prev_pred) {
      FlowField fl;
      if (lm.cfg.flow.kind == FlowKind::ground_truth) {
        // ground-truth flow comes from flow_%05d.flo next to the frames
        const fs::path flo = fs::path(frames_dir) / detail::flow_name(static_cast<int>(i));
        FlowField stored = read_flo(flo.string());
        fl = lm.cfg.flow.get(img, *prev_img, &stored);
      } else {
        fl = lm.cfg.flow.get(img, *prev_img, nullptr);
      }
      out_std = to_plane(lm.tcf.fuse(pred, *prev_pred, fl));
    } else {
      out_std = to_plane(pred);
    }
    Plane density = lm.z.destandardize(out_std);
    if (lm.cfg.eval_clamp)
      for (auto& v : density.v) v = std::max(v, 0.0);
    // quantize to the DMAP's float32 precision so the csv count equals the
    // stored map's integral
    for (auto& v : density.v) v = static_cast<double>(static_cast<float>(v));
    char name[32];
    std::snprintf(name, sizeof(name), "density_%05zu.dmap", i);
    write_dmap((fs::path(out_dir) / name).string(), density);
    char row[64];
    std::snprintf(row, sizeof(row), "%zu,%.9f\n", i, density.total());
    csv << row;
    prev_img = std::move(img);
    prev_pred = std::move(pred);
  }
  return failures;
}

// ---------------------------------------------------------------------------
// ablation harness: spatial-adaptive vs random masking at equal budgets, plus
// a BRP sweep; matched budgets and fixed seeds per condition

struct AblateRow {
  std::string condition;
  bool random_masking = false;
  double brp = 0.0;
  int epochs = 0;
  int64_t pairs_per_epoch = 0;
  uint64_t seed = 0;
  double mae = 0.0;
  double rmse = 0.0;
};

inline std::vector<AblateRow> ablate_run(const RunConfig& base,
                                         const std::string& data_dir,
                                         const std::string& work_dir,
                                         std::ostream* progress = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(work_dir);
  struct Condition {
    std::string name;
    bool random;
    double brp;
  };
  std::vector<Condition> conditions = {{"random_mask", true, base.sam.brp},
                                       {"brp_0.0", false, 0.0},
                                       {"brp_0.1", false, 0.1},
                                       {"brp_0.2", false, 0.2},
                                       {"brp_0.4", false, 0.4},
                                       {"brp_1.0", false, 1.0}};
  std::vector<AblateRow> rows;
  for (const auto& cond : conditions) {
    RunConfig cfg = base;
    cfg.sam.random_image_masking = cond.random;
    cfg.sam.brp = cond.brp;
    const std::string ckpt = (fs::path(work_dir) / (cond.name + ".emac")).string();
    if (progress) *progress << "ablate: training condition " << cond.name << "\n";
    TrainResult tr = train_run(cfg, data_dir, ckpt);
    LoadedModel lm = load_model(ckpt);
    LoadedDataset ds = load_dataset(data_dir, cfg.density_sigma);
    EvalOutput ev = evaluate_model(lm.model, lm.tcf, lm.z, ds, "test", cfg.flow,
                                   cfg.eval_clamp);
    AblateRow row;
    row.condition = cond.name;
    row.random_masking = cond.random;
    row.brp = cond.brp;
    row.epochs = cfg.optim.epochs;
    int64_t ppe = 0;
    for (int si : ds.split_indices("train"))
      ppe += static_cast<int64_t>(ds.seqs[si].frames.size()) - 1;
    row.pairs_per_epoch = ppe;
    row.seed = cfg.seed;
    row.mae = ev.aggregate.mae;
    row.rmse = ev.aggregate.rmse;
    rows.push_back(row);
    (void)tr;
  }
  return rows;
}

inline nlohmann::ordered_json ablate_to_json(const std::vector<AblateRow>& rows) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    j.push_back({{"condition", r.condition},
                 {"random_masking", r.random_masking},
                 {"brp", r.brp},
                 {"epochs", r.epochs},
                 {"pairs_per_epoch", r.pairs_per_epoch},
                 {"seed", r.seed},
                 {"mae", r.mae},
                 {"rmse", r.rmse}});
  return j;
}

inline std::string ablate_to_text(const std::vector<AblateRow>& rows) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-12s %-8s %5s %7s %6s %10s %10s\n", "condition",
                "masking", "brp", "epochs", "seed", "mae", "rmse");
  out += line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-12s %-8s %5.2f %7d %6llu %10.4f %10.4f\n",
                  r.condition.c_str(), r.random_masking ? "random" : "sam", r.brp,
                  r.epochs, static_cast<unsigned long long>(r.seed), r.mae, r.rmse);
    out += line;
  }
  return out;
}

}  // namespace emac
