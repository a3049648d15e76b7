#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "emac/gradcheck.hpp"
#include "emac/pipeline.hpp"

namespace fs = std::filesystem;
using namespace emac;

namespace {

RunConfig config_or_default(const std::string& path) {
  if (path.empty()) return RunConfig{};
  return load_run_config(path);
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
  RunConfig cfg = config_or_default(config_path);
  write_dataset(out_dir, make_dataset(cfg.data));
  std::cout << "wrote " << cfg.data.n_train << " train / " << cfg.data.n_val
            << " val / " << cfg.data.n_test << " test sequences to " << out_dir
            << "\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& config_path,
              const std::string& out_ckpt, int64_t seed, const std::string& log_path) {
  RunConfig cfg = config_or_default(config_path);
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  save_run_config(out_ckpt + ".config.json", cfg);
  const std::string log = log_path.empty() ? out_ckpt + ".log.jsonl" : log_path;
  TrainResult tr = train_run(cfg, data_dir, out_ckpt, log, &std::cout);
  std::cout << "best val MAE " << tr.best_val_mae << " at epoch " << tr.best_epoch
            << "; checkpoint " << out_ckpt << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir,
             const std::string& split, const std::string& json_out, bool oracle,
             bool no_clamp) {
  LoadedModel lm = load_model(ckpt);
  LoadedDataset ds = load_dataset(data_dir, lm.cfg.density_sigma);
  const bool clamp = no_clamp ? false : lm.cfg.eval_clamp;
  EvalOutput ev =
      evaluate_model(lm.model, lm.tcf, lm.z, ds, split, lm.cfg.flow, clamp, oracle);
  nlohmann::ordered_json j = eval_to_json(ev, split);
  if (json_out.empty()) {
    std::cout << j.dump(1) << "\n";
  } else {
    std::ofstream os(json_out);
    if (!os) throw std::runtime_error("cannot write " + json_out);
    os << j.dump(1) << "\n";
    std::cout << "split " << split << ": MAE " << ev.aggregate.mae << " RMSE "
              << ev.aggregate.rmse << " over " << ev.aggregate.n << " frames\n";
  }
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& frames_dir,
              const std::string& out_dir) {
  LoadedModel lm = load_model(ckpt);
  const int failures = infer_dir(lm, frames_dir, out_dir, std::cerr);
  if (failures > 0) {
    std::cerr << failures << " frame(s) failed\n";
    return 1;
  }
  std::cout << "wrote density maps and counts.csv to " << out_dir << "\n";
  return 0;
}

int cmd_mask_viz(const std::string& data_dir, int seq_index, int frame_index,
                 double brp, const std::string& out_path,
                 const std::string& config_path, int64_t seed) {
  RunConfig cfg = config_or_default(config_path);
  LoadedDataset ds = load_dataset(data_dir, cfg.density_sigma);
  if (seq_index < 0 || seq_index >= static_cast<int>(ds.seqs.size()))
    throw std::runtime_error("mask-viz: sequence index out of range");
  const auto& seq = ds.seqs[seq_index];
  if (frame_index < 0 || frame_index >= static_cast<int>(seq.frames.size()))
    throw std::runtime_error("mask-viz: frame index out of range");
  const Plane& img = seq.frames[frame_index].image;
  const auto v_d = patch_counts(seq.densities[frame_index], cfg.model.patch);
  RngStream rng(seed >= 0 ? static_cast<uint64_t>(seed) : cfg.seed);
  const int n = static_cast<int>(v_d.size());
  auto [ni_ret, nd_ret] =
      sample_token_budget(n, n, cfg.sam.mask_ratio, cfg.sam.alpha, rng);
  MaskPlan plan = adaptive_mask(v_d, ni_ret, brp, rng);
  write_pgm(out_path, mask_overlay(img, plan, cfg.model.patch));
  std::cout << "kept " << ni_ret << "/" << n << " image patches ("
            << (plan.sort_descending ? "foreground" : "background")
            << " focus); wrote " << out_path << "\n";
  return 0;
}

int cmd_gradcheck(uint64_t seed, int instances, bool selftest) {
  bool all_pass = true;
  auto reports = run_gradient_suite(seed, instances);
  for (const auto& r : reports) {
    std::printf("%-28s max_rel_err %.3e  tol %.0e  [%s]\n", r.name.c_str(),
                r.max_rel_err, r.tol, r.pass() ? "pass" : "FAIL");
    all_pass = all_pass && r.pass();
  }
  if (selftest) {
    auto rep = run_corrupted_check(seed);
    const bool caught = !rep.pass();
    std::printf("%-28s max_rel_err %.3e  [%s]\n", rep.name.c_str(), rep.max_rel_err,
                caught ? "caught as expected" : "NOT CAUGHT");
    all_pass = all_pass && caught;
  }
  return all_pass ? 0 : 1;
}

int cmd_ablate(const std::string& data_dir, const std::string& config_path,
               const std::string& out_path, int epochs) {
  RunConfig cfg = config_or_default(config_path);
  if (epochs > 0) cfg.optim.epochs = epochs;
  const std::string work =
      (fs::path(out_path).parent_path() / (fs::path(out_path).stem().string() + "_work"))
          .string();
  auto rows = ablate_run(cfg, data_dir, work, &std::cout);
  {
    std::ofstream os(out_path);
    if (!os) throw std::runtime_error("cannot write " + out_path);
    os << ablate_to_json(rows).dump(1) << "\n";
  }
  const std::string text = ablate_to_text(rows);
  {
    std::ofstream os(out_path + ".txt");
    if (!os) throw std::runtime_error("cannot write " + out_path + ".txt");
    os << text;
  }
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emac: video object counting with density-embedded masked modeling"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path, ckpt, split = "test", frames_dir,
              json_out, log_path;
  int64_t seed = -1;
  int frame_index = 0, seq_index = 0, instances = 20, epochs = -1;
  double brp = 0.2;
  bool oracle = false, no_clamp = false, selftest = false;
  uint64_t gc_seed = 1234;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "run config json");
  gen->add_option("--out", out_path, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train on a dataset");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--config", config_path, "run config json");
  train->add_option("--out", ckpt, "output checkpoint path")->required();
  train->add_option("--seed", seed, "seed override");
  train->add_option("--log", log_path, "jsonl loss log path");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  ev->add_option("--ckpt", ckpt, "checkpoint path")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--split", split, "train|val|test");
  ev->add_option("--json", json_out, "metrics json output path");
  ev->add_flag("--oracle", oracle, "debug: score ground-truth counts");
  ev->add_flag("--no-clamp", no_clamp, "comparison mode: integrate raw maps");

  auto* inf = app.add_subcommand("infer", "predict density maps for a frame directory");
  inf->add_option("--ckpt", ckpt, "checkpoint path")->required();
  inf->add_option("--frames", frames_dir, "directory of frame_*.pgm")->required();
  inf->add_option("--out", out_path, "output directory")->required();

  auto* viz = app.add_subcommand("mask-viz", "render kept/masked patches");
  viz->add_option("--data", data_dir, "dataset directory")->required();
  viz->add_option("--seq", seq_index, "sequence index");
  viz->add_option("--frame", frame_index, "frame index");
  viz->add_option("--brp", brp, "background retention probability");
  viz->add_option("--out", out_path, "output pgm path")->required();
  viz->add_option("--config", config_path, "run config json");
  viz->add_option("--seed", seed, "seed override");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--seed", gc_seed, "suite seed");
  gc->add_option("--instances", instances, "random instances per check");
  gc->add_flag("--selftest", selftest, "verify the harness catches a corrupted rule");

  auto* ab = app.add_subcommand("ablate", "masking-strategy and BRP sweep");
  ab->add_option("--data", data_dir, "dataset directory")->required();
  ab->add_option("--config", config_path, "run config json");
  ab->add_option("--out", out_path, "output table path (json; .txt written too)")
      ->required();
  ab->add_option("--epochs", epochs, "override training epochs per condition");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_path);
    if (train->parsed()) return cmd_train(data_dir, config_path, ckpt, seed, log_path);
    if (ev->parsed()) return cmd_eval(ckpt, data_dir, split, json_out, oracle, no_clamp);
    if (inf->parsed()) return cmd_infer(ckpt, frames_dir, out_path);
    if (viz->parsed())
      return cmd_mask_viz(data_dir, seq_index, frame_index, brp, out_path, config_path,
                          seed);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, instances, selftest);
    if (ab->parsed()) return cmd_ablate(data_dir, config_path, out_path, epochs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
