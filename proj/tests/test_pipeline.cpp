#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "emac/gradcheck.hpp"
#include "emac/pipeline.hpp"

using namespace emac;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), {});
}

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.seed = 11;
  cfg.model.patch = 8;
  cfg.model.channels = 8;
  cfg.model.depth = 1;
  cfg.model.heads = 2;
  cfg.model.mlp_ratio = 2;
  cfg.tcf.fusion_patch = 8;
  cfg.tcf.channels = 8;
  cfg.optim.epochs = 2;
  cfg.optim.lr = 1e-3;
  cfg.density_sigma = 3.0;
  cfg.data.scene.h = 32;
  cfg.data.scene.w = 32;
  cfg.data.scene.n_frames = 4;
  cfg.data.scene.n_objects_min = 2;
  cfg.data.scene.n_objects_max = 4;
  cfg.data.scene.dot_radius = 6.0;
  cfg.data.scene.seed = 5;
  cfg.data.n_train = 2;
  cfg.data.n_val = 1;
  cfg.data.n_test = 1;
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Config, JsonRoundTripLossless) {
  RunConfig cfg = tiny_config();
  cfg.sam.brp = 0.35;
  cfg.flow.kind = FlowKind::ground_truth;
  cfg.eval_clamp = false;
  nlohmann::ordered_json j = to_json(cfg);
  RunConfig back = run_config_from_json(j);
  EXPECT_EQ(to_json(back).dump(), j.dump());
}

TEST(Config, DefaultsMatchStatedHyperparameters) {
  RunConfig cfg;
  EXPECT_EQ(cfg.sam.mask_ratio, 0.72);
  EXPECT_EQ(cfg.sam.brp, 0.2);
  EXPECT_EQ(cfg.loss.fuse, 10.0);
  EXPECT_EQ(cfg.loss.cur, 10.0);
  EXPECT_EQ(cfg.loss.opt, 1.0);
  EXPECT_EQ(cfg.loss.tv, 20.0);
  EXPECT_EQ(cfg.optim.weight_decay, 0.05);
  EXPECT_EQ(cfg.optim.warmup_epochs, 15);
  EXPECT_EQ(cfg.density_sigma, 6.0);
}

TEST(Config, FileRoundTrip) {
  const auto dir = fresh_dir("emac_cfg_test");
  RunConfig cfg = tiny_config();
  const std::string path = (dir / "cfg.json").string();
  save_run_config(path, cfg);
  RunConfig back = load_run_config(path);
  EXPECT_EQ(to_json(back).dump(), to_json(cfg).dump());
  fs::remove_all(dir);
}

TEST(Checkpoint, SaveLoadRewriteByteIdentical) {
  const auto dir = fresh_dir("emac_ckpt_test");
  RunConfig cfg = tiny_config();
  RngStream rng(1);
  DemoModel model(cfg.model, rng);
  TcfHead tcf(cfg.tcf, rng);
  auto named = model.named_params();
  auto tn = tcf.named_params();
  named.insert(named.end(), tn.begin(), tn.end());
  Standardizer z;
  z.mean = 0.01;
  z.std = 0.05;
  const std::string p1 = (dir / "a.emac").string();
  save_checkpoint(p1, cfg, z, named);

  LoadedModel lm = load_model(p1);
  EXPECT_EQ(lm.z.mean, 0.01);
  auto named2 = lm.model.named_params();
  auto tn2 = lm.tcf.named_params();
  named2.insert(named2.end(), tn2.begin(), tn2.end());
  const std::string p2 = (dir / "b.emac").string();
  save_checkpoint(p2, lm.cfg, lm.z, named2);
  EXPECT_EQ(read_bytes(p1), read_bytes(p2));
  fs::remove_all(dir);
}

TEST(Checkpoint, ShapeMismatchNamesParameter) {
  const auto dir = fresh_dir("emac_ckpt_test2");
  RunConfig cfg = tiny_config();
  RngStream rng(2);
  DemoModel model(cfg.model, rng);
  Standardizer z;
  const std::string p = (dir / "m.emac").string();
  save_checkpoint(p, cfg, z, model.named_params());
  Checkpoint ck = load_checkpoint(p);
  // model with a different width cannot absorb these weights
  RunConfig cfg2 = cfg;
  cfg2.model.channels = 16;
  cfg2.model.heads = 2;
  RngStream rng2(3);
  DemoModel other(cfg2.model, rng2);
  try {
    apply_checkpoint(ck, other.named_params());
    FAIL() << "expected throw";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("embed_img.w"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Schedule, WarmupCappedAtQuarterOfRun) {
  LrSchedule s = LrSchedule::make(1.0, 15, 8);  // cap: 2 epochs
  EXPECT_NEAR(s.at(1.0), 0.5, 1e-12);
  EXPECT_NEAR(s.at(2.0), 1.0, 1e-12);
  // cosine afterwards, reaching 0 at the end
  EXPECT_NEAR(s.at(8.0), 0.0, 1e-12);
  EXPECT_GT(s.at(3.0), s.at(7.0));
}

TEST(Schedule, LongRunKeepsFifteenEpochWarmup) {
  LrSchedule s = LrSchedule::make(2.0, 15, 100);
  EXPECT_NEAR(s.at(7.5), 1.0, 1e-12);
  EXPECT_NEAR(s.at(15.0), 2.0, 1e-12);
}

TEST(AdamW, MinimizesQuadratic) {
  Tensor x = Tensor::from({2}, {3.0, -2.0}, true);
  AdamW opt({x}, 0.0);
  for (int i = 0; i < 400; ++i) {
    Tape tape;
    {
      TapeScope scope(tape);
      opt.zero_grad();
      tape.backward(sum(mul(x, x)));
    }
    opt.step(0.05);
  }
  EXPECT_NEAR(x.data()[0], 0.0, 1e-3);
  EXPECT_NEAR(x.data()[1], 0.0, 1e-3);
}

TEST(Train, SmokeRunWritesLoadableCheckpoint) {
  const auto dir = fresh_dir("emac_train_smoke");
  RunConfig cfg = tiny_config();
  write_dataset((dir / "data").string(), make_dataset(cfg.data));
  const std::string ckpt = (dir / "model.emac").string();
  const std::string log = (dir / "log.jsonl").string();
  TrainResult tr = train_run(cfg, (dir / "data").string(), ckpt, log);
  EXPECT_GE(tr.best_epoch, 0);
  LoadedModel lm = load_model(ckpt);
  EXPECT_EQ(lm.cfg.model.channels, cfg.model.channels);
  // jsonl log has one well-formed record per step
  std::ifstream is(log);
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("total"));
    const double total = j["total"].get<double>();
    const double recomputed = cfg.loss.fuse * j["l_fuse"].get<double>() +
                              cfg.loss.cur * j["l_cur"].get<double>() +
                              cfg.loss.opt * j["l_opt"].get<double>() +
                              cfg.loss.tv * j["l_tv"].get<double>();
    EXPECT_NEAR(total, recomputed, 1e-12);
    ++lines;
  }
  EXPECT_EQ(lines, cfg.optim.epochs * 2 * 3);  // 2 train seqs x 3 pairs
  fs::remove_all(dir);
}

TEST(Train, FixedSeedReproducesFinalLoss) {
  const auto dir = fresh_dir("emac_train_det");
  RunConfig cfg = tiny_config();
  write_dataset((dir / "data").string(), make_dataset(cfg.data));
  TrainResult a = train_run(cfg, (dir / "data").string(), (dir / "a.emac").string());
  TrainResult b = train_run(cfg, (dir / "data").string(), (dir / "b.emac").string());
  EXPECT_EQ(a.final_total_loss, b.final_total_loss);
  EXPECT_EQ(a.val_mae_per_epoch, b.val_mae_per_epoch);
  EXPECT_EQ(read_bytes(dir / "a.emac"), read_bytes(dir / "b.emac"));
  fs::remove_all(dir);
}

TEST(Eval, UntrainedModelIsMeanPredictor) {
  const auto dir = fresh_dir("emac_eval_mean");
  RunConfig cfg = tiny_config();
  write_dataset((dir / "data").string(), make_dataset(cfg.data));
  LoadedDataset ds = load_dataset((dir / "data").string(), cfg.density_sigma);
  RngStream rng(cfg.seed);
  DemoModel model(cfg.model, rng);  // zero head: predicts the dataset mean
  TcfHead tcf(cfg.tcf, rng);        // zero out-proj: fusion is the identity
  EvalOutput ev = evaluate_model(model, tcf, ds.z, ds, "test", cfg.flow, true);
  // closed form: every prediction is mean train count
  const double mean_count = ds.z.mean * cfg.data.scene.h * cfg.data.scene.w;
  std::vector<double> gt, pred;
  for (int si : ds.split_indices("test"))
    for (const auto& f : ds.seqs[si].frames) {
      gt.push_back(static_cast<double>(f.points.size()));
      pred.push_back(mean_count);
    }
  Metrics expect = evaluate(pred, gt);
  EXPECT_NEAR(ev.aggregate.mae, expect.mae, 1e-9);
  EXPECT_NEAR(ev.aggregate.rmse, expect.rmse, 1e-9);
  fs::remove_all(dir);
}

TEST(Eval, OracleFlagGivesZeroError) {
  const auto dir = fresh_dir("emac_eval_oracle");
  RunConfig cfg = tiny_config();
  write_dataset((dir / "data").string(), make_dataset(cfg.data));
  LoadedDataset ds = load_dataset((dir / "data").string(), cfg.density_sigma);
  RngStream rng(1);
  DemoModel model(cfg.model, rng);
  TcfHead tcf(cfg.tcf, rng);
  EvalOutput ev =
      evaluate_model(model, tcf, ds.z, ds, "test", cfg.flow, true, /*oracle=*/true);
  EXPECT_EQ(ev.aggregate.mae, 0.0);
  EXPECT_EQ(ev.aggregate.rmse, 0.0);
}

TEST(Eval, RepeatedRunsByteIdenticalJson) {
  const auto dir = fresh_dir("emac_eval_det");
  RunConfig cfg = tiny_config();
  write_dataset((dir / "data").string(), make_dataset(cfg.data));
  LoadedDataset ds = load_dataset((dir / "data").string(), cfg.density_sigma);
  RngStream rng(9);
  DemoModel model(cfg.model, rng);
  TcfHead tcf(cfg.tcf, rng);
  auto run = [&] {
    EvalOutput ev = evaluate_model(model, tcf, ds.z, ds, "val", cfg.flow, true);
    return eval_to_json(ev, "val").dump(1);
  };
  EXPECT_EQ(run(), run());
  fs::remove_all(dir);
}

TEST(Infer, DirectoryInference) {
  const auto dir = fresh_dir("emac_infer_test");
  RunConfig cfg = tiny_config();
  write_dataset((dir / "data").string(), make_dataset(cfg.data));
  // train nothing: save an initialized model
  RngStream rng(cfg.seed);
  DemoModel model(cfg.model, rng);
  TcfHead tcf(cfg.tcf, rng);
  auto named = model.named_params();
  auto tn = tcf.named_params();
  named.insert(named.end(), tn.begin(), tn.end());
  Standardizer z;
  z.mean = 0.003;
  z.std = 0.02;
  const std::string ckpt = (dir / "m.emac").string();
  save_checkpoint(ckpt, cfg, z, named);
  LoadedModel lm = load_model(ckpt);

  const std::string frames = (dir / "data" / "seq_000").string();
  const std::string out1 = (dir / "out1").string();
  std::ostringstream err;
  const int failures = infer_dir(lm, frames, out1, err);
  EXPECT_EQ(failures, 0);

  // n frames in -> n DMAP files + n csv rows; counts match integrals
  int n_dmaps = 0;
  for (const auto& e : fs::directory_iterator(out1))
    if (e.path().extension() == ".dmap") ++n_dmaps;
  EXPECT_EQ(n_dmaps, cfg.data.scene.n_frames);
  std::ifstream csv(fs::path(out1) / "counts.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "frame_index,count");
  int rows = 0;
  std::string line;
  while (std::getline(csv, line)) {
    const auto comma = line.find(',');
    const int idx = std::stoi(line.substr(0, comma));
    const double count = std::stod(line.substr(comma + 1));
    char name[32];
    std::snprintf(name, sizeof(name), "density_%05d.dmap", idx);
    Plane d = read_dmap((fs::path(out1) / name).string());
    EXPECT_NEAR(count, d.total(), 1e-6);
    ++rows;
  }
  EXPECT_EQ(rows, cfg.data.scene.n_frames);

  // re-run byte-identical
  const std::string out2 = (dir / "out2").string();
  infer_dir(lm, frames, out2, err);
  for (const auto& e : fs::directory_iterator(out1)) {
    const auto rel = e.path().filename();
    EXPECT_EQ(read_bytes(e.path()), read_bytes(fs::path(out2) / rel)) << rel;
  }
  fs::remove_all(dir);
}

TEST(GradSuite, AllChecksPassAtLowInstanceCount) {
  auto reports = run_gradient_suite(1234, 2);
  for (const auto& r : reports)
    EXPECT_TRUE(r.pass()) << r.name << " max_rel_err " << r.max_rel_err;
}

TEST(GradSuite, CorruptedGradientIsCaught) {
  auto rep = run_corrupted_check(99);
  EXPECT_FALSE(rep.pass());
  EXPECT_EQ(rep.name, "corrupted_square_fixture");
}

TEST(Optim, LayerLrScalesMapEncoderDepth) {
  RunConfig cfg = tiny_config();
  cfg.model.depth = 2;
  RngStream rng(30);
  DemoModel model(cfg.model, rng);
  TcfHead tcf(cfg.tcf, rng);
  auto named = model.named_params();
  auto tn = tcf.named_params();
  named.insert(named.end(), tn.begin(), tn.end());
  auto scales = layer_lr_scales(named, cfg.model.depth, 0.5);
  ASSERT_EQ(scales.size(), named.size());
  for (size_t i = 0; i < named.size(); ++i) {
    const auto& name = named[i].first;
    if (name.rfind("embed_", 0) == 0 || name.rfind("mod_", 0) == 0)
      EXPECT_EQ(scales[i], 0.125) << name;  // depth 0: decay^3
    else if (name.rfind("enc.0.", 0) == 0)
      EXPECT_EQ(scales[i], 0.25) << name;
    else if (name.rfind("enc.1.", 0) == 0)
      EXPECT_EQ(scales[i], 0.5) << name;
    else
      EXPECT_EQ(scales[i], 1.0) << name;  // decoder, heads, mask token, tcf
  }
}

TEST(Optim, PerParamScaleChangesStepSize) {
  Tensor a = Tensor::from({1}, {1.0}, true);
  Tensor b = Tensor::from({1}, {1.0}, true);
  AdamW opt({a, b}, 0.0, 0.9, 0.999, 1e-8, {1.0, 0.5});
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(add(mul(a, a), mul(b, b))));
  }
  opt.step(0.1);
  const double da = 1.0 - a.data()[0];
  const double db = 1.0 - b.data()[0];
  EXPECT_NEAR(db, 0.5 * da, 1e-12);
}

TEST(Ablate, SixConditionsReproducibleAtTinyScale) {
  const auto dir = fresh_dir("emac_ablate_unit");
  RunConfig cfg = tiny_config();
  cfg.optim.epochs = 1;
  write_dataset((dir / "data").string(), make_dataset(cfg.data));
  auto rows1 = ablate_run(cfg, (dir / "data").string(), (dir / "w1").string());
  auto rows2 = ablate_run(cfg, (dir / "data").string(), (dir / "w2").string());
  ASSERT_EQ(rows1.size(), 6u);
  EXPECT_EQ(rows1[0].condition, "random_mask");
  EXPECT_TRUE(rows1[0].random_masking);
  bool has_p1 = false;
  for (const auto& r : rows1) {
    EXPECT_TRUE(std::isfinite(r.mae));
    EXPECT_TRUE(std::isfinite(r.rmse));
    EXPECT_EQ(r.epochs, 1);
    EXPECT_EQ(r.pairs_per_epoch, 6);
    EXPECT_EQ(r.seed, cfg.seed);
    if (r.condition == "brp_1.0") has_p1 = true;
  }
  EXPECT_TRUE(has_p1);
  EXPECT_EQ(ablate_to_json(rows1).dump(), ablate_to_json(rows2).dump());
  // text table has a header and one aligned row per condition
  const std::string text = ablate_to_text(rows1);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 7);
  fs::remove_all(dir);
}
