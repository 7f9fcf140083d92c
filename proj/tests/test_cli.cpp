#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "splatflow/commands.hpp"
#include "splatflow/ply.hpp"

using namespace splatflow;
namespace fs = std::filesystem;

namespace {

// one tiny shared dataset for all CLI-level cases
struct CliFixture {
  RunConfig cfg;
  CliFixture() {
    cfg.dataset_dir = "test_cli_ds";
    cfg.n_objects = 10;
    cfg.gaussian_count = 32;
    cfg.rig_cameras = 16;
    cfg.image_size = 32;
    cfg.coarse_depth = 3;
    cfg.fine_depth = 5;
    cfg.seed = 2024;
    cfg.threads = 2;
    if (!fs::exists("test_cli_ds/manifest.txt")) cmd_synth(cfg);
  }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("run config round-trips through JSON with a stable hash") {
  RunConfig cfg;
  cfg.seed = 77;
  cfg.guidance.cfg_scale = 1.5;
  cfg.optim.lr_peak = 2e-4;
  save_run_config(cfg, "test_cfg.json");
  const RunConfig back = load_run_config("test_cfg.json");
  CHECK(back.seed == 77);
  CHECK(back.guidance.cfg_scale == 1.5);
  CHECK(back.optim.lr_peak == 2e-4);
  CHECK(config_hash(back) == config_hash(cfg));
  RunConfig other = cfg;
  other.seed = 78;
  CHECK(config_hash(other) != config_hash(cfg));
  std::remove("test_cfg.json");
}

TEST_CASE("export-ply / import / render round-trip is bit-exact") {
  CliFixture fx;
  const DatasetHandle ds = open_dataset(fx.cfg.dataset_dir);
  const std::string tree_path = ds.object_dir("obj0000") + "/tree.bin";

  cmd_export_ply(tree_path, 4, "test_slice.ply");
  const GaussianSet imported = read_ply("test_slice.ply");
  CHECK(imported.size() == 16);

  // once through float32, further round-trips are exact
  write_ply(imported, "test_slice2.ply");
  CHECK(slurp("test_slice.ply") == slurp("test_slice2.ply"));

  const Image direct = render(imported, ds.rig[0], ds.manifest.background);
  const GaussianSet imported2 = read_ply("test_slice2.ply");
  const Image via_file = render(imported2, ds.rig[0], ds.manifest.background);
  CHECK(direct.pixels == via_file.pixels);
  std::remove("test_slice.ply");
  std::remove("test_slice2.ply");
}

TEST_CASE("build-tree resamples non-power-of-two inputs") {
  CliFixture fx;
  GaussianSet odd;
  const DatasetHandle ds = open_dataset(fx.cfg.dataset_dir);
  const GaussianSet src = ds.load_gaussians("obj0001");
  for (int i = 0; i < 11; ++i) odd.gaussians.push_back(src[static_cast<std::size_t>(i)]);
  write_ply(odd, "test_odd.ply");
  cmd_build_tree("test_odd.ply", "test_odd_tree.bin", 0);
  const GaussianTree tree = read_tree("test_odd_tree.bin");
  CHECK(tree.leaf_count == 16);  // next power of two
  std::remove("test_odd.ply");
  std::remove("test_odd_tree.bin");
}

TEST_CASE("oracle reconstruction reaches 60 dB and is byte-deterministic") {
  CliFixture fx;
  const DatasetHandle ds = open_dataset(fx.cfg.dataset_dir);

  ReconstructRequest req;
  req.object_id = "obj0002";
  req.mode = "full";
  req.depth = fx.cfg.fine_depth;
  req.guidance = fx.cfg.guidance;
  req.seed = 9;
  req.oracle = true;
  req.stats = ds.manifest.stats;
  req.threads = 2;

  const ReconstructResult a = reconstruct_object(ds, req);
  CHECK(a.mean_val_psnr >= 60.0);

  const ReconstructResult b = reconstruct_object(ds, req);
  write_ply(a.set, "test_rec_a.ply");
  write_ply(b.set, "test_rec_b.ply");
  CHECK(slurp("test_rec_a.ply") == slurp("test_rec_b.ply"));
  std::remove("test_rec_a.ply");
  std::remove("test_rec_b.ply");
}

TEST_CASE("cmd_reconstruct writes artifacts and cmd_eval aggregates them") {
  CliFixture fx;
  fs::remove_all("test_cli_run");
  cmd_reconstruct(fx.cfg, "", "", "obj0003", "full", /*oracle=*/true, 5,
                  "test_cli_run/obj0003_full");
  cmd_reconstruct(fx.cfg, "", "", "obj0003", "partial", /*oracle=*/true, 5,
                  "test_cli_run/obj0003_partial");
  CHECK(fs::exists("test_cli_run/obj0003_full/reconstruction.ply"));
  CHECK(fs::exists("test_cli_run/obj0003_full/metrics.json"));
  CHECK(fs::exists("test_cli_run/obj0003_full/trace.jsonl"));

  cmd_eval("test_cli_run");
  CHECK(fs::exists("test_cli_run/eval.txt"));
  const std::string table = slurp("test_cli_run/eval.txt");
  CHECK(table.find("obj0003") != std::string::npos);
  CHECK(table.find("full") != std::string::npos);
  CHECK(table.find("partial") != std::string::npos);

  // aggregation matches an independent recomputation from the stored renders
  const DatasetHandle ds = open_dataset(fx.cfg.dataset_dir);
  double recomputed = 0;
  int count = 0;
  for (int cam : ds.validation) {
    char name[32];
    std::snprintf(name, sizeof(name), "val%02d.f32", cam);
    const Image r = read_image_f32(std::string("test_cli_run/obj0003_full/renders/") + name);
    recomputed += psnr(r, ds.load_view("obj0003", cam));
    ++count;
  }
  recomputed /= count;
  std::ifstream mf("test_cli_run/obj0003_full/metrics.json");
  std::stringstream ms;
  ms << mf.rdbuf();
  const auto pos = ms.str().find("\"mean_val_psnr\":");
  REQUIRE(pos != std::string::npos);
  const double reported = std::stod(ms.str().substr(pos + 16));
  CHECK(std::abs(reported - recomputed) < 1e-6);
  fs::remove_all("test_cli_run");
}

TEST_CASE("a zero-step stage 2 preserves the stage-1 parameters bit-exactly") {
  CliFixture fx;
  RunConfig cfg = fx.cfg;
  cfg.stage1_steps = 4;
  cfg.stage2_steps = 0;
  cfg.val_interval = 0;
  cfg.val_objects = 0;
  fs::remove_all("test_cli_curr");
  run_training(cfg, 1, "test_cli_curr");
  run_training(cfg, 2, "test_cli_curr");
  const Checkpoint s1 = load_checkpoint("test_cli_curr/stage1.ckpt");
  const Checkpoint s2 = load_checkpoint("test_cli_curr/stage2.ckpt");
  REQUIRE(s1.store.entries.size() == s2.store.entries.size());
  for (const auto& [name, e] : s1.store.entries)
    CHECK(e.value == s2.store.entries.at(name).value);
  fs::remove_all("test_cli_curr");
}

TEST_CASE("a 200-step smoke run ends with a lower loss EMA than at step 50") {
  CliFixture fx;
  RunConfig cfg = fx.cfg;
  cfg.n_objects = 8;  // dataset already built with 10; train split has 9
  cfg.stage1_steps = 200;
  cfg.stage2_steps = 0;
  cfg.batch_size = 2;
  cfg.val_interval = 0;
  cfg.val_objects = 0;
  cfg.optim.warmup_steps = 10;
  cfg.optim.lr_peak = 5e-4;  // enough movement for 200 steps to show a trend
  cfg.t_cap = 0.7;  // bound the 1/(1-t)^2 tail so the EMA is a stable signal
  fs::remove_all("test_cli_smoke");
  run_training(cfg, 1, "test_cli_smoke");

  std::ifstream log("test_cli_smoke/train_log.jsonl");
  REQUIRE(log.good());
  std::string line;
  std::map<int, std::vector<double>> per_step;
  while (std::getline(log, line)) {
    if (line.find("\"type\":\"step\"") == std::string::npos) continue;
    const auto sp = line.find("\"step\":");
    const int step = std::stoi(line.substr(sp + 7));
    const auto p = line.find("\"total\":");
    per_step[step].push_back(std::stod(line.substr(p + 8)));
  }
  REQUIRE(per_step.size() == 200);
  double ema = 0.0, ema_at_50 = 0.0;
  bool init = false;
  for (const auto& [step, totals] : per_step) {
    double mean = 0;
    for (double t : totals) mean += t;
    mean /= static_cast<double>(totals.size());
    ema = init ? 0.98 * ema + 0.02 * mean : mean;
    init = true;
    if (step == 49) ema_at_50 = ema;
  }
  CHECK(ema < ema_at_50);
  fs::remove_all("test_cli_smoke");
}

TEST_CASE("train --stage 2 without a stage-1 checkpoint is a descriptive error") {
  CliFixture fx;
  RunConfig cfg = fx.cfg;
  cfg.stage1_steps = 2;
  cfg.stage2_steps = 2;
  fs::remove_all("test_cli_stage2");
  try {
    run_training(cfg, 2, "test_cli_stage2");
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("stage-1 checkpoint") != std::string::npos);
  }
  fs::remove_all("test_cli_stage2");
}

TEST_CASE("two-stage smoke training writes logs whose bookkeeping audits cleanly") {
  CliFixture fx;
  RunConfig cfg = fx.cfg;
  cfg.stage1_steps = 8;
  cfg.stage2_steps = 4;
  cfg.batch_size = 2;
  cfg.val_interval = 0;
  cfg.val_objects = 0;
  fs::remove_all("test_cli_train");
  const std::string ckpt = run_training(cfg, 0, "test_cli_train");
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists("test_cli_train/stage1.ckpt"));
  CHECK(fs::exists("test_cli_train/config.json"));

  // stage-2 parameters start from the stage-1 checkpoint when run separately
  const Checkpoint c1 = load_checkpoint("test_cli_train/stage1.ckpt");
  CHECK(c1.step == 8);
  RunConfig finalized = cfg;
  finalized.finalize_derived();
  CHECK(c1.run_config_hash == config_hash(finalized));

  std::ifstream log("test_cli_train/train_log.jsonl");
  REQUIRE(log.good());
  std::string line;
  int audited = 0;
  while (std::getline(log, line)) {
    if (line.find("\"type\":\"step\"") == std::string::npos) continue;
    const auto get = [&](const std::string& key) {
      const auto p = line.find("\"" + key + "\":");
      REQUIRE(p != std::string::npos);
      return std::stod(line.substr(p + key.size() + 3));
    };
    const double total = get("total"), fm = get("fm"), w = get("weight");
    const double rh = get("r_held"), rs = get("r_seen");
    CHECK(std::abs(total - (fm + w * (rh + rs))) <= 1e-12);
    ++audited;
  }
  CHECK(audited == (8 + 4) * 2);
  fs::remove_all("test_cli_train");
}
