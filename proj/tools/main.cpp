#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>

#include "splatflow/commands.hpp"
#include "splatflow/threading.hpp"

using namespace splatflow;

namespace {

// config file first, then flag overrides (flags win)
struct CommonOpts {
  std::string config_path;
  std::string dataset;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;

  RunConfig resolve() const {
    RunConfig cfg =
        config_path.empty() ? default_run_config() : load_run_config(config_path);
    if (!dataset.empty()) cfg.dataset_dir = dataset;
    if (seed_set) cfg.seed = seed;
    if (threads > 0) cfg.threads = threads;
    set_default_threads(cfg.threads);
    return cfg;
  }
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "run config JSON file");
  cmd->add_option("--dataset", opts.dataset, "dataset directory (overrides config)");
  cmd->add_option("--seed", opts.seed, "master seed (overrides config)")
      ->each([&opts](const std::string&) { opts.seed_set = true; });
  cmd->add_option("--threads", opts.threads, "worker threads (overrides config)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"splatflow: generative sparse-view 3D Gaussian reconstruction"};
  app.require_subcommand(1);

  CommonOpts synth_opts;
  auto* synth = app.add_subcommand("synth", "synthesize the object dataset");
  add_common(synth, synth_opts);
  int synth_objects = 0;
  synth->add_option("--objects", synth_objects, "object count (overrides config)");

  std::string bt_in, bt_out;
  int bt_target = 0;
  auto* build_tree_cmd = app.add_subcommand("build-tree", "build an LoD tree from a PLY");
  build_tree_cmd->add_option("--ply", bt_in, "input PLY")->required();
  build_tree_cmd->add_option("--out", bt_out, "output tree file")->required();
  build_tree_cmd->add_option("--leaves", bt_target,
                             "power-of-two leaf count (default: next power of two)");

  std::string it_path;
  auto* inspect = app.add_subcommand("inspect-tree", "per-depth counts and residuals");
  inspect->add_option("--tree", it_path, "tree file")->required();

  CommonOpts train_opts;
  int train_stage = 0;
  std::string train_run_dir = "runs/latest";
  auto* train = app.add_subcommand("train", "two-stage curriculum training");
  add_common(train, train_opts);
  train->add_option("--stage", train_stage, "1, 2, or 0 for both (default)");
  train->add_option("--run-dir", train_run_dir, "output directory");
  int train_s1 = -1, train_s2 = -1;
  train->add_option("--stage1-steps", train_s1, "override stage-1 step count");
  train->add_option("--stage2-steps", train_s2, "override stage-2 step count");

  CommonOpts rec_opts;
  std::string rec_object, rec_mode = "full", rec_ckpt, rec_out = "recon";
  std::uint64_t rec_seed = 0;
  bool rec_oracle = false;
  double rec_cfg_scale = -1, rec_lambda = -1;
  auto* rec = app.add_subcommand("reconstruct", "guided sampling for one object");
  add_common(rec, rec_opts);
  rec->add_option("--object", rec_object, "dataset object id")->required();
  rec->add_option("--mode", rec_mode, "full or partial")
      ->check(CLI::IsMember({"full", "partial"}));
  rec->add_option("--checkpoint", rec_ckpt, "trained checkpoint");
  rec->add_flag("--oracle-denoiser", rec_oracle,
                "substitute the ground-truth x-prediction (test hook)");
  rec->add_option("--out", rec_out, "output directory");
  rec->add_option("--sample-seed", rec_seed, "sampler seed");
  rec->add_option("--cfg-scale", rec_cfg_scale, "classifier-free guidance scale");
  rec->add_option("--lambda-pg", rec_lambda, "photometric guidance scale");

  std::string rn_ply, rn_cams, rn_out = "render.png";
  int rn_index = 0;
  int rn_threads = 0;
  auto* rn = app.add_subcommand("render", "render a PLY from a stored camera");
  rn->add_option("--ply", rn_ply, "gaussian PLY")->required();
  rn->add_option("--cameras", rn_cams, "cameras.txt")->required();
  rn->add_option("--cam-index", rn_index, "camera line index");
  rn->add_option("--out", rn_out, "output PNG path");
  rn->add_option("--threads", rn_threads, "worker threads");

  std::string ev_dir;
  auto* ev = app.add_subcommand("eval", "aggregate reconstruction metrics");
  ev->add_option("--run-dir", ev_dir, "directory holding metrics.json files")->required();

  std::string ex_tree, ex_out;
  int ex_depth = -1;
  auto* ex = app.add_subcommand("export-ply", "export a tree slice as PLY");
  ex->add_option("--tree", ex_tree, "tree file")->required();
  ex->add_option("--out", ex_out, "output PLY")->required();
  ex->add_option("--depth", ex_depth, "slice depth (default: leaves)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage errors exit 1
  }

  try {
    if (synth->parsed()) {
      RunConfig cfg = synth_opts.resolve();
      if (synth_objects > 0) cfg.n_objects = synth_objects;
      cmd_synth(cfg);
    } else if (build_tree_cmd->parsed()) {
      cmd_build_tree(bt_in, bt_out, bt_target);
    } else if (inspect->parsed()) {
      cmd_inspect_tree(it_path);
    } else if (train->parsed()) {
      RunConfig cfg = train_opts.resolve();
      if (train_s1 >= 0) cfg.stage1_steps = train_s1;
      if (train_s2 >= 0) cfg.stage2_steps = train_s2;
      cmd_train(cfg, train_stage, train_run_dir);
    } else if (rec->parsed()) {
      RunConfig cfg = rec_opts.resolve();
      if (rec_cfg_scale >= 0) cfg.guidance.cfg_scale = rec_cfg_scale;
      if (rec_lambda >= 0) cfg.guidance.lambda_pg = rec_lambda;
      cmd_reconstruct(cfg, "", rec_ckpt, rec_object, rec_mode, rec_oracle, rec_seed,
                      rec_out);
    } else if (rn->parsed()) {
      cmd_render(rn_ply, rn_cams, rn_index, rn_out, Vec3(1, 1, 1),
                 rn_threads > 0 ? rn_threads : default_threads());
    } else if (ev->parsed()) {
      cmd_eval(ev_dir);
    } else if (ex->parsed()) {
      cmd_export_ply(ex_tree, ex_depth, ex_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
