#pragma once

#include <string>

#include "splatflow/flow.hpp"
#include "splatflow/model.hpp"
#include "splatflow/synth.hpp"
#include "splatflow/trainer.hpp"

namespace splatflow {

// Every tunable of every module. Serialized into each run's output directory;
// the hash is recorded in checkpoints and dataset manifests.
struct RunConfig {
  RunConfig() {
    // desk-scale conditioning: 16px patches on 64px views (4x4 grid per view)
    model.patch_size = 16;
    model.cond_grid = 4;
  }

  // dataset
  std::string dataset_dir = "data";
  int n_objects = 64;
  int gaussian_count = 128;
  int rig_cameras = 40;
  double rig_radius = 2.7;
  int image_size = 64;
  std::uint64_t seed = 1234;

  // curriculum
  int coarse_depth = 5;
  int fine_depth = 7;

  ModelConfig model;

  // training
  int stage1_steps = 20000;
  int stage2_steps = 10000;
  int batch_size = 2;
  int input_views = 4;
  int held_views = 4;
  double partial_train_frac = 0.3;  // share of steps with partial-mode inputs
  double t_cap = kDefaultTCap;
  OptimConfig optim;
  int val_interval = 2000;
  int val_objects = 2;

  GuidanceConfig guidance;

  double background[3] = {1.0, 1.0, 1.0};
  int threads = 2;

  Vec3 background_color() const {
    return Vec3(background[0], background[1], background[2]);
  }
  DatasetConfig dataset_config() const;

  // keeps the positional table in sync with the view geometry
  void finalize_derived() {
    if (image_size % model.patch_size != 0)
      throw std::invalid_argument("RunConfig: image_size not divisible by patch_size");
    model.cond_grid = image_size / model.patch_size;
    model.validate();
    guidance.validate();
  }
};

RunConfig default_run_config();
RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);
std::string run_config_json(const RunConfig& cfg);
RunConfig run_config_from_json_text(const std::string& text);

// FNV-1a over the canonical JSON dump.
std::string config_hash(const RunConfig& cfg);

}  // namespace splatflow
