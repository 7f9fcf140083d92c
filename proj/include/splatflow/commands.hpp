#pragma once

#include <optional>
#include <string>
#include <vector>

#include "splatflow/runconfig.hpp"

namespace splatflow {

// Lazy accessors over a persisted dataset directory.
struct DatasetHandle {
  std::string dir;
  DatasetManifest manifest;
  std::vector<Camera> rig;
  std::vector<int> validation;

  const DatasetManifest::Object& object_record(const std::string& id) const;
  GaussianSet load_gaussians(const std::string& id) const;
  GaussianTree load_tree(const std::string& id) const;
  Image load_view(const std::string& id, int cam) const;
  std::vector<View> make_views(const std::string& id, const std::vector<int>& cams) const;
  std::vector<ViewSelection> load_selections(const std::string& id) const;
  std::string object_dir(const std::string& id) const;
};

DatasetHandle open_dataset(const std::string& dir);

struct ReconstructRequest {
  std::string object_id;
  std::string mode = "full";  // which stored selection to condition on
  int depth = 7;              // 2^depth Gaussians are sampled
  GuidanceConfig guidance;
  std::uint64_t seed = 0;
  bool oracle = false;                   // ground-truth x-prediction test hook
  const DenoiserModel* model = nullptr;  // required unless oracle
  NormStats stats;
  int threads = 1;
};

struct ReconstructResult {
  GaussianSet set;
  std::vector<SampleStepRecord> trace;
  std::vector<int> input_views;
  std::vector<std::pair<int, double>> val_psnrs;  // (camera, dB)
  double mean_val_psnr = 0;
  double mean_seen_psnr = 0;
};

ReconstructResult reconstruct_object(const DatasetHandle& ds,
                                     const ReconstructRequest& req);

// Training entry point shared by the CLI and the acceptance suite.
// stage: 1, 2, or 0 for both. Writes config.json, train_log.jsonl and
// stage<k>.ckpt into run_dir. Returns the final checkpoint path.
std::string run_training(const RunConfig& cfg, int stage, const std::string& run_dir,
                         std::ostream* progress = nullptr);

// CLI command bodies; they throw on failure (main maps exceptions to exit 2).
void cmd_synth(const RunConfig& cfg);
void cmd_build_tree(const std::string& ply_in, const std::string& tree_out,
                    int pow2_target);
void cmd_inspect_tree(const std::string& tree_path);
void cmd_train(const RunConfig& cfg, int stage, const std::string& run_dir);
void cmd_reconstruct(const RunConfig& cfg, const std::string& run_dir,
                     const std::string& checkpoint, const std::string& object_id,
                     const std::string& mode, bool oracle, std::uint64_t seed,
                     const std::string& out_dir);
void cmd_render(const std::string& ply_path, const std::string& cameras_path,
                int cam_index, const std::string& out_png, const Vec3& background,
                int threads);
void cmd_eval(const std::string& run_dir);
void cmd_export_ply(const std::string& tree_path, int depth, const std::string& out_ply);

}  // namespace splatflow
