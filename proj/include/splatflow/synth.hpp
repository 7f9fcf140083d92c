#pragma once

#include <string>
#include <vector>

#include "splatflow/camera.hpp"
#include "splatflow/gaussian.hpp"
#include "splatflow/lod_tree.hpp"
#include "splatflow/rng.hpp"

namespace splatflow {

enum class ObjectFamily { kSphere, kBox, kTorus, kTwoBlob };

const char* family_name(ObjectFamily f);
ObjectFamily family_from_name(const std::string& name);

struct ObjectSpec {
  ObjectFamily family = ObjectFamily::kSphere;
  int gaussian_count = 128;  // power of two
  int color_scheme = 0;
  std::uint64_t seed = 0;
};

// Gaussians on the family's parametric surface, tangent-aligned anisotropic
// scales, opacity logits in [1, 4], deterministic colors. Same spec, same set.
GaussianSet make_object(const ObjectSpec& spec);

// Fibonacci-sphere rig of n >= 8 cameras at the given radius, all looking at
// the origin, 50 degree vertical fov.
std::vector<Camera> camera_rig(int n, double radius, int image_size = 64,
                               double fov_deg = 50.0);

struct ViewSelection {
  std::string mode;  // "full" or "partial"
  std::vector<int> input_indices;
  std::vector<int> validation_indices;
};

// Fixed broad-coverage validation set: `count` evenly spaced rig indices.
std::vector<int> validation_indices(int n_cams, int count = 8);

// K-means (k clusters, 20 iterations, chordal distance on unit view
// directions, seeded init) over the non-validation cameras, then one sampled
// camera per cluster.
ViewSelection select_views_full(const std::vector<Camera>& cams,
                                const std::vector<int>& validation, int k, Rng& rng);

// One cluster chosen uniformly among those with >= 4 members (re-clustered
// with smaller k when necessary), then 4 sampled members.
ViewSelection select_views_partial(const std::vector<Camera>& cams,
                                   const std::vector<int>& validation, Rng& rng);

struct DatasetConfig {
  std::string out_dir = "data";
  int n_objects = 64;
  int gaussian_count = 128;
  int rig_cameras = 40;
  double rig_radius = 2.7;
  int image_size = 64;
  int coarse_depth = 5;  // norm stats are computed over this slice
  std::uint64_t seed = 1234;
  std::string config_hash;
  Vec3 background = Vec3(1, 1, 1);
  int threads = 1;
};

struct DatasetManifest {
  struct Object {
    std::string id;
    std::string family;
    std::uint64_t seed = 0;
    std::string split;  // "train" or "val"
  };
  std::string config_hash;
  int image_size = 0;
  int rig_cameras = 0;
  double rig_radius = 0;
  int gaussian_count = 0;
  int coarse_depth = 0;
  std::uint64_t seed = 0;
  Vec3 background = Vec3(1, 1, 1);
  std::vector<Object> objects;
  NormStats stats;
};

// Builds objects/<id>/{gaussians.ply, tree.bin, cameras.txt, selections.txt,
// views/cam*.png, views/cam*.f32} and writes manifest.txt last (atomically).
DatasetManifest build_dataset(const DatasetConfig& cfg);

DatasetManifest read_manifest(const std::string& dataset_dir);
void write_manifest(const DatasetManifest& m, const std::string& dataset_dir);

void write_selections(const std::vector<ViewSelection>& sels, const std::string& path);
std::vector<ViewSelection> read_selections(const std::string& path);

}  // namespace splatflow
