#include "splatflow/synth.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "splatflow/image.hpp"
#include "splatflow/ply.hpp"
#include "splatflow/renderer.hpp"
#include "splatflow/threading.hpp"

namespace splatflow {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* family_name(ObjectFamily f) {
  switch (f) {
    case ObjectFamily::kSphere: return "sphere";
    case ObjectFamily::kBox: return "box";
    case ObjectFamily::kTorus: return "torus";
    case ObjectFamily::kTwoBlob: return "two-blob";
  }
  return "unknown";
}

ObjectFamily family_from_name(const std::string& name) {
  if (name == "sphere") return ObjectFamily::kSphere;
  if (name == "box") return ObjectFamily::kBox;
  if (name == "torus") return ObjectFamily::kTorus;
  if (name == "two-blob") return ObjectFamily::kTwoBlob;
  throw std::invalid_argument("unknown object family: " + name);
}

namespace {

constexpr double kGolden = 2.39996322972865332;  // golden angle

// orthonormal right-handed frame with col(2) = n
Mat3 frame_from_normal(const Vec3& n) {
  Vec3 t1 = n.cross(Vec3(0, 0, 1));
  if (t1.norm() < 1e-6) t1 = n.cross(Vec3(0, 1, 0));
  t1.normalize();
  const Vec3 t2 = n.cross(t1);
  Mat3 f;
  f.col(0) = t1;
  f.col(1) = t2;
  f.col(2) = n;
  return f;
}

Vec3 scheme_color(int scheme, double u, const Vec3& pos) {
  // raw (pre-sigmoid) channels; smooth over the surface
  const double phase = scheme * 1.7;
  return Vec3(2.0 * std::sin(6.28318 * u + phase),
              2.0 * std::sin(6.28318 * u + phase + 2.094 + 0.5 * pos.z()),
              2.0 * std::sin(6.28318 * u + phase + 4.189 - 0.5 * pos.x()));
}

struct SurfaceSample {
  Vec3 pos;
  Vec3 normal;
  double u = 0;  // color parameter in [0,1)
};

std::vector<SurfaceSample> sample_family(ObjectFamily family, int n, Rng& rng) {
  std::vector<SurfaceSample> out;
  out.reserve(static_cast<std::size_t>(n));
  switch (family) {
    case ObjectFamily::kSphere: {
      for (int i = 0; i < n; ++i) {
        const double z = 1.0 - 2.0 * (i + 0.5) / n;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double a = kGolden * i;
        Vec3 dir(r * std::cos(a), r * std::sin(a), z);
        const double radius = 1.0 + rng.uniform(-0.03, 0.03);
        out.push_back({radius * dir, dir, static_cast<double>(i) / n});
      }
      break;
    }
    case ObjectFamily::kBox: {
      const double half = 0.8;
      for (int i = 0; i < n; ++i) {
        const int face = i % 6;
        const double a = rng.uniform(-half, half);
        const double b = rng.uniform(-half, half);
        Vec3 p, nrm;
        const int axis = face / 2;
        const double s = (face % 2 == 0) ? 1.0 : -1.0;
        p(axis) = s * half;
        p((axis + 1) % 3) = a;
        p((axis + 2) % 3) = b;
        nrm = Vec3::Zero();
        nrm(axis) = s;
        out.push_back({p, nrm, static_cast<double>(i) / n});
      }
      break;
    }
    case ObjectFamily::kTorus: {
      const double major = 0.7, minor = 0.35;
      for (int i = 0; i < n; ++i) {
        const double u = 6.283185307179586 * ((i + 0.5) / n);
        const double v = kGolden * i + rng.uniform(0, 0.1);
        const Vec3 ring(std::cos(u), std::sin(u), 0);
        const Vec3 nrm =
            std::cos(v) * ring + std::sin(v) * Vec3(0, 0, 1);
        out.push_back({major * ring + minor * nrm, nrm, static_cast<double>(i) / n});
      }
      break;
    }
    case ObjectFamily::kTwoBlob: {
      const Vec3 centers[2] = {Vec3(-0.55, 0, 0), Vec3(0.55, 0.1, 0.05)};
      const double radii[2] = {0.45, 0.38};
      for (int i = 0; i < n; ++i) {
        const int blob = i % 2;
        const int j = i / 2;
        const int m = (n + 1 - blob) / 2;
        const double z = 1.0 - 2.0 * (j + 0.5) / m;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double a = kGolden * j + blob * 1.3;
        Vec3 dir(r * std::cos(a), r * std::sin(a), z);
        out.push_back({centers[blob] + radii[blob] * dir, dir,
                       0.5 * blob + 0.5 * static_cast<double>(j) / m});
      }
      break;
    }
  }
  return out;
}

}  // namespace

GaussianSet make_object(const ObjectSpec& spec) {
  if (spec.gaussian_count < 1)
    throw std::invalid_argument("make_object: gaussian_count < 1");
  Rng rng(spec.seed ^ (0x5f3759dfull + static_cast<std::uint64_t>(spec.family) * 977 +
                       static_cast<std::uint64_t>(spec.color_scheme) * 131071));

  const std::vector<SurfaceSample> samples =
      sample_family(spec.family, spec.gaussian_count, rng);

  // tangent footprint from the surface area per sample
  const double spacing = std::sqrt(12.57 / static_cast<double>(spec.gaussian_count));
  GaussianSet set;
  set.gaussians.reserve(samples.size());
  for (const SurfaceSample& s : samples) {
    Gaussian3D g;
    g.mean = s.pos;
    const Mat3 frame = frame_from_normal(s.normal);
    g.rotation = rotmat_to_quat(frame);
    const double tangent = spacing * rng.uniform(0.55, 0.75);
    g.log_scale = Vec3(std::log(tangent), std::log(tangent * rng.uniform(0.8, 1.25)),
                       std::log(tangent * 0.22));
    g.logit_opacity = rng.uniform(1.0, 4.0);
    g.rgb = scheme_color(spec.color_scheme, s.u, s.pos);
    set.gaussians.push_back(g);
  }
  return resample_to_pow2(set, spec.gaussian_count);
}

std::vector<Camera> camera_rig(int n, double radius, int image_size, double fov_deg) {
  if (n < 8) throw std::invalid_argument("camera_rig: need at least 8 cameras");
  std::vector<Camera> cams;
  cams.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double a = kGolden * i;
    const Vec3 eye = radius * Vec3(r * std::cos(a), r * std::sin(a), z);
    cams.push_back(make_lookat_camera(eye, Vec3(0, 0, 0), Vec3(0, 0, 1), fov_deg,
                                      image_size, image_size));
  }
  return cams;
}

std::vector<int> validation_indices(int n_cams, int count) {
  std::vector<int> out;
  for (int i = 0; i < count; ++i)
    out.push_back(static_cast<int>((static_cast<std::int64_t>(i) * n_cams) / count));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

namespace {

// k-means with chordal distance on unit directions; returns cluster index per
// input. Deterministic given the rng. Empty clusters are reseeded to the
// point farthest from all centroids.
std::vector<int> kmeans_directions(const std::vector<Vec3>& dirs, int k, Rng& rng) {
  const int n = static_cast<int>(dirs.size());
  if (n < k) throw std::invalid_argument("kmeans: fewer points than clusters");

  std::vector<Vec3> centroids;
  std::vector<int> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  for (int c = 0; c < k; ++c) {
    const int pick = rng.uniform_int(static_cast<int>(pool.size()));
    centroids.push_back(dirs[static_cast<std::size_t>(pool[static_cast<std::size_t>(pick)])]);
    pool.erase(pool.begin() + pick);
  }

  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  for (int iter = 0; iter < 20; ++iter) {
    for (int i = 0; i < n; ++i) {
      double best = 1e30;
      for (int c = 0; c < k; ++c) {
        const double d = (dirs[static_cast<std::size_t>(i)] - centroids[static_cast<std::size_t>(c)]).squaredNorm();
        if (d < best) {
          best = d;
          assign[static_cast<std::size_t>(i)] = c;
        }
      }
    }
    for (int c = 0; c < k; ++c) {
      Vec3 mean = Vec3::Zero();
      int count = 0;
      for (int i = 0; i < n; ++i)
        if (assign[static_cast<std::size_t>(i)] == c) {
          mean += dirs[static_cast<std::size_t>(i)];
          ++count;
        }
      if (count == 0) {
        // reseed to the point farthest from every centroid
        int far = 0;
        double far_d = -1;
        for (int i = 0; i < n; ++i) {
          double dmin = 1e30;
          for (const Vec3& ctr : centroids)
            dmin = std::min(dmin, (dirs[static_cast<std::size_t>(i)] - ctr).squaredNorm());
          if (dmin > far_d) {
            far_d = dmin;
            far = i;
          }
        }
        centroids[static_cast<std::size_t>(c)] = dirs[static_cast<std::size_t>(far)];
      } else if (mean.norm() > 1e-12) {
        centroids[static_cast<std::size_t>(c)] = mean / mean.norm();
      }
    }
  }
  return assign;
}

std::vector<int> selection_pool(int n_cams, const std::vector<int>& validation) {
  std::vector<int> pool;
  for (int i = 0; i < n_cams; ++i)
    if (std::find(validation.begin(), validation.end(), i) == validation.end())
      pool.push_back(i);
  return pool;
}

std::vector<Vec3> pool_directions(const std::vector<Camera>& cams,
                                  const std::vector<int>& pool) {
  std::vector<Vec3> dirs;
  dirs.reserve(pool.size());
  for (int i : pool) dirs.push_back(cams[static_cast<std::size_t>(i)].center().normalized());
  return dirs;
}

}  // namespace

ViewSelection select_views_full(const std::vector<Camera>& cams,
                                const std::vector<int>& validation, int k, Rng& rng) {
  const std::vector<int> pool = selection_pool(static_cast<int>(cams.size()), validation);
  if (static_cast<int>(pool.size()) < k)
    throw std::invalid_argument("select_views_full: not enough cameras");
  const std::vector<Vec3> dirs = pool_directions(cams, pool);
  const std::vector<int> assign = kmeans_directions(dirs, k, rng);

  std::vector<std::vector<int>> clusters(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < pool.size(); ++i)
    clusters[static_cast<std::size_t>(assign[i])].push_back(pool[i]);
  for (const auto& members : clusters)
    if (members.empty())
      throw std::invalid_argument("select_views_full: degenerate rig (empty cluster)");

  // one view per cluster: a sampled anchor, then per cluster the member
  // farthest from everything already chosen, for reliable angular coverage
  ViewSelection sel;
  sel.mode = "full";
  sel.validation_indices = validation;
  auto dir = [&](int i) { return cams[static_cast<std::size_t>(i)].center().normalized(); };
  const int first = rng.uniform_int(k);
  sel.input_indices.push_back(clusters[static_cast<std::size_t>(first)][static_cast<std::size_t>(
      rng.uniform_int(static_cast<int>(clusters[static_cast<std::size_t>(first)].size())))]);
  for (int c = 0; c < k; ++c) {
    if (c == first) continue;
    int best = -1;
    double best_sep = -1;
    for (int m : clusters[static_cast<std::size_t>(c)]) {
      double sep = 1e30;
      for (int chosen : sel.input_indices)
        sep = std::min(sep, (dir(m) - dir(chosen)).squaredNorm());
      if (sep > best_sep) {
        best_sep = sep;
        best = m;
      }
    }
    sel.input_indices.push_back(best);
  }
  std::sort(sel.input_indices.begin(), sel.input_indices.end());
  return sel;
}

ViewSelection select_views_partial(const std::vector<Camera>& cams,
                                   const std::vector<int>& validation, Rng& rng) {
  const std::vector<int> pool = selection_pool(static_cast<int>(cams.size()), validation);
  if (pool.size() < 4)
    throw std::invalid_argument("select_views_partial: fewer than 4 cameras");
  const std::vector<Vec3> dirs = pool_directions(cams, pool);

  for (int k = 4; k >= 1; --k) {
    const std::vector<int> assign = kmeans_directions(dirs, k, rng);
    std::vector<std::vector<int>> clusters(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < pool.size(); ++i)
      clusters[static_cast<std::size_t>(assign[i])].push_back(pool[i]);
    std::vector<int> eligible;
    for (int c = 0; c < k; ++c)
      if (clusters[static_cast<std::size_t>(c)].size() >= 4) eligible.push_back(c);
    if (eligible.empty()) continue;  // re-cluster with smaller k

    const int cluster = eligible[static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(eligible.size())))];
    const std::vector<int>& members = clusters[static_cast<std::size_t>(cluster)];
    // the tightest greedy 4-subset of the sampled cluster; plain uniform
    // draws from a quadrant-sized cluster spread too far to count as
    // concentrated
    auto dir = [&](int i) { return cams[static_cast<std::size_t>(i)].center().normalized(); };
    std::vector<int> tightest;
    double tightest_spread = 1e30;
    for (int anchor : members) {
      std::vector<int> chosen{anchor};
      double spread = 0;
      while (chosen.size() < 4) {
        int best = -1;
        double best_d = 1e30;
        for (int m : members) {
          if (std::find(chosen.begin(), chosen.end(), m) != chosen.end()) continue;
          double d = 0;
          for (int c : chosen) d = std::max(d, (dir(m) - dir(c)).squaredNorm());
          if (d < best_d) {
            best_d = d;
            best = m;
          }
        }
        chosen.push_back(best);
        spread = std::max(spread, best_d);
      }
      if (spread < tightest_spread) {
        tightest_spread = spread;
        tightest = chosen;
      }
    }
    ViewSelection sel;
    sel.mode = "partial";
    sel.validation_indices = validation;
    sel.input_indices = tightest;
    std::sort(sel.input_indices.begin(), sel.input_indices.end());
    return sel;
  }
  throw std::invalid_argument("select_views_partial: no cluster with 4 members");
}

void write_selections(const std::vector<ViewSelection>& sels, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_selections: cannot open " + path);
  for (const ViewSelection& s : sels) {
    out << s.mode << ":";
    for (int i : s.input_indices) out << ' ' << i;
    out << "\nvalidation:";
    for (int i : s.validation_indices) out << ' ' << i;
    out << '\n';
  }
}

std::vector<ViewSelection> read_selections(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_selections: cannot open " + path);
  std::vector<ViewSelection> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    const std::string tag = line.substr(0, colon);
    std::istringstream rest(line.substr(colon + 1));
    std::vector<int> ids;
    int v;
    while (rest >> v) ids.push_back(v);
    if (tag == "validation") {
      if (!out.empty()) out.back().validation_indices = ids;
    } else {
      ViewSelection s;
      s.mode = tag;
      s.input_indices = ids;
      out.push_back(s);
    }
  }
  return out;
}

namespace {

json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["version"] = 1;
  j["config_hash"] = m.config_hash;
  j["image_size"] = m.image_size;
  j["rig_cameras"] = m.rig_cameras;
  j["rig_radius"] = m.rig_radius;
  j["gaussian_count"] = m.gaussian_count;
  j["coarse_depth"] = m.coarse_depth;
  j["seed"] = m.seed;
  j["background"] = {m.background(0), m.background(1), m.background(2)};
  j["objects"] = json::array();
  for (const auto& o : m.objects)
    j["objects"].push_back(
        {{"id", o.id}, {"family", o.family}, {"seed", o.seed}, {"split", o.split}});
  std::vector<double> mean(m.stats.channel_mean.data(), m.stats.channel_mean.data() + 14);
  std::vector<double> stdv(m.stats.channel_std.data(), m.stats.channel_std.data() + 14);
  j["norm_stats"] = {{"mean", mean}, {"std", stdv}};
  return j;
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.config_hash = j.at("config_hash");
  m.image_size = j.at("image_size");
  m.rig_cameras = j.at("rig_cameras");
  m.rig_radius = j.at("rig_radius");
  m.gaussian_count = j.at("gaussian_count");
  m.coarse_depth = j.at("coarse_depth");
  m.seed = j.at("seed");
  m.background = Vec3(j.at("background").at(0), j.at("background").at(1),
                      j.at("background").at(2));
  for (const auto& o : j.at("objects"))
    m.objects.push_back({o.at("id"), o.at("family"), o.at("seed"), o.at("split")});
  const auto& mean = j.at("norm_stats").at("mean");
  const auto& stdv = j.at("norm_stats").at("std");
  for (int c = 0; c < kParamChannels; ++c) {
    m.stats.channel_mean(c) = mean.at(static_cast<std::size_t>(c));
    m.stats.channel_std(c) = stdv.at(static_cast<std::size_t>(c));
  }
  return m;
}

}  // namespace

void write_manifest(const DatasetManifest& m, const std::string& dataset_dir) {
  const fs::path final_path = fs::path(dataset_dir) / "manifest.txt";
  const fs::path tmp_path = fs::path(dataset_dir) / "manifest.txt.tmp";
  {
    std::ofstream out(tmp_path);
    if (!out) throw std::runtime_error("write_manifest: cannot open " + tmp_path.string());
    out << manifest_to_json(m).dump(2) << '\n';
  }
  fs::rename(tmp_path, final_path);
}

DatasetManifest read_manifest(const std::string& dataset_dir) {
  const fs::path path = fs::path(dataset_dir) / "manifest.txt";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_manifest: cannot open " + path.string());
  json j;
  in >> j;
  return manifest_from_json(j);
}

DatasetManifest build_dataset(const DatasetConfig& cfg) {
  const fs::path root(cfg.out_dir);
  fs::create_directories(root / "objects");

  const std::vector<Camera> rig =
      camera_rig(cfg.rig_cameras, cfg.rig_radius, cfg.image_size);
  const std::vector<int> val_cams = validation_indices(cfg.rig_cameras);

  DatasetManifest manifest;
  manifest.config_hash = cfg.config_hash;
  manifest.image_size = cfg.image_size;
  manifest.rig_cameras = cfg.rig_cameras;
  manifest.rig_radius = cfg.rig_radius;
  manifest.gaussian_count = cfg.gaussian_count;
  manifest.coarse_depth = cfg.coarse_depth;
  manifest.seed = cfg.seed;
  manifest.background = cfg.background;
  manifest.objects.resize(static_cast<std::size_t>(cfg.n_objects));

  const ObjectFamily families[4] = {ObjectFamily::kSphere, ObjectFamily::kBox,
                                    ObjectFamily::kTorus, ObjectFamily::kTwoBlob};

  std::vector<GaussianSet> coarse_train_slices(static_cast<std::size_t>(cfg.n_objects));
  std::exception_ptr failure;
  std::mutex failure_mutex;

  parallel_for_chunks(cfg.n_objects, cfg.threads, [&](std::int64_t b, std::int64_t e, int) {
    for (std::int64_t oi = b; oi < e; ++oi) {
      try {
        char id[16];
        std::snprintf(id, sizeof(id), "obj%04d", static_cast<int>(oi));
        ObjectSpec spec;
        spec.family = families[oi % 4];
        spec.gaussian_count = cfg.gaussian_count;
        spec.color_scheme = static_cast<int>(oi % 7);
        spec.seed = cfg.seed + 1000003ull * static_cast<std::uint64_t>(oi);

        const GaussianSet set = make_object(spec);
        const GaussianTree tree = build_tree(set);

        const fs::path dir = root / "objects" / id;
        fs::create_directories(dir / "views");
        write_ply(set, (dir / "gaussians.ply").string());
        write_tree(tree, (dir / "tree.bin").string());
        write_cameras(rig, (dir / "cameras.txt").string());

        for (std::size_t ci = 0; ci < rig.size(); ++ci) {
          const Image img = render(set, rig[ci], cfg.background, 1);
          char cam_name[32];
          std::snprintf(cam_name, sizeof(cam_name), "cam%02d", static_cast<int>(ci));
          write_png(img, (dir / "views" / (std::string(cam_name) + ".png")).string());
          write_image_f32(img, (dir / "views" / (std::string(cam_name) + ".f32")).string());
        }

        Rng sel_rng(spec.seed ^ 0xabcdef123456ull);
        std::vector<ViewSelection> sels;
        sels.push_back(select_views_full(rig, val_cams, 4, sel_rng));
        sels.push_back(select_views_partial(rig, val_cams, sel_rng));
        write_selections(sels, (dir / "selections.txt").string());

        DatasetManifest::Object rec;
        rec.id = id;
        rec.family = family_name(spec.family);
        rec.seed = spec.seed;
        rec.split = (oi % 10 == 9) ? "val" : "train";
        manifest.objects[static_cast<std::size_t>(oi)] = rec;
        if (rec.split == "train")
          coarse_train_slices[static_cast<std::size_t>(oi)] =
              slice_depth(tree, std::min(cfg.coarse_depth, tree.max_depth));
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  });
  if (failure) std::rethrow_exception(failure);

  std::vector<GaussianSet> train_slices;
  for (auto& s : coarse_train_slices)
    if (!s.empty()) train_slices.push_back(std::move(s));
  manifest.stats = compute_norm_stats(train_slices);

  write_manifest(manifest, cfg.out_dir);
  return manifest;
}

}  // namespace splatflow
