#include "splatflow/commands.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

#include "splatflow/image.hpp"
#include "splatflow/ply.hpp"
#include "splatflow/threading.hpp"

namespace splatflow {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- dataset

DatasetHandle open_dataset(const std::string& dir) {
  DatasetHandle h;
  h.dir = dir;
  h.manifest = read_manifest(dir);
  h.rig = camera_rig(h.manifest.rig_cameras, h.manifest.rig_radius,
                     h.manifest.image_size);
  h.validation = validation_indices(h.manifest.rig_cameras);
  return h;
}

const DatasetManifest::Object& DatasetHandle::object_record(const std::string& id) const {
  for (const auto& o : manifest.objects)
    if (o.id == id) return o;
  throw std::runtime_error("dataset: unknown object id " + id);
}

std::string DatasetHandle::object_dir(const std::string& id) const {
  return (fs::path(dir) / "objects" / id).string();
}

GaussianSet DatasetHandle::load_gaussians(const std::string& id) const {
  return read_ply((fs::path(object_dir(id)) / "gaussians.ply").string());
}

GaussianTree DatasetHandle::load_tree(const std::string& id) const {
  return read_tree((fs::path(object_dir(id)) / "tree.bin").string());
}

Image DatasetHandle::load_view(const std::string& id, int cam) const {
  char name[32];
  std::snprintf(name, sizeof(name), "cam%02d.f32", cam);
  Image img = read_image_f32((fs::path(object_dir(id)) / "views" / name).string());
  img.background = manifest.background;
  return img;
}

std::vector<View> DatasetHandle::make_views(const std::string& id,
                                            const std::vector<int>& cams) const {
  std::vector<View> out;
  out.reserve(cams.size());
  for (int c : cams) out.push_back({rig[static_cast<std::size_t>(c)], load_view(id, c)});
  return out;
}

std::vector<ViewSelection> DatasetHandle::load_selections(const std::string& id) const {
  return read_selections((fs::path(object_dir(id)) / "selections.txt").string());
}

// ----------------------------------------------------------- reconstruct

ReconstructResult reconstruct_object(const DatasetHandle& ds,
                                     const ReconstructRequest& req) {
  const auto& record = ds.object_record(req.object_id);
  (void)record;
  const std::vector<ViewSelection> sels = ds.load_selections(req.object_id);
  const ViewSelection* sel = nullptr;
  for (const auto& s : sels)
    if (s.mode == req.mode) sel = &s;
  if (!sel) throw std::runtime_error("reconstruct: no stored selection for mode " + req.mode);

  const int n_gaussians = 1 << req.depth;
  const std::vector<View> seen = ds.make_views(req.object_id, sel->input_indices);

  std::unique_ptr<Denoiser> oracle;
  std::unique_ptr<ConditionedDenoiser> conditioned;
  Denoiser* denoiser = nullptr;
  if (req.oracle) {
    const GaussianTree tree = ds.load_tree(req.object_id);
    if (req.depth > tree.max_depth)
      throw std::runtime_error("reconstruct: depth exceeds the stored tree");
    const GaussianSet slice = slice_depth(tree, req.depth);
    const Eigen::MatrixXd z1 = normalize_rows(set_to_matrix(slice), req.stats);
    oracle = std::make_unique<OracleDenoiser>(patchify(z1).tokens);
    denoiser = oracle.get();
  } else {
    if (!req.model) throw std::runtime_error("reconstruct: no model and no oracle");
    conditioned = std::make_unique<ConditionedDenoiser>(
        *req.model, encode_condition(seen, req.model->config().patch_size));
    denoiser = conditioned.get();
  }

  ReconstructResult res;
  res.input_views = sel->input_indices;
  Rng rng(req.seed);
  res.set = sample(*denoiser, req.stats, seen, n_gaussians, req.guidance, rng,
                   &res.trace, req.threads);

  double sum = 0;
  for (int cam : ds.validation) {
    const Image gt = ds.load_view(req.object_id, cam);
    const Image r = render(res.set, ds.rig[static_cast<std::size_t>(cam)],
                           ds.manifest.background, req.threads);
    const double db = psnr(r, gt);
    res.val_psnrs.emplace_back(cam, db);
    sum += db;
  }
  res.mean_val_psnr = sum / static_cast<double>(ds.validation.size());

  double seen_sum = 0;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    const Image r = render(res.set, seen[i].camera, ds.manifest.background, req.threads);
    seen_sum += psnr(r, seen[i].target);
  }
  res.mean_seen_psnr = seen_sum / static_cast<double>(seen.size());
  return res;
}

// -------------------------------------------------------------- training

namespace {

struct LoadedObject {
  std::string id;
  GaussianTree tree;
  std::vector<Image> views;  // all rig cameras
  std::vector<ViewSelection> selections;
};

std::vector<LoadedObject> load_split(const DatasetHandle& ds, const std::string& split) {
  std::vector<LoadedObject> out;
  for (const auto& rec : ds.manifest.objects) {
    if (rec.split != split) continue;
    LoadedObject o;
    o.id = rec.id;
    o.tree = ds.load_tree(rec.id);
    o.views.reserve(ds.rig.size());
    for (std::size_t c = 0; c < ds.rig.size(); ++c)
      o.views.push_back(ds.load_view(rec.id, static_cast<int>(c)));
    o.selections = ds.load_selections(rec.id);
    out.push_back(std::move(o));
  }
  return out;
}

std::vector<View> views_at(const DatasetHandle& ds, const LoadedObject& obj,
                           const std::vector<int>& cams) {
  std::vector<View> out;
  out.reserve(cams.size());
  for (int c : cams)
    out.push_back(
        {ds.rig[static_cast<std::size_t>(c)], obj.views[static_cast<std::size_t>(c)]});
  return out;
}

TrainItem make_train_item(const DatasetHandle& ds, const LoadedObject& obj,
                          const RunConfig& cfg, const NormStats& stats, int depth,
                          bool partial, Rng& item_rng) {
  TrainItem item;
  const GaussianSet slice = slice_depth(obj.tree, depth);
  item.z1 = normalize_rows(set_to_matrix(slice), stats);

  const ViewSelection sel =
      partial ? select_views_partial(ds.rig, ds.validation, item_rng)
              : select_views_full(ds.rig, ds.validation, cfg.input_views, item_rng);
  item.seen = views_at(ds, obj, sel.input_indices);

  // held-out supervision views, disjoint from inputs and validation
  std::vector<int> pool;
  for (int c = 0; c < static_cast<int>(ds.rig.size()); ++c) {
    if (std::find(sel.input_indices.begin(), sel.input_indices.end(), c) !=
        sel.input_indices.end())
      continue;
    if (std::find(ds.validation.begin(), ds.validation.end(), c) != ds.validation.end())
      continue;
    pool.push_back(c);
  }
  std::vector<int> held;
  for (int k = 0; k < cfg.held_views && !pool.empty(); ++k) {
    const int j = item_rng.uniform_int(static_cast<int>(pool.size()));
    held.push_back(pool[static_cast<std::size_t>(j)]);
    pool.erase(pool.begin() + j);
  }
  item.held = views_at(ds, obj, held);

  item.cond = encode_condition(item.seen, cfg.model.patch_size);
  item.seed = item_rng.next_u64();
  return item;
}

double quick_val_psnr(const DatasetHandle& ds, const RunConfig& cfg,
                      const DenoiserModel& model, const NormStats& stats,
                      const std::vector<LoadedObject>& val_objs, int depth,
                      std::uint64_t seed) {
  if (val_objs.empty()) return 0.0;
  const int n = std::min<int>(cfg.val_objects, static_cast<int>(val_objs.size()));
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    const LoadedObject& obj = val_objs[static_cast<std::size_t>(i)];
    const ViewSelection* full = nullptr;
    for (const auto& s : obj.selections)
      if (s.mode == "full") full = &s;
    if (!full) continue;
    const std::vector<View> seen = views_at(ds, obj, full->input_indices);
    ConditionedDenoiser den(model, encode_condition(seen, cfg.model.patch_size));
    Rng rng(seed + static_cast<std::uint64_t>(i));
    const GaussianSet set = sample(den, stats, seen, 1 << depth, cfg.guidance, rng,
                                   nullptr, cfg.threads);
    double obj_sum = 0;
    for (int cam : ds.validation) {
      const Image r = render(set, ds.rig[static_cast<std::size_t>(cam)],
                             ds.manifest.background, cfg.threads);
      obj_sum += psnr(r, obj.views[static_cast<std::size_t>(cam)]);
    }
    sum += obj_sum / static_cast<double>(ds.validation.size());
  }
  return sum / n;
}

void train_stage(const DatasetHandle& ds, const RunConfig& cfg, DenoiserModel& model,
                 const NormStats& stats, const std::vector<LoadedObject>& train_objs,
                 const std::vector<LoadedObject>& val_objs, int stage, int depth,
                 int steps, std::ofstream& log, std::ostream* progress) {
  if (train_objs.empty()) throw std::runtime_error("train: no training objects");
  OptimConfig optim = cfg.optim;
  optim.total_steps = steps;

  for (int step = 0; step < steps; ++step) {
    Rng step_rng(cfg.seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(stage)) ^
                 (0x100000001b3ull * static_cast<std::uint64_t>(step)));
    std::vector<TrainItem> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      Rng item_rng(step_rng.next_u64());
      const LoadedObject& obj = train_objs[static_cast<std::size_t>(
          item_rng.uniform_int(static_cast<int>(train_objs.size())))];
      const bool partial = item_rng.uniform() < cfg.partial_train_frac;
      batch.push_back(make_train_item(ds, obj, cfg, stats, depth, partial, item_rng));
    }

    const TrainStepResult res =
        train_step(model, stats, batch, step, optim, cfg.t_cap, cfg.threads);

    for (std::size_t i = 0; i < res.items.size(); ++i) {
      const ItemLoss& it = res.items[i];
      json line;
      line["type"] = "step";
      line["stage"] = stage;
      line["step"] = step;
      line["item"] = i;
      line["t"] = it.t;
      line["fm"] = it.loss.fm;
      line["r_held"] = it.loss.r_held;
      line["r_seen"] = it.loss.r_seen;
      line["weight"] = it.loss.weight;
      line["total"] = it.loss.total;
      line["lr"] = res.lr;
      line["grad_norm"] = res.grad_norm;
      line["dropped_cond"] = it.dropped_cond;
      log << line.dump() << '\n';
    }

    const bool last = step + 1 == steps;
    if ((cfg.val_interval > 0 && step > 0 && step % cfg.val_interval == 0) || last) {
      const double vp = quick_val_psnr(ds, cfg, model, stats, val_objs, depth,
                                       cfg.seed + static_cast<std::uint64_t>(step));
      json line;
      line["type"] = "val";
      line["stage"] = stage;
      line["step"] = step;
      line["psnr"] = vp;
      log << line.dump() << '\n';
      log.flush();
      if (progress)
        *progress << "stage " << stage << " step " << step << "/" << steps
                  << " val_psnr " << std::fixed << std::setprecision(2) << vp << "\n";
    } else if (progress && step % 500 == 0) {
      double mean_total = 0;
      for (const auto& it : res.items) mean_total += it.loss.total;
      *progress << "stage " << stage << " step " << step << "/" << steps << " loss "
                << std::setprecision(4) << mean_total / res.items.size() << " lr "
                << res.lr << "\n";
    }
  }
  log.flush();
}

Checkpoint make_checkpoint(const RunConfig& cfg, const DenoiserModel& model,
                           const NormStats& stats, std::int64_t step) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.step = step;
  ckpt.stats = stats;
  ckpt.rng_state = cfg.seed;
  ckpt.run_config_hash = config_hash(cfg);
  ckpt.store = model.params();
  return ckpt;
}

}  // namespace

std::string run_training(const RunConfig& cfg_in, int stage, const std::string& run_dir,
                         std::ostream* progress) {
  RunConfig cfg = cfg_in;
  cfg.finalize_derived();
  fs::create_directories(run_dir);
  save_run_config(cfg, (fs::path(run_dir) / "config.json").string());

  const DatasetHandle ds = open_dataset(cfg.dataset_dir);
  const NormStats stats = ds.manifest.stats;
  const std::vector<LoadedObject> train_objs = load_split(ds, "train");
  const std::vector<LoadedObject> val_objs = load_split(ds, "val");

  std::ofstream log((fs::path(run_dir) / "train_log.jsonl").string(), std::ios::app);
  if (!log) throw std::runtime_error("train: cannot open training log");

  const std::string s1_path = (fs::path(run_dir) / "stage1.ckpt").string();
  const std::string s2_path = (fs::path(run_dir) / "stage2.ckpt").string();

  DenoiserModel model(cfg.model, cfg.seed ^ 0x51ull);
  if (stage == 1 || stage == 0) {
    train_stage(ds, cfg, model, stats, train_objs, val_objs, 1, cfg.coarse_depth,
                cfg.stage1_steps, log, progress);
    save_checkpoint(make_checkpoint(cfg, model, stats, cfg.stage1_steps), s1_path);
    if (stage == 1) return s1_path;
  }

  if (stage == 2 || stage == 0) {
    if (stage == 2) {
      if (!fs::exists(s1_path))
        throw std::runtime_error(
            "train --stage 2: stage-1 checkpoint not found at " + s1_path +
            "; run stage 1 first");
      const Checkpoint ckpt = load_checkpoint(s1_path);
      ensure_config_match(cfg.model, ckpt.config);
      model.params() = ckpt.store;
    }
    // the architecture is sequence-length-agnostic, so the stage-1 parameters
    // fine-tune unchanged at the deeper slice
    train_stage(ds, cfg, model, stats, train_objs, val_objs, 2, cfg.fine_depth,
                cfg.stage2_steps, log, progress);
    save_checkpoint(make_checkpoint(cfg, model, stats, cfg.stage2_steps), s2_path);
    return s2_path;
  }
  throw std::invalid_argument("train: stage must be 0, 1 or 2");
}

// ------------------------------------------------------------- commands

void cmd_synth(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  cfg.finalize_derived();
  const DatasetManifest m = build_dataset(cfg.dataset_config());
  save_run_config(cfg, (fs::path(cfg.dataset_dir) / "config.json").string());
  int train = 0, val = 0;
  for (const auto& o : m.objects) (o.split == "train" ? train : val)++;
  std::cout << "dataset: " << m.objects.size() << " objects (" << train << " train, "
            << val << " val), " << m.rig_cameras << " cameras at " << m.image_size
            << "x" << m.image_size << ", written to " << cfg.dataset_dir << "\n";
}

void cmd_build_tree(const std::string& ply_in, const std::string& tree_out,
                    int pow2_target) {
  GaussianSet set = read_ply(ply_in);
  int target = pow2_target;
  if (target <= 0) {
    target = 1;
    while (target < static_cast<int>(set.size())) target *= 2;
  }
  set = resample_to_pow2(set, target);
  const GaussianTree tree = build_tree(set);
  write_tree(tree, tree_out);
  std::cout << "tree: " << tree.leaf_count << " leaves, depth " << tree.max_depth
            << ", " << tree.nodes.size() << " nodes -> " << tree_out << "\n";
}

void cmd_inspect_tree(const std::string& tree_path) {
  const GaussianTree tree = read_tree(tree_path);
  double leaf_mass = 0;
  Vec3 leaf_centroid = Vec3::Zero();
  const int leaf_begin = tree.level_begin(tree.max_depth);
  for (int j = 0; j < tree.leaf_count; ++j) {
    const TreeNode& n = tree.nodes[static_cast<std::size_t>(leaf_begin + j)];
    leaf_mass += n.weight;
    leaf_centroid += n.weight * n.gaussian.mean;
  }
  leaf_centroid /= leaf_mass;

  std::cout << "depth  nodes        mass   mass_residual  centroid_drift\n";
  for (int l = 0; l <= tree.max_depth; ++l) {
    double mass = 0;
    Vec3 centroid = Vec3::Zero();
    for (int j = 0; j < tree.level_count(l); ++j) {
      const TreeNode& n = tree.nodes[static_cast<std::size_t>(tree.level_begin(l) + j)];
      mass += n.weight;
      centroid += n.weight * n.gaussian.mean;
    }
    centroid /= mass;
    std::cout << std::setw(5) << l << std::setw(7) << tree.level_count(l)
              << std::setw(12) << std::setprecision(6) << std::fixed << mass
              << std::setw(16) << std::scientific
              << std::abs(mass - leaf_mass) / leaf_mass << std::setw(16)
              << (centroid - leaf_centroid).norm() << std::fixed << "\n";
  }
}

void cmd_train(const RunConfig& cfg, int stage, const std::string& run_dir) {
  const std::string ckpt = run_training(cfg, stage, run_dir, &std::cout);
  std::cout << "final checkpoint: " << ckpt << "\n";
}

void cmd_reconstruct(const RunConfig& cfg_in, const std::string& run_dir,
                     const std::string& checkpoint, const std::string& object_id,
                     const std::string& mode, bool oracle, std::uint64_t seed,
                     const std::string& out_dir) {
  (void)run_dir;
  RunConfig cfg = cfg_in;
  cfg.finalize_derived();
  const DatasetHandle ds = open_dataset(cfg.dataset_dir);

  ReconstructRequest req;
  req.object_id = object_id;
  req.mode = mode;
  req.depth = cfg.fine_depth;
  req.guidance = cfg.guidance;
  req.seed = seed;
  req.threads = cfg.threads;

  std::unique_ptr<DenoiserModel> model;
  if (oracle) {
    req.oracle = true;
    req.stats = ds.manifest.stats;
  } else {
    if (checkpoint.empty())
      throw std::runtime_error("reconstruct: --checkpoint required (or --oracle-denoiser)");
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    model = std::make_unique<DenoiserModel>(ckpt.config, 0);
    model->params() = ckpt.store;
    req.model = model.get();
    req.stats = ckpt.stats;
  }

  const ReconstructResult res = reconstruct_object(ds, req);

  fs::create_directories(fs::path(out_dir) / "renders");
  save_run_config(cfg, (fs::path(out_dir) / "config.json").string());
  write_ply(res.set, (fs::path(out_dir) / "reconstruction.ply").string());

  {
    std::ofstream trace((fs::path(out_dir) / "trace.jsonl").string());
    for (const auto& rec : res.trace) {
      json line{{"step", rec.step}, {"t", rec.t}, {"r_seen", rec.r_seen},
                {"grad_rms", rec.grad_rms}};
      trace << line.dump() << '\n';
    }
  }

  json metrics;
  metrics["object"] = object_id;
  metrics["mode"] = mode;
  metrics["seed"] = seed;
  metrics["oracle"] = oracle;
  metrics["mean_val_psnr"] = res.mean_val_psnr;
  metrics["mean_seen_psnr"] = res.mean_seen_psnr;
  metrics["views"] = json::array();
  for (const auto& [cam, db] : res.val_psnrs) {
    metrics["views"].push_back({{"cam", cam}, {"psnr", db}});
    char name[32];
    std::snprintf(name, sizeof(name), "val%02d", cam);
    const Image r = render(res.set, ds.rig[static_cast<std::size_t>(cam)],
                           ds.manifest.background, cfg.threads);
    write_png(r, (fs::path(out_dir) / "renders" / (std::string(name) + ".png")).string());
    write_image_f32(r,
                    (fs::path(out_dir) / "renders" / (std::string(name) + ".f32")).string());
  }
  std::ofstream mf((fs::path(out_dir) / "metrics.json").string());
  mf << metrics.dump(2) << '\n';

  std::cout << "reconstructed " << object_id << " (" << mode << "): mean val PSNR "
            << std::fixed << std::setprecision(2) << res.mean_val_psnr
            << " dB, seen PSNR " << res.mean_seen_psnr << " dB -> " << out_dir << "\n";
}

void cmd_render(const std::string& ply_path, const std::string& cameras_path,
                int cam_index, const std::string& out_png, const Vec3& background,
                int threads) {
  const GaussianSet set = read_ply(ply_path);
  const std::vector<Camera> cams = read_cameras(cameras_path);
  if (cam_index < 0 || cam_index >= static_cast<int>(cams.size()))
    throw std::runtime_error("render: camera index out of range");
  const Image img = render(set, cams[static_cast<std::size_t>(cam_index)], background,
                           threads);
  write_png(img, out_png);
  write_image_f32(img, out_png + ".f32");
  std::cout << "rendered " << ply_path << " view " << cam_index << " -> " << out_png
            << "\n";
}

void cmd_eval(const std::string& run_dir) {
  struct Row {
    std::string object, mode;
    double val_psnr, seen_psnr;
  };
  std::vector<Row> rows;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
    if (entry.path().filename() != "metrics.json") continue;
    std::ifstream in(entry.path());
    json m;
    in >> m;
    rows.push_back({m.at("object"), m.at("mode"), m.at("mean_val_psnr"),
                    m.at("mean_seen_psnr")});
  }
  if (rows.empty()) throw std::runtime_error("eval: no metrics.json under " + run_dir);
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return std::tie(a.mode, a.object) < std::tie(b.mode, b.object);
  });

  std::ostringstream table;
  table << std::left << std::setw(12) << "object" << std::setw(9) << "mode"
        << std::right << std::setw(12) << "val_psnr" << std::setw(12) << "seen_psnr"
        << "\n";
  for (const Row& r : rows)
    table << std::left << std::setw(12) << r.object << std::setw(9) << r.mode
          << std::right << std::setw(12) << std::fixed << std::setprecision(4)
          << r.val_psnr << std::setw(12) << r.seen_psnr << "\n";

  for (const std::string mode : {"full", "partial"}) {
    std::vector<double> vals;
    for (const Row& r : rows)
      if (r.mode == mode) vals.push_back(r.val_psnr);
    if (vals.empty()) continue;
    std::sort(vals.begin(), vals.end());
    const double mean =
        std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
    const double median = vals.size() % 2 == 1
                              ? vals[vals.size() / 2]
                              : 0.5 * (vals[vals.size() / 2 - 1] + vals[vals.size() / 2]);
    table << mode << ": n=" << vals.size() << " mean=" << std::setprecision(4) << mean
          << " median=" << median << "\n";
  }

  std::cout << table.str();
  std::ofstream out((fs::path(run_dir) / "eval.txt").string());
  out << table.str();
}

void cmd_export_ply(const std::string& tree_path, int depth, const std::string& out_ply) {
  const GaussianTree tree = read_tree(tree_path);
  const int d = depth < 0 ? tree.max_depth : depth;
  const GaussianSet slice = slice_depth(tree, d);
  write_ply(slice, out_ply);
  std::cout << "exported depth-" << d << " slice (" << slice.size() << " gaussians) -> "
            << out_ply << "\n";
}

}  // namespace splatflow
