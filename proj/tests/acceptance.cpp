// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. The training-trend criterion performs the full desk-scale
// curriculum run (about an hour on two cores); its artifacts are cached in
// the work directory and reused when the config hash still matches.
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <vector>

#include "splatflow/commands.hpp"
#include "splatflow/ply.hpp"

using namespace splatflow;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(bool pass, const std::string& name, const std::string& detail) {
  std::printf("%s  %s%s%s\n", pass ? "PASS" : "FAIL", name.c_str(),
              detail.empty() ? "" : " -- ", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

RunConfig acceptance_config(const std::string& work_dir) {
  RunConfig cfg;
  cfg.dataset_dir = work_dir + "/dataset";
  cfg.n_objects = 64;
  cfg.gaussian_count = 128;
  cfg.rig_cameras = 40;
  cfg.image_size = 64;
  cfg.coarse_depth = 5;
  cfg.fine_depth = 7;
  cfg.seed = 20260811;
  cfg.stage1_steps = 20000;
  cfg.stage2_steps = 10000;
  cfg.batch_size = 2;
  cfg.threads = 2;
  cfg.val_interval = 2000;
  cfg.finalize_derived();
  return cfg;
}

// ---------------------------------------------------------------- [1]

void criterion_oracle_sampler() {
  Rng rng(101);
  Eigen::MatrixXd z1(128, kParamChannels);
  for (Eigen::Index i = 0; i < z1.rows(); ++i)
    for (Eigen::Index j = 0; j < z1.cols(); ++j) z1(i, j) = rng.normal();
  OracleDenoiser oracle(patchify(z1).tokens);
  GuidanceConfig g;
  g.cfg_scale = 1.0;
  g.lambda_pg = 0.0;
  NormStats identity;

  const auto t0 = Clock::now();
  Rng srng(7);
  const GaussianSet out = sample(oracle, identity, {}, 128, g, srng);
  const double dt = seconds_since(t0);

  // compare in normalized space; quaternions are only renormalized (unit
  // direction preserved), so check them against the normalized target
  double max_err = 0;
  const Eigen::MatrixXd rows = set_to_matrix(out);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (int c = 0; c < kParamChannels; ++c) {
      double want = z1(i, c);
      if (c >= kChRotation && c < kChRotation + 4) {
        const Eigen::Vector4d q = z1.row(i).segment<4>(kChRotation).transpose();
        want = q(c - kChRotation) / q.norm();
      }
      max_err = std::max(max_err, std::abs(rows(i, c) - want));
    }
  }
  std::ostringstream d;
  d << "max-abs " << max_err << ", " << dt << " s";
  report(max_err <= 1e-9 && dt < 1.0, "[1] oracle-sampler exactness (50 Euler steps)",
         d.str());
}

// ---------------------------------------------------------------- [2]

GaussianSet fd_scene(Rng& rng, int n, const Camera& cam) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    GaussianSet set;
    for (int i = 0; i < n; ++i) {
      Gaussian3D g;
      for (int c = 0; c < 3; ++c) g.mean(c) = rng.uniform(-0.7, 0.7);
      for (int c = 0; c < 3; ++c) g.log_scale(c) = rng.uniform(-3.0, -1.2);
      for (int c = 0; c < 4; ++c) g.rotation(c) = rng.normal();
      g.rotation.normalize();
      g.logit_opacity = rng.uniform(-1.5, 0.4);
      for (int c = 0; c < 3; ++c) g.rgb(c) = rng.uniform(-2.0, 2.0);
      set.gaussians.push_back(g);
    }
    std::vector<double> depths;
    for (const auto& g : set.gaussians) depths.push_back(cam.to_camera(g.mean).z());
    std::sort(depths.begin(), depths.end());
    bool ok = true;
    for (std::size_t i = 1; i < depths.size(); ++i)
      if (depths[i] - depths[i - 1] < 1e-2) ok = false;
    if (ok) return set;
  }
  return {};
}

void criterion_renderer_gradcheck() {
  const auto t0 = Clock::now();
  Rng rng(202);
  const Camera cam_a =
      make_lookat_camera(Vec3(0.1, -0.3, -2.5), Vec3(0, 0, 0), Vec3(0, 1, 0), 50, 32, 32);
  const Camera cam_b =
      make_lookat_camera(Vec3(-1.8, 0.9, 1.4), Vec3(0, 0, 0), Vec3(0, 1, 0), 50, 32, 32);

  int checked = 0, failed = 0;
  double worst = 0;
  for (int scene = 0; scene < 20; ++scene) {
    GaussianSet set = fd_scene(rng, 8, cam_a);
    const GaussianSet distractor = fd_scene(rng, 8, cam_a);
    std::vector<View> views;
    views.push_back({cam_a, render(distractor, cam_a, Vec3(1, 1, 1))});
    views.push_back({cam_b, render(distractor, cam_b, Vec3(1, 1, 1))});

    const auto [loss, grad] = photometric_grad(set, views);
    for (std::size_t gi = 0; gi < set.size(); ++gi) {
      ParamVector p = pack(set[gi]);
      for (int c = 0; c < kParamChannels; ++c) {
        const double a = grad(static_cast<Eigen::Index>(gi), c);
        if (std::abs(a) <= 1e-6) continue;
        auto fd_at = [&](double h) {
          const double saved = p(c);
          p(c) = saved + h;
          set.gaussians[gi] = unpack(p);
          const double lp = photometric_loss(set, views);
          p(c) = saved - h;
          set.gaussians[gi] = unpack(p);
          const double lm = photometric_loss(set, views);
          p(c) = saved;
          set.gaussians[gi] = unpack(p);
          return (lp - lm) / (2 * h);
        };
        // kink-aware cascade: an L1 residual can cross zero inside a
        // difference bracket, so each retry shrinks the step 10x and must
        // clear a 10x tighter bar; a wrong gradient fails at every level
        const double steps[3] = {1e-4, 1e-5, 1e-6};
        const double tols[3] = {1e-3, 1e-4, 1e-5};
        bool ok = false;
        for (int lvl = 0; lvl < 3 && !ok; ++lvl) {
          const double fd = fd_at(steps[lvl]);
          const double rel = std::abs(a - fd) / std::max(std::abs(a), std::abs(fd));
          if (rel <= tols[lvl]) {
            ok = true;
            if (lvl == 0) worst = std::max(worst, rel);
          }
        }
        if (!ok) ++failed;
        ++checked;
      }
    }
  }
  const double dt = seconds_since(t0);
  std::ostringstream d;
  d << checked << " channels, worst rel " << worst << ", " << dt << " s";
  report(failed == 0 && checked > 1000 && dt < 120.0,
         "[2] renderer gradient vs central differences (20 scenes)", d.str());
}

// ---------------------------------------------------------------- [3]

void criterion_denoiser_gradcheck() {
  ModelConfig mc;
  mc.hidden_dim = 16;
  mc.blocks = 2;
  mc.heads = 2;
  mc.registers = 2;
  mc.pos_embed_channels = 4;
  mc.patch_size = 8;
  mc.cond_grid = 2;
  mc.ffn_mult = 2;
  mc.t_embed_dim = 16;
  mc.cond_drop_prob = 0.0;
  DenoiserModel model(mc, 303);
  {
    Rng prng(304);
    for (auto& [name, e] : model.params().entries)
      for (Eigen::Index i = 0; i < e.value.rows(); ++i)
        for (Eigen::Index j = 0; j < e.value.cols(); ++j)
          e.value(i, j) += prng.normal() * 0.05;
  }

  ObjectSpec spec;
  spec.gaussian_count = 4;
  spec.seed = 305;
  const GaussianSet gt = make_object(spec);
  const std::vector<Camera> rig = camera_rig(8, 2.7, 16);
  std::vector<View> seen{{rig[0], render(gt, rig[0], Vec3(1, 1, 1))},
                         {rig[3], render(gt, rig[3], Vec3(1, 1, 1))}};
  std::vector<View> held{{rig[5], render(gt, rig[5], Vec3(1, 1, 1))},
                         {rig[6], render(gt, rig[6], Vec3(1, 1, 1))}};
  std::vector<GaussianSet> data{gt};
  const NormStats stats = compute_norm_stats(data);
  const Eigen::MatrixXd z1 = normalize_rows(set_to_matrix(gt), stats);
  const ConditionTokens cond = encode_condition(seen, 8);

  Rng rng(306);
  const double t = 0.58;
  Eigen::MatrixXd eps(z1.rows(), z1.cols());
  for (Eigen::Index i = 0; i < eps.rows(); ++i)
    for (Eigen::Index j = 0; j < eps.cols(); ++j) eps(i, j) = rng.normal();

  auto loss_of = [&](Tape* out_tape, int* out_node) {
    Tape local;
    Tape& tape = out_tape ? *out_tape : local;
    const Eigen::MatrixXd z_t = interpolate(z1, eps, t);
    const Eigen::MatrixXd grad_ch = unit_rms(photometric_pull(z_t, stats, seen, 1).grad);
    Eigen::MatrixXd tokens(z_t.rows() / 2, 4 * kParamChannels);
    tokens << patchify(z_t).tokens, patchify(grad_ch).tokens;
    const int in = tape.input(std::move(tokens));
    const int out = model.forward(tape, in, cond, t, false);
    const int zt_tok = tape.input(patchify(z_t).tokens);
    const int vt_tok = tape.input(patchify(Eigen::MatrixXd(z1 - eps)).tokens);
    const int fm = tape.mean_sq(
        tape.sub(tape.scale(tape.sub(out, zt_tok), 1.0 / (1.0 - t)), vt_tok));
    const int rs = render_loss_node(tape, out, stats, seen, 1);
    const int rh = render_loss_node(tape, out, stats, held, 1);
    const int total =
        tape.add(fm, tape.scale(tape.add(rh, rs), timestep_weight(t)));
    if (out_node) *out_node = total;
    return tape.value(total)(0, 0);
  };

  Tape tape;
  int total_node = 0;
  loss_of(&tape, &total_node);
  tape.backward(total_node);
  std::map<std::string, Eigen::MatrixXd> grads;
  for (auto& [name, g] : tape.param_grads()) grads[name] = g;

  Rng pick(307);
  int checked = 0, failed = 0;
  for (auto& [name, entry] : model.params().entries) {
    const Eigen::MatrixXd& g = grads.at(name);
    for (int probe = 0; probe < 3; ++probe) {
      const Eigen::Index i = pick.uniform_int(static_cast<int>(entry.value.rows()));
      const Eigen::Index j = pick.uniform_int(static_cast<int>(entry.value.cols()));
      const double a = g(i, j);
      if (std::abs(a) <= 1e-6) continue;
      auto fd_at = [&](double h) {
        const double saved = entry.value(i, j);
        entry.value(i, j) = saved + h;
        const double lp = loss_of(nullptr, nullptr);
        entry.value(i, j) = saved - h;
        const double lm = loss_of(nullptr, nullptr);
        entry.value(i, j) = saved;
        return (lp - lm) / (2 * h);
      };
      const double fd = fd_at(1e-3);
      double rel = std::abs(a - fd) / std::max(std::abs(a), std::abs(fd));
      if (rel > 1e-2) {
        const double fd4 = fd_at(1e-4);
        rel = std::abs(a - fd4) / std::max(std::abs(a), std::abs(fd4));
        if (rel > 1e-3) ++failed;
      }
      ++checked;
    }
  }

  // permutation equivariance, bit-exact
  Rng trng(308);
  Eigen::MatrixXd tokens(8, 56);
  for (Eigen::Index i = 0; i < 8; ++i)
    for (Eigen::Index j = 0; j < 56; ++j) tokens(i, j) = trng.normal();
  const Eigen::MatrixXd base = model.predict(tokens, cond, 0.33, false);
  const std::vector<int> perm{5, 2, 7, 0, 3, 6, 1, 4};
  Eigen::MatrixXd tokens_p(8, 56);
  for (int i = 0; i < 8; ++i) tokens_p.row(i) = tokens.row(perm[static_cast<std::size_t>(i)]);
  const Eigen::MatrixXd out_p = model.predict(tokens_p, cond, 0.33, false);
  bool perm_ok = true;
  for (int i = 0; i < 8; ++i)
    if (out_p.row(i) != base.row(perm[static_cast<std::size_t>(i)])) perm_ok = false;

  // sequence-length agnosticism through a checkpoint (depth 5 -> depth 7)
  Checkpoint ckpt;
  ckpt.config = mc;
  ckpt.stats = stats;
  ckpt.store = model.params();
  save_checkpoint(ckpt, "acc_seqlen.ckpt");
  const Checkpoint loaded = load_checkpoint("acc_seqlen.ckpt");
  DenoiserModel reloaded(loaded.config, 0);
  reloaded.params() = loaded.store;
  bool seqlen_ok = true;
  try {
    Rng xr(309);
    Eigen::MatrixXd t16(16, 56), t64(64, 56);
    for (Eigen::Index i = 0; i < 16; ++i)
      for (Eigen::Index j = 0; j < 56; ++j) t16(i, j) = xr.normal();
    for (Eigen::Index i = 0; i < 64; ++i)
      for (Eigen::Index j = 0; j < 56; ++j) t64(i, j) = xr.normal();
    if (reloaded.predict(t16, cond, 0.5, false).rows() != 16) seqlen_ok = false;
    if (reloaded.predict(t64, cond, 0.5, false).rows() != 64) seqlen_ok = false;
  } catch (const std::exception&) {
    seqlen_ok = false;
  }
  std::remove("acc_seqlen.ckpt");

  std::ostringstream d;
  d << checked << " sampled params, " << failed << " fd failures, perm "
    << (perm_ok ? "exact" : "BROKEN") << ", seq-len " << (seqlen_ok ? "ok" : "BROKEN");
  report(failed == 0 && checked > 40 && perm_ok && seqlen_ok,
         "[3] denoiser gradients, permutation equivariance, length agnosticism",
         d.str());
}

// ---------------------------------------------------------------- [4]

void criterion_tree_invariants() {
  Rng rng(404);
  bool counts_ok = true, centroid_ok = true, merge_ok = true, patch_ok = true;
  for (int o = 0; o < 100; ++o) {
    ObjectSpec spec;
    spec.family = static_cast<ObjectFamily>(o % 4);
    spec.gaussian_count = 1 << (3 + o % 4);  // 8..64
    spec.seed = 40000 + static_cast<std::uint64_t>(o);
    spec.color_scheme = o % 7;
    const GaussianSet set = make_object(spec);
    const GaussianTree tree = build_tree(set);

    if (static_cast<int>(tree.nodes.size()) != 2 * tree.leaf_count - 1) counts_ok = false;

    Vec3 ref = Vec3::Zero();
    double ref_mass = 0;
    for (int j = 0; j < tree.leaf_count; ++j) {
      const TreeNode& n =
          tree.nodes[static_cast<std::size_t>(tree.level_begin(tree.max_depth) + j)];
      ref += n.weight * n.gaussian.mean;
      ref_mass += n.weight;
    }
    ref /= ref_mass;

    for (int l = 0; l <= tree.max_depth; ++l) {
      if (static_cast<int>(slice_depth(tree, l).size()) != (1 << l)) counts_ok = false;
      Vec3 c = Vec3::Zero();
      double mass = 0;
      for (int j = 0; j < tree.level_count(l); ++j) {
        const TreeNode& n = tree.nodes[static_cast<std::size_t>(tree.level_begin(l) + j)];
        c += n.weight * n.gaussian.mean;
        mass += n.weight;
      }
      c /= mass;
      if ((c - ref).cwiseAbs().maxCoeff() > 1e-9) centroid_ok = false;
    }

    for (const TreeNode& n : tree.nodes) {
      if (n.left < 0) continue;
      const TreeNode& l = tree.nodes[static_cast<std::size_t>(n.left)];
      const TreeNode& r = tree.nodes[static_cast<std::size_t>(n.right)];
      const auto [g, w] = merge_pair(l.gaussian, l.weight, r.gaussian, r.weight);
      if ((pack(g) - pack(n.gaussian)).cwiseAbs().maxCoeff() > 1e-9) merge_ok = false;
      if (std::abs(w - n.weight) > 1e-9 * std::abs(n.weight)) merge_ok = false;
    }

    Eigen::MatrixXd rows(spec.gaussian_count, kParamChannels);
    for (Eigen::Index i = 0; i < rows.rows(); ++i)
      for (Eigen::Index j = 0; j < rows.cols(); ++j) rows(i, j) = rng.normal();
    if (unpatchify(patchify(rows)) != rows) patch_ok = false;
  }
  std::ostringstream d;
  d << "counts " << (counts_ok ? "ok" : "BAD") << ", centroid "
    << (centroid_ok ? "ok" : "BAD") << ", merges " << (merge_ok ? "ok" : "BAD")
    << ", patchify " << (patch_ok ? "ok" : "BAD");
  report(counts_ok && centroid_ok && merge_ok && patch_ok,
         "[4] tree invariants over 100 objects", d.str());
}

// ---------------------------------------------------------------- [5]

void criterion_guidance_identities() {
  Rng rng(505);
  Eigen::MatrixXd c(16, 14), u(16, 14);
  for (Eigen::Index i = 0; i < 16; ++i)
    for (Eigen::Index j = 0; j < 14; ++j) {
      c(i, j) = rng.normal();
      u(i, j) = rng.normal();
    }
  const bool cfg_exact = (cfg_combine(c, u, 1.0) == c) && (cfg_combine(c, u, 0.0) == u);

  // lambda = 0 reproduces the unguided trajectory bit-exactly
  Eigen::MatrixXd z1(8, 14);
  for (Eigen::Index i = 0; i < 8; ++i)
    for (Eigen::Index j = 0; j < 14; ++j) z1(i, j) = rng.normal();
  OracleDenoiser oracle(patchify(z1).tokens);
  GuidanceConfig g;
  g.cfg_scale = 1.0;
  g.lambda_pg = 0.0;
  NormStats identity;
  Rng s1(99), s2(99);
  const GaussianSet guided = sample(oracle, identity, {}, 8, g, s1);

  Eigen::MatrixXd z(8, 14);
  for (Eigen::Index i = 0; i < 8; ++i)
    for (Eigen::Index j = 0; j < 14; ++j) z(i, j) = s2.normal();
  for (int step = 0; step < g.steps; ++step) {
    const double t = step * g.dt;
    if (1.0 - t <= g.dt + 1e-9) {
      z = z1;
      continue;
    }
    z += g.dt * ((z1 - z) / (1.0 - t));
  }
  GaussianSet ref = matrix_to_set(z);
  finalize_gaussians(ref);
  const bool traj_exact = set_to_matrix(guided) == set_to_matrix(ref);

  const bool w_ok = timestep_weight(0.0) == 0.0 &&
                    std::abs(timestep_weight(0.9) - 50.0) < 1e-12 &&
                    std::abs(timestep_weight(1.0) - 50.0) < 1e-12;
  std::ostringstream d;
  d << "cfg s=1/s=0 " << (cfg_exact ? "bit-exact" : "BAD") << ", lambda=0 trajectory "
    << (traj_exact ? "bit-exact" : "BAD") << ", w(0)=0 w(0.9)=w(1)=50 "
    << (w_ok ? "ok" : "BAD");
  report(cfg_exact && traj_exact && w_ok, "[5] guidance identities", d.str());
}

// ---------------------------------------------------------------- [6]

struct EvalObject {
  GaussianSet gt;
  std::vector<int> full_inputs, partial_inputs;
  std::vector<View> full_seen, partial_seen, validation;
};

std::vector<EvalObject> fresh_objects(const RunConfig& cfg, int count,
                                      const std::vector<Camera>& rig,
                                      const std::vector<int>& val_cams) {
  std::vector<EvalObject> out;
  for (int i = 0; i < count; ++i) {
    ObjectSpec spec;
    spec.family = static_cast<ObjectFamily>(i % 4);
    spec.gaussian_count = cfg.gaussian_count;
    spec.color_scheme = (i + 3) % 7;
    spec.seed = (cfg.seed ^ 0xF00Dull) + 7919ull * static_cast<std::uint64_t>(i);
    EvalObject eo;
    eo.gt = make_object(spec);
    Rng rng(spec.seed ^ 0x9999);
    const ViewSelection full = select_views_full(rig, val_cams, 4, rng);
    const ViewSelection partial = select_views_partial(rig, val_cams, rng);
    eo.full_inputs = full.input_indices;
    eo.partial_inputs = partial.input_indices;
    auto views_for = [&](const std::vector<int>& cams) {
      std::vector<View> v;
      for (int cidx : cams)
        v.push_back({rig[static_cast<std::size_t>(cidx)],
                     render(eo.gt, rig[static_cast<std::size_t>(cidx)], Vec3(1, 1, 1), 2)});
      return v;
    };
    eo.full_seen = views_for(full.input_indices);
    eo.partial_seen = views_for(partial.input_indices);
    eo.validation = views_for(val_cams);
    out.push_back(std::move(eo));
  }
  return out;
}

struct SampleEval {
  double val_psnr = 0;
  double seen_psnr = 0;
};

SampleEval eval_sample(const DenoiserModel& model, const NormStats& stats,
                       const RunConfig& cfg, const EvalObject& obj, bool partial,
                       double lambda_pg, std::uint64_t seed) {
  const std::vector<View>& seen = partial ? obj.partial_seen : obj.full_seen;
  ConditionedDenoiser den(model, encode_condition(seen, model.config().patch_size));
  GuidanceConfig g = cfg.guidance;
  g.lambda_pg = lambda_pg;
  Rng rng(seed);
  const GaussianSet set =
      sample(den, stats, seen, 1 << cfg.fine_depth, g, rng, nullptr, 2);
  SampleEval ev;
  for (const View& v : obj.validation)
    ev.val_psnr += psnr(render(set, v.camera, Vec3(1, 1, 1), 2), v.target);
  ev.val_psnr /= static_cast<double>(obj.validation.size());
  for (const View& v : seen)
    ev.seen_psnr += psnr(render(set, v.camera, Vec3(1, 1, 1), 2), v.target);
  ev.seen_psnr /= static_cast<double>(seen.size());
  return ev;
}

void criterion_training_trend(const std::string& work_dir, std::string* log_path_out) {
  const RunConfig cfg = acceptance_config(work_dir);
  const std::string run_dir = work_dir + "/run";
  const std::string ckpt_path = run_dir + "/stage2.ckpt";
  *log_path_out = run_dir + "/train_log.jsonl";

  // reuse cached artifacts only when they match this exact configuration
  bool reuse = false;
  if (fs::exists(ckpt_path)) {
    try {
      const Checkpoint probe = load_checkpoint(ckpt_path);
      reuse = probe.run_config_hash == config_hash(cfg);
    } catch (const std::exception&) {
      reuse = false;
    }
  }
  if (!reuse) {
    fs::remove_all(work_dir);
    std::printf("  [6] building the dataset (64 objects)\n");
    std::fflush(stdout);
    cmd_synth(cfg);
    std::printf("  [6] training stage 1 (%d steps) + stage 2 (%d steps)\n",
                cfg.stage1_steps, cfg.stage2_steps);
    std::fflush(stdout);
    run_training(cfg, 0, run_dir, &std::cout);
  } else {
    std::printf("  [6] reusing cached training run (config hash matches)\n");
  }

  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  DenoiserModel trained(ckpt.config, 0);
  trained.params() = ckpt.store;
  DenoiserModel untrained(ckpt.config, cfg.seed ^ 0x51ull);  // same init as training

  const std::vector<Camera> rig = camera_rig(cfg.rig_cameras, cfg.rig_radius, cfg.image_size);
  const std::vector<int> val_cams = validation_indices(cfg.rig_cameras);
  std::printf("  [6] evaluating 16 held-out objects\n");
  std::fflush(stdout);
  const std::vector<EvalObject> objects = fresh_objects(cfg, 16, rig, val_cams);

  double trained_full = 0, untrained_full = 0, lambda_on = 0, lambda_off = 0;
  int full_wins = 0;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const std::uint64_t seed = 600 + i;
    const SampleEval tr = eval_sample(trained, ckpt.stats, cfg, objects[i], false,
                                      cfg.guidance.lambda_pg, seed);
    const SampleEval un = eval_sample(untrained, ckpt.stats, cfg, objects[i], false,
                                      cfg.guidance.lambda_pg, seed);
    const SampleEval off =
        eval_sample(trained, ckpt.stats, cfg, objects[i], false, 0.0, seed);
    const SampleEval pa = eval_sample(trained, ckpt.stats, cfg, objects[i], true,
                                      cfg.guidance.lambda_pg, seed);
    trained_full += tr.val_psnr;
    untrained_full += un.val_psnr;
    lambda_on += tr.seen_psnr;
    lambda_off += off.seen_psnr;
    if (tr.val_psnr >= pa.val_psnr) ++full_wins;
  }
  trained_full /= 16;
  untrained_full /= 16;
  lambda_on /= 16;
  lambda_off /= 16;

  {
    std::ostringstream d;
    d << "trained " << trained_full << " dB vs untrained " << untrained_full
      << " dB (need +6)";
    report(trained_full - untrained_full >= 6.0,
           "[6a] validation PSNR beats the untrained baseline by 6 dB", d.str());
  }
  {
    std::ostringstream d;
    d << "seen-view PSNR " << lambda_on << " dB with guidance vs " << lambda_off
      << " dB without";
    report(lambda_on - lambda_off >= 0.0,
           "[6b] photometric gradient guidance does not hurt seen views", d.str());
  }
  {
    std::ostringstream d;
    d << full_wins << "/16 objects (need >= 12)";
    report(full_wins >= 12, "[6c] full observation beats partial on >= 75% of objects",
           d.str());
  }
}

// ---------------------------------------------------------------- [7]

void criterion_determinism(const std::string& work_dir) {
  const RunConfig cfg = acceptance_config(work_dir);
  bool ply_identical = false, roundtrip_ok = false;
  try {
    const DatasetHandle ds = open_dataset(cfg.dataset_dir);
    ReconstructRequest req;
    req.object_id = ds.manifest.objects.front().id;
    req.mode = "full";
    req.depth = cfg.fine_depth;
    req.guidance = cfg.guidance;
    req.seed = 777;
    req.oracle = true;  // deterministic denoiser; full guidance path exercised
    req.stats = ds.manifest.stats;
    req.threads = 2;

    const ReconstructResult a = reconstruct_object(ds, req);
    const ReconstructResult b = reconstruct_object(ds, req);
    write_ply(a.set, work_dir + "/det_a.ply");
    write_ply(b.set, work_dir + "/det_b.ply");
    std::ifstream fa(work_dir + "/det_a.ply", std::ios::binary);
    std::ifstream fb(work_dir + "/det_b.ply", std::ios::binary);
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    ply_identical = !sa.str().empty() && sa.str() == sb.str();

    // export -> import -> render round-trip
    const GaussianSet imported = read_ply(work_dir + "/det_a.ply");
    write_ply(imported, work_dir + "/det_c.ply");
    std::ifstream fc(work_dir + "/det_c.ply", std::ios::binary);
    std::stringstream sc;
    sc << fc.rdbuf();
    const Image r1 = render(imported, ds.rig[0], ds.manifest.background, 2);
    const Image r2 = render(read_ply(work_dir + "/det_c.ply"), ds.rig[0],
                            ds.manifest.background, 1);
    roundtrip_ok = sc.str() == sa.str() && r1.pixels == r2.pixels;
  } catch (const std::exception& e) {
    std::printf("  [7] error: %s\n", e.what());
  }
  std::ostringstream d;
  d << "reconstruct twice " << (ply_identical ? "byte-identical" : "DIFFERS")
    << ", ply round-trip render " << (roundtrip_ok ? "bit-exact" : "DIFFERS");
  report(ply_identical && roundtrip_ok, "[7] end-to-end determinism", d.str());
}

// ---------------------------------------------------------------- [8]

void criterion_loss_bookkeeping(const std::string& log_path) {
  std::ifstream log(log_path);
  if (!log) {
    report(false, "[8] loss bookkeeping audit", "missing training log " + log_path);
    return;
  }
  std::string line;
  std::int64_t audited = 0, violations = 0;
  double worst = 0;
  while (std::getline(log, line)) {
    if (line.find("\"type\":\"step\"") == std::string::npos) continue;
    const json rec = json::parse(line);
    const double total = rec.at("total");
    const double fm = rec.at("fm");
    const double w = rec.at("weight");
    const double rh = rec.at("r_held");
    const double rs = rec.at("r_seen");
    const double diff = std::abs(total - (fm + w * (rh + rs)));
    worst = std::max(worst, diff);
    if (diff > 1e-12) ++violations;
    ++audited;
  }
  std::ostringstream d;
  d << audited << " logged steps, worst residual " << worst;
  report(audited > 0 && violations == 0, "[8] loss bookkeeping audit (1e-12)", d.str());
}

}  // namespace

int main(int argc, char** argv) {
  std::string work_dir = "acceptance_work";
  if (argc > 1) work_dir = argv[1];
  fs::create_directories(work_dir);

  criterion_oracle_sampler();
  criterion_renderer_gradcheck();
  criterion_denoiser_gradcheck();
  criterion_tree_invariants();
  criterion_guidance_identities();

  std::string log_path;
  try {
    criterion_training_trend(work_dir, &log_path);
  } catch (const std::exception& e) {
    report(false, "[6] desk-scale training trend", std::string("exception: ") + e.what());
    report(false, "[6b] photometric gradient guidance does not hurt seen views", "skipped");
    report(false, "[6c] full observation beats partial on >= 75% of objects", "skipped");
  }
  criterion_determinism(work_dir);
  criterion_loss_bookkeeping(log_path);

  std::printf("%s: %d criterion failure(s)\n", g_failures == 0 ? "ACCEPTED" : "REJECTED",
              g_failures);
  return g_failures == 0 ? 0 : 1;
}
