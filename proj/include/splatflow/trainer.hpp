#pragma once

#include <span>
#include <vector>

#include "splatflow/flow.hpp"
#include "splatflow/model.hpp"

namespace splatflow {

struct OptimConfig {
  double lr_peak = 1e-4;
  double lr_min = 5e-6;
  int warmup_steps = 200;
  int total_steps = 10000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
};

// Linear warmup from zero to lr_peak, then cosine decay to lr_min.
double lr_at(const OptimConfig& cfg, int step);

struct TrainItem {
  Eigen::MatrixXd z1;  // N x 14 normalized ground truth in sibling order
  std::vector<View> seen;
  std::vector<View> held;
  ConditionTokens cond;
  std::uint64_t seed = 0;
};

struct ItemLoss {
  LossBreakdown loss;
  double t = 0;
  bool dropped_cond = false;
};

struct TrainStepResult {
  std::vector<ItemLoss> items;
  double grad_norm = 0;  // global norm of the mean gradient, before clipping
  double lr = 0;
};

// One optimizer step over a batch: per item, sample t on the (capped) cosine
// schedule, form z_t, compute unit-RMS photometric gradient channels at z_t,
// run the model with condition dropout, evaluate
// L_FM + w(t) (R_Held + R_Seen), and backpropagate through the renderer and
// the transformer. Item gradients are averaged in item order; the update is
// AdamW with decoupled weight decay and global-norm clipping. Throws on a
// non-finite loss without touching the parameters.
TrainStepResult train_step(DenoiserModel& model, const NormStats& stats,
                           std::span<const TrainItem> batch, int step,
                           const OptimConfig& optim, double t_cap = kDefaultTCap,
                           int threads = 1);

// Custom tape node: L1 photometric loss of the denormalized, unpatchified
// x-prediction tokens against the views. Backward maps the renderer gradient
// into normalized token space.
int render_loss_node(Tape& tape, int tokens_node, const NormStats& stats,
                     std::span<const View> views, int threads = 1);

}  // namespace splatflow
