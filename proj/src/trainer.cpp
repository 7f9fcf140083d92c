#include "splatflow/trainer.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>

#include "splatflow/lod_tree.hpp"
#include "splatflow/threading.hpp"

namespace splatflow {

double lr_at(const OptimConfig& cfg, int step) {
  if (step <= 0) return 0.0;
  if (step < cfg.warmup_steps)
    return cfg.lr_peak * static_cast<double>(step) / cfg.warmup_steps;
  const int span = std::max(1, cfg.total_steps - cfg.warmup_steps);
  const double prog =
      std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + std::cos(M_PI * prog));
}

int render_loss_node(Tape& tape, int tokens_node, const NormStats& stats,
                     std::span<const View> views, int threads) {
  const Eigen::MatrixXd rows = unpatchify_rows(tape.value(tokens_node));
  const PhotometricPull pull = photometric_pull(rows, stats, views, threads);
  const Eigen::MatrixXd g_tokens = patchify(pull.grad).tokens;
  Eigen::MatrixXd val(1, 1);
  val(0, 0) = pull.r_seen;
  return tape.custom(std::move(val), {tokens_node},
                     [tokens_node, g_tokens](Tape& t, const Eigen::MatrixXd& gout) {
                       t.accumulate(tokens_node, gout(0, 0) * g_tokens);
                     });
}

namespace {

struct ItemResult {
  std::vector<std::pair<std::string, Eigen::MatrixXd>> grads;
  ItemLoss loss;
};

ItemResult run_item(const DenoiserModel& model, const NormStats& stats,
                    const TrainItem& item, double t_cap) {
  Rng rng(item.seed);
  const double t = std::min(sample_timestep(rng), t_cap);

  Eigen::MatrixXd eps(item.z1.rows(), item.z1.cols());
  for (Eigen::Index i = 0; i < eps.rows(); ++i)
    for (Eigen::Index j = 0; j < eps.cols(); ++j) eps(i, j) = rng.normal();
  const Eigen::MatrixXd z_t = interpolate(item.z1, eps, t);

  // gradient input channels, computed at the noisy sample
  Eigen::MatrixXd grad_ch = Eigen::MatrixXd::Zero(z_t.rows(), z_t.cols());
  if (!item.seen.empty())
    grad_ch = unit_rms(photometric_pull(z_t, stats, item.seen, 1).grad);

  const bool drop = rng.uniform() < model.config().cond_drop_prob;

  Tape tape;
  Eigen::MatrixXd tokens(z_t.rows() / 2, 4 * kParamChannels);
  tokens << patchify(z_t).tokens, patchify(grad_ch).tokens;
  const int in = tape.input(std::move(tokens));
  const int out = model.forward(tape, in, item.cond, t, drop);

  const int zt_tok = tape.input(patchify(z_t).tokens);
  const int vt_tok = tape.input(patchify(Eigen::MatrixXd(item.z1 - eps)).tokens);
  const int fm =
      tape.mean_sq(tape.sub(tape.scale(tape.sub(out, zt_tok), 1.0 / (1.0 - t)), vt_tok));

  const int r_seen = render_loss_node(tape, out, stats, item.seen, 1);
  const int r_held = render_loss_node(tape, out, stats, item.held, 1);
  const double w = timestep_weight(t);
  const int total = tape.add(fm, tape.scale(tape.add(r_held, r_seen), w));

  ItemResult res;
  res.loss.loss = combined_loss(tape.value(fm)(0, 0), tape.value(r_held)(0, 0),
                                tape.value(r_seen)(0, 0), t);
  res.loss.t = t;
  res.loss.dropped_cond = drop;
  if (!std::isfinite(res.loss.loss.total))
    throw std::runtime_error("train_step: non-finite loss (fm=" +
                             std::to_string(res.loss.loss.fm) +
                             ", r_held=" + std::to_string(res.loss.loss.r_held) +
                             ", r_seen=" + std::to_string(res.loss.loss.r_seen) + ")");

  tape.backward(total);
  res.grads = tape.param_grads();
  return res;
}

}  // namespace

TrainStepResult train_step(DenoiserModel& model, const NormStats& stats,
                           std::span<const TrainItem> batch, int step,
                           const OptimConfig& optim, double t_cap, int threads) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");

  std::vector<ItemResult> results(batch.size());
  std::exception_ptr failure;
  std::mutex failure_mutex;
  parallel_for_chunks(
      static_cast<std::int64_t>(batch.size()), threads,
      [&](std::int64_t b, std::int64_t e, int) {
        for (std::int64_t i = b; i < e; ++i) {
          try {
            results[static_cast<std::size_t>(i)] =
                run_item(model, stats, batch[static_cast<std::size_t>(i)], t_cap);
          } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
  if (failure) std::rethrow_exception(failure);

  // combine in item order
  std::map<std::string, Eigen::MatrixXd> mean_grads;
  for (const ItemResult& r : results) {
    for (const auto& [name, g] : r.grads) {
      auto it = mean_grads.find(name);
      if (it == mean_grads.end()) {
        mean_grads.emplace(name, g);
      } else {
        it->second += g;
      }
    }
  }
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  double sq_norm = 0;
  for (auto& [name, g] : mean_grads) {
    g *= inv_batch;
    sq_norm += g.squaredNorm();
  }

  TrainStepResult out;
  out.grad_norm = std::sqrt(sq_norm);
  out.lr = lr_at(optim, step);
  for (const ItemResult& r : results) out.items.push_back(r.loss);

  const double clip_scale =
      (optim.grad_clip > 0 && out.grad_norm > optim.grad_clip)
          ? optim.grad_clip / out.grad_norm
          : 1.0;

  const int adam_t = step + 1;
  const double bc1 = 1.0 - std::pow(optim.beta1, adam_t);
  const double bc2 = 1.0 - std::pow(optim.beta2, adam_t);
  for (auto& [name, entry] : model.params().entries) {
    Eigen::MatrixXd g;
    auto it = mean_grads.find(name);
    if (it != mean_grads.end()) {
      g = clip_scale * it->second;
    } else {
      g = Eigen::MatrixXd::Zero(entry.value.rows(), entry.value.cols());
    }
    entry.value -= out.lr * optim.weight_decay * entry.value;
    entry.m = optim.beta1 * entry.m + (1.0 - optim.beta1) * g;
    entry.v = optim.beta2 * entry.v + (1.0 - optim.beta2) * g.cwiseProduct(g);
    const Eigen::MatrixXd m_hat = entry.m / bc1;
    const Eigen::MatrixXd v_hat = entry.v / bc2;
    entry.value -=
        out.lr * (m_hat.array() / (v_hat.array().sqrt() + optim.adam_eps)).matrix();
  }
  return out;
}

}  // namespace splatflow
