#include "splatflow/flow.hpp"

#include <cmath>
#include <stdexcept>

#include "splatflow/lod_tree.hpp"

namespace splatflow {

void GuidanceConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("GuidanceConfig: steps < 1");
  if (std::abs(steps * dt - 1.0) > 1e-9)
    throw std::invalid_argument("GuidanceConfig: steps * dt must equal 1");
  if (!(t_cap > 0.0 && t_cap < 1.0))
    throw std::invalid_argument("GuidanceConfig: t_cap must lie in (0, 1)");
  if (cfg_scale < 0.0) throw std::invalid_argument("GuidanceConfig: cfg_scale < 0");
  if (lambda_pg < 0.0) throw std::invalid_argument("GuidanceConfig: lambda_pg < 0");
}

Eigen::MatrixXd interpolate(const Eigen::MatrixXd& z1, const Eigen::MatrixXd& eps,
                            double t) {
  if (z1.rows() != eps.rows() || z1.cols() != eps.cols())
    throw std::invalid_argument("interpolate: shape mismatch");
  if (t < 0.0 || t > 1.0) throw std::invalid_argument("interpolate: t outside [0, 1]");
  return (1.0 - t) * eps + t * z1;
}

Eigen::MatrixXd velocity_from_x(const Eigen::MatrixXd& z1_hat,
                                const Eigen::MatrixXd& z_t, double t, double t_cap) {
  if (z1_hat.rows() != z_t.rows() || z1_hat.cols() != z_t.cols())
    throw std::invalid_argument("velocity_from_x: shape mismatch");
  if (t > t_cap)
    throw std::invalid_argument("velocity_from_x: t beyond the singularity guard");
  return (z1_hat - z_t) / (1.0 - t);
}

FlowState guided_euler_step(const FlowState& state, const Eigen::MatrixXd& v,
                            const Eigen::MatrixXd& grad_seen,
                            const GuidanceConfig& cfg) {
  if (v.rows() != state.z.rows() || v.cols() != state.z.cols())
    throw std::invalid_argument("guided_euler_step: velocity shape mismatch");
  FlowState next;
  next.z = state.z + cfg.dt * v;
  if (cfg.lambda_pg != 0.0) {
    if (grad_seen.rows() != state.z.rows() || grad_seen.cols() != state.z.cols())
      throw std::invalid_argument("guided_euler_step: gradient shape mismatch");
    next.z -= cfg.lambda_pg * grad_seen;
  }
  next.t = state.t + cfg.dt;
  return next;
}

Eigen::MatrixXd cfg_combine(const Eigen::MatrixXd& cond, const Eigen::MatrixXd& uncond,
                            double s) {
  if (cond.rows() != uncond.rows() || cond.cols() != uncond.cols())
    throw std::invalid_argument("cfg_combine: shape mismatch");
  if (s == 1.0) return cond;
  if (s == 0.0) return uncond;
  return uncond + s * (cond - uncond);
}

double timestep_weight(double t) {
  const double r = std::min(1.0, t / 0.9);
  const double r2 = r * r;
  return 50.0 * r2 * r2 * r;
}

double fm_loss(const Eigen::MatrixXd& z1_hat, const Eigen::MatrixXd& z_t,
               const Eigen::MatrixXd& z1, const Eigen::MatrixXd& eps, double t,
               double t_cap) {
  const Eigen::MatrixXd v = velocity_from_x(z1_hat, z_t, t, t_cap);
  if (z1.rows() != v.rows() || z1.cols() != v.cols() || eps.rows() != v.rows() ||
      eps.cols() != v.cols())
    throw std::invalid_argument("fm_loss: shape mismatch");
  return (v - (z1 - eps)).squaredNorm() / static_cast<double>(v.size());
}

LossBreakdown combined_loss(double fm, double r_held, double r_seen, double t) {
  LossBreakdown b;
  b.fm = fm;
  b.r_held = r_held;
  b.r_seen = r_seen;
  b.weight = timestep_weight(t);
  b.total = fm + b.weight * (r_held + r_seen);
  return b;
}

double sample_timestep(Rng& rng) {
  return 1.0 - std::cos(rng.uniform() * M_PI / 2.0);
}

PhotometricPull photometric_pull(const Eigen::MatrixXd& z_rows, const NormStats& stats,
                                 std::span<const View> views, int threads) {
  if (views.empty()) {
    PhotometricPull none;
    none.grad = Eigen::MatrixXd::Zero(z_rows.rows(), z_rows.cols());
    return none;
  }
  const ParamMatrix denorm = denormalize_rows(z_rows, stats);
  const GaussianSet set = matrix_to_set(denorm);
  auto [loss, grad] = photometric_grad(set, views, threads);
  PhotometricPull pull;
  pull.r_seen = loss;
  // chain rule through denormalize: d/dz = d/dtheta * channel_std
  pull.grad = grad;
  pull.grad.array().rowwise() *= stats.channel_std.transpose().array();
  return pull;
}

Eigen::MatrixXd unit_rms(const Eigen::MatrixXd& m) {
  const double rms = std::sqrt(m.squaredNorm() / static_cast<double>(m.size()));
  if (rms < 1e-12) return m;
  return m / rms;
}

GaussianSet sample(Denoiser& model, const NormStats& stats,
                   std::span<const View> views_seen, int n_gaussians,
                   const GuidanceConfig& cfg, Rng& rng,
                   std::vector<SampleStepRecord>* trace, int render_threads) {
  cfg.validate();
  if (n_gaussians < 2 || n_gaussians % 2 != 0)
    throw std::invalid_argument("sample: gaussian count must be even and >= 2");

  Eigen::MatrixXd z(n_gaussians, kParamChannels);
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = rng.normal();

  // Gradient channels for the first query come from the current state; after
  // each step they are recomputed at the guided x-prediction.
  Eigen::MatrixXd grad_channels = Eigen::MatrixXd::Zero(n_gaussians, kParamChannels);
  if (!views_seen.empty()) {
    const PhotometricPull pull = photometric_pull(z, stats, views_seen, render_threads);
    grad_channels = unit_rms(pull.grad);
  }

  double t = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    t = step * cfg.dt;
    Eigen::MatrixXd tokens(n_gaussians / 2, 4 * kParamChannels);
    tokens << patchify(z).tokens, patchify(grad_channels).tokens;

    const Eigen::MatrixXd cond = model.predict(tokens, t, false);
    const Eigen::MatrixXd z1_tokens =
        cfg.cfg_scale == 1.0
            ? cond
            : cfg_combine(cond, model.predict(tokens, t, true), cfg.cfg_scale);
    const Eigen::MatrixXd z1_guided = unpatchify_rows(z1_tokens);

    if (1.0 - t <= cfg.dt + 1e-9) {
      // terminal rule: the velocity is singular at t = 1
      z = z1_guided;
      if (trace) trace->push_back({step, t, 0.0, 0.0});
      continue;
    }

    const Eigen::MatrixXd v = velocity_from_x(z1_guided, z, t, cfg.t_cap);

    Eigen::MatrixXd pg_grad = Eigen::MatrixXd::Zero(n_gaussians, kParamChannels);
    double r_seen = 0.0, grad_rms = 0.0;
    if (!views_seen.empty()) {
      const PhotometricPull pull =
          photometric_pull(z1_guided, stats, views_seen, render_threads);
      r_seen = pull.r_seen;
      grad_rms = std::sqrt(pull.grad.squaredNorm() /
                           static_cast<double>(pull.grad.size()));
      pg_grad = cfg.pg_unit_rms ? unit_rms(pull.grad) : pull.grad;
      grad_channels = unit_rms(pull.grad);
    }
    if (trace) trace->push_back({step, t, r_seen, grad_rms});

    FlowState state{std::move(z), t};
    FlowState next = guided_euler_step(state, v, pg_grad, cfg);
    z = std::move(next.z);
  }

  const ParamMatrix denorm = denormalize_rows(z, stats);
  GaussianSet out = matrix_to_set(denorm);
  finalize_gaussians(out);
  return out;
}

}  // namespace splatflow
