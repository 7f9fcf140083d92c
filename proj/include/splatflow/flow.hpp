#pragma once

#include <optional>
#include <span>
#include <vector>

#include "splatflow/gaussian.hpp"
#include "splatflow/renderer.hpp"
#include "splatflow/rng.hpp"

namespace splatflow {

inline constexpr double kDefaultTCap = 0.98;

struct FlowState {
  Eigen::MatrixXd z;  // N x C normalized parameters
  double t = 0.0;
};

struct GuidanceConfig {
  int steps = 50;
  double dt = 0.02;
  double cfg_scale = 2.0;
  double lambda_pg = 50.0;
  double t_cap = kDefaultTCap;
  // When set, the Euler-update guidance gradient is rescaled to unit RMS
  // before multiplying by lambda_pg. Off by default: lambda_pg = 50 is
  // calibrated against the raw mean-L1 gradient.
  bool pg_unit_rms = false;

  void validate() const;
};

struct LossBreakdown {
  double fm = 0;
  double r_held = 0;
  double r_seen = 0;
  double weight = 0;  // w(t)
  double total = 0;
};

// z_t = (1 - t) * eps + t * z1
Eigen::MatrixXd interpolate(const Eigen::MatrixXd& z1, const Eigen::MatrixXd& eps,
                            double t);

// v_t = (z1_hat - z_t) / (1 - t); guarded against the t -> 1 singularity.
Eigen::MatrixXd velocity_from_x(const Eigen::MatrixXd& z1_hat,
                                const Eigen::MatrixXd& z_t, double t,
                                double t_cap = kDefaultTCap);

// z <- z + dt * v - lambda_pg * grad_seen; t <- t + dt
FlowState guided_euler_step(const FlowState& state, const Eigen::MatrixXd& v,
                            const Eigen::MatrixXd& grad_seen,
                            const GuidanceConfig& cfg);

// uncond + s * (cond - uncond); s = 1 and s = 0 return their input bit-exactly.
Eigen::MatrixXd cfg_combine(const Eigen::MatrixXd& cond,
                            const Eigen::MatrixXd& uncond, double s);

// w(t) = 50 * (min(1, t / 0.9))^5
double timestep_weight(double t);

// Mean squared difference between the implied velocity (z1_hat - z_t)/(1-t)
// and the target velocity z1 - eps.
double fm_loss(const Eigen::MatrixXd& z1_hat, const Eigen::MatrixXd& z_t,
               const Eigen::MatrixXd& z1, const Eigen::MatrixXd& eps, double t,
               double t_cap = kDefaultTCap);

LossBreakdown combined_loss(double fm, double r_held, double r_seen, double t);

// Cosine schedule: t = 1 - cos(u * pi / 2), denser near t = 1.
double sample_timestep(Rng& rng);

// R_Seen and its gradient with respect to the *normalized* parameters:
// rows are denormalized, rendered against the views, and the raw gradient is
// mapped back through the chain rule (elementwise channel_std).
struct PhotometricPull {
  double r_seen = 0;
  Eigen::MatrixXd grad;  // N x C, normalized space
};
PhotometricPull photometric_pull(const Eigen::MatrixXd& z_rows, const NormStats& stats,
                                 std::span<const View> views, int threads = 1);

// Rescales to unit root-mean-square; zero matrices pass through unchanged.
Eigen::MatrixXd unit_rms(const Eigen::MatrixXd& m);

// x-prediction interface consumed by the sampler. Conditioning views are
// bound into the implementation; drop_condition selects the CFG branch.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  // tokens: (N/2) x 4C noisy+gradient channels; returns (N/2) x 2C tokens.
  virtual Eigen::MatrixXd predict(const Eigen::MatrixXd& tokens, double t,
                                  bool drop_condition) = 0;
};

// Test hook: ignores its input and reports the bound ground truth.
class OracleDenoiser : public Denoiser {
 public:
  explicit OracleDenoiser(Eigen::MatrixXd z1_tokens) : tokens_(std::move(z1_tokens)) {}
  Eigen::MatrixXd predict(const Eigen::MatrixXd&, double, bool) override {
    return tokens_;
  }

 private:
  Eigen::MatrixXd tokens_;
};

struct SampleStepRecord {
  int step = 0;
  double t = 0;
  double r_seen = 0;
  double grad_rms = 0;
};

// Guided Euler sampler. Starts from z ~ N(0, I), queries the model with
// [patchified z || patchified unit-RMS gradient channels], applies CFG on the
// x-prediction, recomputes the photometric pull at the guided prediction, and
// steps. The terminal step (1 - t <= dt) assigns the guided prediction
// directly. Returns denormalized Gaussians with renormalized quaternions.
GaussianSet sample(Denoiser& model, const NormStats& stats,
                   std::span<const View> views_seen, int n_gaussians,
                   const GuidanceConfig& cfg, Rng& rng,
                   std::vector<SampleStepRecord>* trace = nullptr,
                   int render_threads = 1);

}  // namespace splatflow
