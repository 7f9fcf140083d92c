#pragma once

#include <span>
#include <utility>
#include <vector>

#include "splatflow/camera.hpp"
#include "splatflow/gaussian.hpp"
#include "splatflow/image.hpp"

namespace splatflow {

struct View {
  Camera camera;
  Image target;
};

// Per-Gaussian d(loss)/d(params), same 14-channel layout and row order as
// the input set. Rows for culled Gaussians are exactly zero.
using RenderGrad = ParamMatrix;

// Forward EWA splat rendering: front-to-back alpha compositing over
// Gaussians sorted by camera depth (ties broken by input index). Quaternions
// are normalized internally; degenerate Gaussians (non-finite parameters,
// near-zero quaternion, peak alpha < 1/255, or center behind the camera)
// are skipped. If out_transmittance is given it receives the per-pixel
// residual transmittance after compositing.
Image render(const GaussianSet& set, const Camera& cam, const Vec3& background,
             int threads = 1, std::vector<double>* out_transmittance = nullptr);

// Mean absolute error over all pixels, channels and views between renders
// of `set` and the view targets. Each view renders against its target's
// background color.
double photometric_loss(const GaussianSet& set, std::span<const View> views,
                        int threads = 1);

// Loss plus its analytic reverse-mode gradient with respect to every channel
// of every Gaussian. The L1 subgradient at exactly zero residual is 0.
std::pair<double, RenderGrad> photometric_grad(const GaussianSet& set,
                                               std::span<const View> views,
                                               int threads = 1);

}  // namespace splatflow
