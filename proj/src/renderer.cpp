#include "splatflow/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "splatflow/threading.hpp"

namespace splatflow {

namespace {

using Mat2 = Eigen::Matrix2d;
using Vec2 = Eigen::Vector2d;
using Mat23 = Eigen::Matrix<double, 2, 3>;

constexpr double kZNear = 0.01;
constexpr double kAlphaClamp = 0.999;
constexpr double kMinPeakAlpha = 1.0 / 255.0;
constexpr double kEarlyStopT = 1e-4;
constexpr double kDilation = 0.3;
// Cutoff radius in screen-space sigmas. 3 sigma leaves truncation jumps of
// ~1e-2 alpha at the box edge, large enough to show up in finite-difference
// gradient checks; 6 sigma pushes them below 1e-8.
constexpr double kBBoxSigma = 6.0;
constexpr double kFovClamp = 1.3;
constexpr double kLogScaleMin = -30.0;
constexpr double kLogScaleMax = 20.0;

struct SplatProj {
  int index = 0;  // row in the input set
  Vec3 p_cam = Vec3::Zero();
  Vec2 uv = Vec2::Zero();
  Mat2 cov2d = Mat2::Zero();
  Mat2 inv2d = Mat2::Zero();
  double opacity = 0;  // sigma(logit)
  Vec3 color = Vec3::Zero();  // sigma(rgb)
  // cached intermediates for the backward pass
  Vec3 scale = Vec3::Zero();  // exp(clamped log_scale)
  Vec3 log_scale_raw = Vec3::Zero();
  Vec4 q_unit = Vec4(1, 0, 0, 0);
  double q_norm = 1;
  Mat3 rot = Mat3::Identity();
  Mat3 cov3d = Mat3::Identity();
  Mat23 jac = Mat23::Zero();
  bool clamped_x = false, clamped_y = false;
  double tx = 0, ty = 0;  // clamped camera-space x, y used in the Jacobian
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounds
};

bool finite(const Gaussian3D& g) {
  return g.mean.allFinite() && g.log_scale.allFinite() && g.rotation.allFinite() &&
         std::isfinite(g.logit_opacity) && g.rgb.allFinite();
}

// Projects the set for one camera; output is sorted by (depth, input index).
std::vector<SplatProj> project_splats(const GaussianSet& set, const Camera& cam) {
  const Mat3 w = cam.rotation();
  const Vec3 t = cam.translation();
  const double limx = kFovClamp * (0.5 * cam.width / cam.fx);
  const double limy = kFovClamp * (0.5 * cam.height / cam.fy);

  std::vector<SplatProj> out;
  out.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Gaussian3D& g = set[i];
    if (!finite(g)) continue;

    SplatProj s;
    s.index = static_cast<int>(i);
    s.q_norm = g.rotation.norm();
    if (s.q_norm < 1e-8) continue;
    s.opacity = sigmoid(g.logit_opacity);
    if (s.opacity < kMinPeakAlpha) continue;

    s.p_cam = w * g.mean + t;
    const double z = s.p_cam.z();
    if (z < kZNear) continue;

    s.q_unit = g.rotation / s.q_norm;
    s.rot = quat_to_rotmat(s.q_unit);
    s.log_scale_raw = g.log_scale;
    s.scale = g.log_scale.cwiseMax(kLogScaleMin).cwiseMin(kLogScaleMax).array().exp();
    const Mat3 m = s.rot * s.scale.asDiagonal();
    s.cov3d = m * m.transpose();

    const double x = s.p_cam.x(), y = s.p_cam.y();
    s.clamped_x = std::abs(x / z) > limx;
    s.clamped_y = std::abs(y / z) > limy;
    s.tx = s.clamped_x ? std::clamp(x / z, -limx, limx) * z : x;
    s.ty = s.clamped_y ? std::clamp(y / z, -limy, limy) * z : y;

    s.jac << cam.fx / z, 0, -cam.fx * s.tx / (z * z),
             0, cam.fy / z, -cam.fy * s.ty / (z * z);
    const Mat23 jw = s.jac * w;
    s.cov2d = jw * s.cov3d * jw.transpose() + kDilation * Mat2::Identity();
    if (!s.cov2d.allFinite()) continue;
    const double det = s.cov2d.determinant();
    if (!(det > 0.0)) continue;
    s.inv2d << s.cov2d(1, 1), -s.cov2d(0, 1), -s.cov2d(1, 0), s.cov2d(0, 0);
    s.inv2d /= det;

    s.uv = Vec2(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
    s.color = Vec3(sigmoid(g.rgb(0)), sigmoid(g.rgb(1)), sigmoid(g.rgb(2)));

    const double rx = kBBoxSigma * std::sqrt(std::max(s.cov2d(0, 0), 0.0));
    const double ry = kBBoxSigma * std::sqrt(std::max(s.cov2d(1, 1), 0.0));
    // pixel ix samples at ix + 0.5
    s.x0 = std::max(0, static_cast<int>(std::ceil(s.uv.x() - rx - 0.5)));
    s.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(s.uv.x() + rx - 0.5)));
    s.y0 = std::max(0, static_cast<int>(std::ceil(s.uv.y() - ry - 0.5)));
    s.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(s.uv.y() + ry - 0.5)));
    if (s.x0 > s.x1 || s.y0 > s.y1) continue;

    out.push_back(s);
  }
  std::sort(out.begin(), out.end(), [](const SplatProj& a, const SplatProj& b) {
    if (a.p_cam.z() != b.p_cam.z()) return a.p_cam.z() < b.p_cam.z();
    return a.index < b.index;
  });
  return out;
}

struct Hit {
  int proj = 0;       // index into the row's splat list
  double alpha = 0;
  double gauss = 0;   // exp(-0.5 d^T Q d)
  double trans = 0;   // transmittance before this hit
  Vec2 d = Vec2::Zero();
};

// Composites one pixel front to back. `row_splats` indexes into `splats`
// and is already depth-sorted. Returns final transmittance.
template <bool Record>
double composite_pixel(const std::vector<SplatProj>& splats,
                       const std::vector<int>& row_splats, int ix, double px,
                       double py, Vec3& color_out, std::vector<Hit>* hits) {
  double trans = 1.0;
  Vec3 acc = Vec3::Zero();
  for (const int si : row_splats) {
    if (trans < kEarlyStopT) break;
    const SplatProj& s = splats[si];
    if (ix < s.x0 || ix > s.x1) continue;
    const Vec2 d(px - s.uv.x(), py - s.uv.y());
    const double q = d.dot(s.inv2d * d);
    if (q > kBBoxSigma * kBBoxSigma) continue;  // outside the cutoff ellipse
    const double gauss = std::exp(-0.5 * q);
    const double alpha = std::min(kAlphaClamp, s.opacity * gauss);
    if constexpr (Record) {
      hits->push_back(Hit{si, alpha, gauss, trans, d});
    }
    acc += trans * alpha * s.color;
    trans *= 1.0 - alpha;
  }
  color_out = acc;
  return trans;
}

// Per-splat screen-space gradient accumulator.
struct SplatGrad {
  Vec2 uv = Vec2::Zero();
  double q00 = 0, q01 = 0, q11 = 0;  // wrt inv2d (symmetric)
  double op = 0;
  Vec3 color = Vec3::Zero();
  bool any = false;
};

// Maps accumulated screen-space gradients back to the 14 parameter channels.
void finalize_splat_grad(const SplatProj& s, const SplatGrad& g, const Camera& cam,
                         RenderGrad& out) {
  // color / opacity activations
  for (int c = 0; c < 3; ++c)
    out(s.index, kChRgb + c) += g.color(c) * s.color(c) * (1.0 - s.color(c));
  out(s.index, kChOpacity) += g.op * s.opacity * (1.0 - s.opacity);

  Mat2 gq;
  gq << g.q00, g.q01, g.q01, g.q11;
  const Mat2 gcov2d = -(s.inv2d * gq * s.inv2d);

  const Mat3 w = cam.rotation();
  const Mat23 jw = s.jac * w;
  const Mat23 gjw = 2.0 * gcov2d * jw * s.cov3d;
  const Mat3 gcov3d = jw.transpose() * gcov2d * jw;
  const Mat23 gjac = gjw * w.transpose();

  // projection center
  const double x = s.p_cam.x(), y = s.p_cam.y(), z = s.p_cam.z();
  Vec3 gp = Vec3::Zero();
  gp.x() += g.uv.x() * cam.fx / z;
  gp.y() += g.uv.y() * cam.fy / z;
  gp.z() += -g.uv.x() * cam.fx * x / (z * z) - g.uv.y() * cam.fy * y / (z * z);

  // Jacobian entries J00 = fx/z, J11 = fy/z, J02 = -fx*tx/z^2, J12 = -fy*ty/z^2
  gp.z() += -gjac(0, 0) * cam.fx / (z * z) - gjac(1, 1) * cam.fy / (z * z);
  if (s.clamped_x) {
    // tx = L*z, so J02 = -fx*L/z
    gp.z() += gjac(0, 2) * cam.fx * (s.tx / z) / (z * z);
  } else {
    gp.x() += -gjac(0, 2) * cam.fx / (z * z);
    gp.z() += gjac(0, 2) * 2.0 * cam.fx * x / (z * z * z);
  }
  if (s.clamped_y) {
    gp.z() += gjac(1, 2) * cam.fy * (s.ty / z) / (z * z);
  } else {
    gp.y() += -gjac(1, 2) * cam.fy / (z * z);
    gp.z() += gjac(1, 2) * 2.0 * cam.fy * y / (z * z * z);
  }
  const Vec3 gmean = w.transpose() * gp;
  for (int c = 0; c < 3; ++c) out(s.index, kChMean + c) += gmean(c);

  // cov3d = M M^T with M = R diag(scale)
  const Mat3 m = s.rot * s.scale.asDiagonal();
  const Mat3 gm = 2.0 * gcov3d * m;
  const Mat3 grot = gm * s.scale.asDiagonal();
  const Vec3 gscale = (s.rot.transpose() * gm).diagonal();
  for (int c = 0; c < 3; ++c) {
    const double ls = s.log_scale_raw(c);
    const double dls = (ls > kLogScaleMin && ls < kLogScaleMax) ? gscale(c) * s.scale(c) : 0.0;
    out(s.index, kChLogScale + c) += dls;
  }

  // rotation: dR/d(unit quat), then through the normalization
  const double qw = s.q_unit(0), qx = s.q_unit(1), qy = s.q_unit(2), qz = s.q_unit(3);
  Mat3 dr_dw, dr_dx, dr_dy, dr_dz;
  dr_dw << 0, -2 * qz, 2 * qy, 2 * qz, 0, -2 * qx, -2 * qy, 2 * qx, 0;
  dr_dx << 0, 2 * qy, 2 * qz, 2 * qy, -4 * qx, -2 * qw, 2 * qz, 2 * qw, -4 * qx;
  dr_dy << -4 * qy, 2 * qx, 2 * qw, 2 * qx, 0, 2 * qz, -2 * qw, 2 * qz, -4 * qy;
  dr_dz << -4 * qz, -2 * qw, 2 * qx, 2 * qw, -4 * qz, 2 * qy, 2 * qx, 2 * qy, 0;
  Vec4 gq_unit(grot.cwiseProduct(dr_dw).sum(), grot.cwiseProduct(dr_dx).sum(),
               grot.cwiseProduct(dr_dy).sum(), grot.cwiseProduct(dr_dz).sum());
  const Vec4 gq_raw = (gq_unit - s.q_unit * s.q_unit.dot(gq_unit)) / s.q_norm;
  for (int c = 0; c < 4; ++c) out(s.index, kChRotation + c) += gq_raw(c);
}

std::vector<int> splats_for_row(const std::vector<SplatProj>& splats, int iy) {
  std::vector<int> row;
  for (std::size_t i = 0; i < splats.size(); ++i)
    if (splats[i].y0 <= iy && iy <= splats[i].y1) row.push_back(static_cast<int>(i));
  return row;
}

}  // namespace

Image render(const GaussianSet& set, const Camera& cam, const Vec3& background,
             int threads, std::vector<double>* out_transmittance) {
  const std::vector<SplatProj> splats = project_splats(set, cam);
  Image img(cam.width, cam.height, background);
  img.background = background;
  if (out_transmittance)
    out_transmittance->assign(static_cast<std::size_t>(cam.width) * cam.height, 1.0);

  parallel_for_chunks(cam.height, threads, [&](std::int64_t r0, std::int64_t r1, int) {
    for (std::int64_t iy = r0; iy < r1; ++iy) {
      const std::vector<int> row = splats_for_row(splats, static_cast<int>(iy));
      const double py = static_cast<double>(iy) + 0.5;
      for (int ix = 0; ix < cam.width; ++ix) {
        Vec3 c;
        const double t_final = composite_pixel<false>(splats, row, ix, ix + 0.5, py, c, nullptr);
        c += t_final * background;
        double* px = img.at(ix, static_cast<int>(iy));
        px[0] = c(0);
        px[1] = c(1);
        px[2] = c(2);
        if (out_transmittance)
          (*out_transmittance)[static_cast<std::size_t>(iy) * cam.width + ix] = t_final;
      }
    }
  });
  return img;
}

double photometric_loss(const GaussianSet& set, std::span<const View> views, int threads) {
  if (views.empty()) throw std::invalid_argument("photometric_loss: no views");
  std::size_t total = 0;
  for (const auto& v : views) {
    if (v.target.width != v.camera.width || v.target.height != v.camera.height)
      throw std::invalid_argument("photometric_loss: view/target dimension mismatch");
    total += static_cast<std::size_t>(v.target.width) * v.target.height * 3;
  }
  double sum = 0.0;
  for (const auto& v : views) {
    const Image r = render(set, v.camera, v.target.background, threads);
    // accumulate per row, rows in order
    for (int iy = 0; iy < r.height; ++iy) {
      double row_sum = 0.0;
      for (int ix = 0; ix < r.width; ++ix) {
        const double* a = r.at(ix, iy);
        const double* b = v.target.at(ix, iy);
        for (int c = 0; c < 3; ++c) row_sum += std::abs(a[c] - b[c]);
      }
      sum += row_sum;
    }
  }
  return sum / static_cast<double>(total);
}

std::pair<double, RenderGrad> photometric_grad(const GaussianSet& set,
                                               std::span<const View> views,
                                               int threads) {
  if (views.empty()) throw std::invalid_argument("photometric_grad: no views");
  std::size_t total = 0;
  for (const auto& v : views) {
    if (v.target.width != v.camera.width || v.target.height != v.camera.height)
      throw std::invalid_argument("photometric_grad: view/target dimension mismatch");
    total += static_cast<std::size_t>(v.target.width) * v.target.height * 3;
  }
  const double inv_total = 1.0 / static_cast<double>(total);

  RenderGrad grad = RenderGrad::Zero(static_cast<Eigen::Index>(set.size()), kParamChannels);
  double loss_sum = 0.0;

  for (const auto& v : views) {
    const std::vector<SplatProj> splats = project_splats(set, v.camera);
    const Camera& cam = v.camera;
    const int h = cam.height, w = cam.width;
    const std::size_t n_splats = splats.size();

    // per-row partials, combined in row order afterwards
    std::vector<double> row_loss(static_cast<std::size_t>(h), 0.0);
    std::vector<SplatGrad> row_grads(static_cast<std::size_t>(h) * n_splats);

    parallel_for_chunks(h, threads, [&](std::int64_t r0, std::int64_t r1, int) {
      std::vector<Hit> hits;
      hits.reserve(n_splats);
      for (std::int64_t iy = r0; iy < r1; ++iy) {
        const std::vector<int> row = splats_for_row(splats, static_cast<int>(iy));
        const double py = static_cast<double>(iy) + 0.5;
        SplatGrad* acc = row_grads.data() + static_cast<std::size_t>(iy) * n_splats;
        double lsum = 0.0;
        for (int ix = 0; ix < w; ++ix) {
          hits.clear();
          Vec3 c;
          const double t_final =
              composite_pixel<true>(splats, row, ix, ix + 0.5, py, c, &hits);
          c += t_final * v.target.background;

          const double* tgt = v.target.at(ix, static_cast<int>(iy));
          Vec3 dc;
          for (int ch = 0; ch < 3; ++ch) {
            const double diff = c(ch) - tgt[ch];
            lsum += std::abs(diff);
            dc(ch) = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) * inv_total;
          }
          if (hits.empty() || (dc(0) == 0.0 && dc(1) == 0.0 && dc(2) == 0.0)) continue;

          // suffix color S_i = sum_{j>i} T_j a_j col_j + T_end * bg
          const Hit& last = hits.back();
          Vec3 suffix = last.trans * (1.0 - last.alpha) * v.target.background;
          for (std::size_t k = hits.size(); k-- > 0;) {
            const Hit& hit = hits[k];
            const SplatProj& s = splats[hit.proj];
            SplatGrad& sg = acc[hit.proj];
            sg.any = true;

            double dalpha = 0.0;
            for (int ch = 0; ch < 3; ++ch) {
              sg.color(ch) += dc(ch) * hit.trans * hit.alpha;
              dalpha += dc(ch) * (hit.trans * s.color(ch) - suffix(ch) / (1.0 - hit.alpha));
            }
            if (s.opacity * hit.gauss < kAlphaClamp) {
              sg.op += dalpha * hit.gauss;
              const double dgauss = dalpha * s.opacity;
              const Vec2 qd = s.inv2d * hit.d;
              sg.uv += dgauss * hit.gauss * qd;
              const double f = -0.5 * dgauss * hit.gauss;
              sg.q00 += f * hit.d(0) * hit.d(0);
              sg.q01 += f * hit.d(0) * hit.d(1);
              sg.q11 += f * hit.d(1) * hit.d(1);
            }
            suffix += hit.trans * hit.alpha * s.color;
          }
        }
        row_loss[static_cast<std::size_t>(iy)] = lsum;
      }
    });

    for (int iy = 0; iy < h; ++iy) loss_sum += row_loss[static_cast<std::size_t>(iy)];

    // combine row partials in row order, then map to parameter space
    std::vector<SplatGrad> merged(n_splats);
    for (int iy = 0; iy < h; ++iy) {
      const SplatGrad* acc = row_grads.data() + static_cast<std::size_t>(iy) * n_splats;
      for (std::size_t si = 0; si < n_splats; ++si) {
        if (!acc[si].any) continue;
        SplatGrad& m = merged[si];
        m.any = true;
        m.uv += acc[si].uv;
        m.q00 += acc[si].q00;
        m.q01 += acc[si].q01;
        m.q11 += acc[si].q11;
        m.op += acc[si].op;
        m.color += acc[si].color;
      }
    }
    for (std::size_t si = 0; si < n_splats; ++si) {
      if (!merged[si].any) continue;
      SplatGrad g = merged[si];
      finalize_splat_grad(splats[si], g, cam, grad);
    }
  }

  return {loss_sum * inv_total, grad};
}

}  // namespace splatflow
