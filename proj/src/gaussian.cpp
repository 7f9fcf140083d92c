#include "splatflow/gaussian.hpp"

#include <cmath>
#include <stdexcept>

namespace splatflow {

ParamVector pack(const Gaussian3D& g) {
  ParamVector v;
  v.segment<3>(kChMean) = g.mean;
  v.segment<3>(kChLogScale) = g.log_scale;
  v.segment<4>(kChRotation) = g.rotation;
  v(kChOpacity) = g.logit_opacity;
  v.segment<3>(kChRgb) = g.rgb;
  return v;
}

Gaussian3D unpack(const ParamVector& v) {
  Gaussian3D g;
  g.mean = v.segment<3>(kChMean);
  g.log_scale = v.segment<3>(kChLogScale);
  g.rotation = v.segment<4>(kChRotation);
  g.logit_opacity = v(kChOpacity);
  g.rgb = v.segment<3>(kChRgb);
  return g;
}

Gaussian3D unpack_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  if (row.size() != kParamChannels)
    throw std::invalid_argument("unpack: expected 14 channels, got " +
                                std::to_string(row.size()));
  return unpack(ParamVector(row.transpose()));
}

ParamMatrix set_to_matrix(const GaussianSet& set) {
  ParamMatrix m(static_cast<Eigen::Index>(set.size()), kParamChannels);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    m.row(i) = pack(set[static_cast<std::size_t>(i)]).transpose();
  return m;
}

GaussianSet matrix_to_set(const ParamMatrix& m) {
  if (m.cols() != kParamChannels)
    throw std::invalid_argument("matrix_to_set: expected 14 columns");
  GaussianSet set;
  set.gaussians.resize(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    set.gaussians[static_cast<std::size_t>(i)] = unpack(ParamVector(m.row(i).transpose()));
  return set;
}

NormStats compute_norm_stats(std::span<const GaussianSet> dataset) {
  std::size_t total = 0;
  for (const auto& set : dataset) total += set.size();
  if (total == 0) throw std::invalid_argument("compute_norm_stats: empty dataset");

  ParamVector mean = ParamVector::Zero();
  for (const auto& set : dataset)
    for (const auto& g : set.gaussians) mean += pack(g);
  mean /= static_cast<double>(total);

  ParamVector var = ParamVector::Zero();
  for (const auto& set : dataset)
    for (const auto& g : set.gaussians) {
      const ParamVector d = pack(g) - mean;
      var += d.cwiseProduct(d);
    }
  var /= static_cast<double>(total);  // population convention

  NormStats s;
  s.channel_mean = mean;
  s.channel_std = var.cwiseSqrt().cwiseMax(kNormStdFloor);
  return s;
}

ParamVector normalize(const ParamVector& v, const NormStats& s) {
  return (v - s.channel_mean).cwiseQuotient(s.channel_std);
}

ParamVector denormalize(const ParamVector& v, const NormStats& s) {
  return v.cwiseProduct(s.channel_std) + s.channel_mean;
}

ParamMatrix normalize_rows(const ParamMatrix& m, const NormStats& s) {
  ParamMatrix out = m;
  out.rowwise() -= s.channel_mean.transpose();
  out.array().rowwise() /= s.channel_std.transpose().array();
  return out;
}

ParamMatrix denormalize_rows(const ParamMatrix& m, const NormStats& s) {
  ParamMatrix out = m;
  out.array().rowwise() *= s.channel_std.transpose().array();
  out.rowwise() += s.channel_mean.transpose();
  return out;
}

Mat3 quat_to_rotmat(const Vec4& q) {
  const double w = q(0), x = q(1), y = q(2), z = q(3);
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
      2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
      2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y);
  return r;
}

Vec4 rotmat_to_quat(const Mat3& m) {
  // Shepperd's method: branch on the largest diagonal term for stability.
  Vec4 q;
  const double tr = m(0, 0) + m(1, 1) + m(2, 2);
  if (tr > 0.0) {
    double s = std::sqrt(tr + 1.0) * 2.0;
    q << 0.25 * s, (m(2, 1) - m(1, 2)) / s, (m(0, 2) - m(2, 0)) / s,
        (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
    q << (m(2, 1) - m(1, 2)) / s, 0.25 * s, (m(0, 1) + m(1, 0)) / s,
        (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
    q << (m(0, 2) - m(2, 0)) / s, (m(0, 1) + m(1, 0)) / s, 0.25 * s,
        (m(1, 2) + m(2, 1)) / s;
  } else {
    double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
    q << (m(1, 0) - m(0, 1)) / s, (m(0, 2) + m(2, 0)) / s,
        (m(1, 2) + m(2, 1)) / s, 0.25 * s;
  }
  q.normalize();
  if (q(0) < 0.0) q = -q;
  return q;
}

Mat3 covariance(const Gaussian3D& g) {
  const Mat3 r = quat_to_rotmat(g.rotation);
  const Vec3 s = g.log_scale.array().exp();
  const Mat3 m = r * s.asDiagonal();
  return m * m.transpose();
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

void finalize_gaussians(GaussianSet& set) {
  for (auto& g : set.gaussians) {
    const double n = g.rotation.norm();
    if (n < 1e-12) {
      g.rotation = Vec4(1, 0, 0, 0);
    } else {
      g.rotation /= n;
    }
  }
}

}  // namespace splatflow
