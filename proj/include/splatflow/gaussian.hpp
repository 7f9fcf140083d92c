#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <vector>

namespace splatflow {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// Flat per-Gaussian parameter layout. Fixed channel order:
//   [mean(3), log_scale(3), quaternion wxyz(4), logit_opacity(1), rgb(3)]
inline constexpr int kParamChannels = 14;
inline constexpr int kChMean = 0;
inline constexpr int kChLogScale = 3;
inline constexpr int kChRotation = 6;
inline constexpr int kChOpacity = 10;
inline constexpr int kChRgb = 11;

using ParamVector = Eigen::Matrix<double, kParamChannels, 1>;
// One Gaussian per row, kParamChannels columns.
using ParamMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Gaussian3D {
  Vec3 mean = Vec3::Zero();
  Vec3 log_scale = Vec3::Zero();
  Vec4 rotation = Vec4(1, 0, 0, 0);  // (w, x, y, z), Hamilton convention
  double logit_opacity = 0.0;
  Vec3 rgb = Vec3::Zero();  // raw; sigmoid applied at render time
};

struct GaussianSet {
  std::vector<Gaussian3D> gaussians;

  std::size_t size() const { return gaussians.size(); }
  bool empty() const { return gaussians.empty(); }
  Gaussian3D& operator[](std::size_t i) { return gaussians[i]; }
  const Gaussian3D& operator[](std::size_t i) const { return gaussians[i]; }
};

struct NormStats {
  ParamVector channel_mean = ParamVector::Zero();
  ParamVector channel_std = ParamVector::Ones();
};

// std floor for degenerate (zero-variance) channels
inline constexpr double kNormStdFloor = 1e-6;

ParamVector pack(const Gaussian3D& g);
Gaussian3D unpack(const ParamVector& v);
Gaussian3D unpack_row(const Eigen::Ref<const Eigen::RowVectorXd>& row);

ParamMatrix set_to_matrix(const GaussianSet& set);
GaussianSet matrix_to_set(const ParamMatrix& m);

NormStats compute_norm_stats(std::span<const GaussianSet> dataset);

ParamVector normalize(const ParamVector& v, const NormStats& s);
ParamVector denormalize(const ParamVector& v, const NormStats& s);
ParamMatrix normalize_rows(const ParamMatrix& m, const NormStats& s);
ParamMatrix denormalize_rows(const ParamMatrix& m, const NormStats& s);

// Rotation matrix from a unit quaternion (w, x, y, z).
Mat3 quat_to_rotmat(const Vec4& q);
// Canonical quaternion (w >= 0) from a proper rotation matrix.
Vec4 rotmat_to_quat(const Mat3& r);

// Sigma = R S S^T R^T with S = diag(exp(log_scale)).
Mat3 covariance(const Gaussian3D& g);

double sigmoid(double x);
double logit(double p);

// Renormalizes quaternions in place; a near-zero quaternion becomes identity.
void finalize_gaussians(GaussianSet& set);

}  // namespace splatflow
