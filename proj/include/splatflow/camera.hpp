#pragma once

#include <string>
#include <vector>

#include "splatflow/gaussian.hpp"

namespace splatflow {

// Pinhole camera with a rigid world-to-camera transform. Pixel (ix, iy)
// samples at (ix + 0.5, iy + 0.5).
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  Mat4 world_to_cam = Mat4::Identity();

  Mat3 rotation() const { return world_to_cam.block<3, 3>(0, 0); }
  Vec3 translation() const { return world_to_cam.block<3, 1>(0, 3); }
  Vec3 center() const { return -rotation().transpose() * translation(); }
  Vec3 to_camera(const Vec3& p_world) const {
    return rotation() * p_world + translation();
  }
};

Camera make_lookat_camera(const Vec3& eye, const Vec3& target, const Vec3& up,
                          double fov_y_deg, int width, int height);

// Per-pixel Plucker coordinates: world-space unit direction d followed by
// moment m = o x d, o the camera center. Shape height*width rows, 6 cols.
Eigen::MatrixXd plucker_rays(const Camera& cam);

// Structured text, one camera per line:
//   id fx fy cx cy width height m00 m01 ... m33   (row-major pose)
void write_cameras(const std::vector<Camera>& cams, const std::string& path);
std::vector<Camera> read_cameras(const std::string& path);

}  // namespace splatflow
