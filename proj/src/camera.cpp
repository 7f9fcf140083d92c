#include "splatflow/camera.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace splatflow {

Camera make_lookat_camera(const Vec3& eye, const Vec3& target, const Vec3& up,
                          double fov_y_deg, int width, int height) {
  Vec3 forward = (target - eye).normalized();  // camera +z
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-9) {
    // looking along up; pick another reference
    right = forward.cross(Vec3(1, 0, 0));
    if (right.norm() < 1e-9) right = forward.cross(Vec3(0, 1, 0));
  }
  right.normalize();
  const Vec3 down = forward.cross(right);  // camera +y points down the image

  Mat3 r;  // rows are the camera axes in world coordinates
  r.row(0) = right.transpose();
  r.row(1) = down.transpose();
  r.row(2) = forward.transpose();

  Camera cam;
  cam.width = width;
  cam.height = height;
  const double f = 0.5 * height / std::tan(0.5 * fov_y_deg * M_PI / 180.0);
  cam.fx = f;
  cam.fy = f;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.world_to_cam = Mat4::Identity();
  cam.world_to_cam.block<3, 3>(0, 0) = r;
  cam.world_to_cam.block<3, 1>(0, 3) = -r * eye;
  return cam;
}

Eigen::MatrixXd plucker_rays(const Camera& cam) {
  const Mat3 r = cam.rotation();
  const Vec3 o = cam.center();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(cam.height) * cam.width, 6);
  for (int iy = 0; iy < cam.height; ++iy) {
    for (int ix = 0; ix < cam.width; ++ix) {
      const double px = ix + 0.5, py = iy + 0.5;
      Vec3 d_cam((px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0);
      const Vec3 d = (r.transpose() * d_cam).normalized();
      const Vec3 m = o.cross(d);
      const Eigen::Index row = static_cast<Eigen::Index>(iy) * cam.width + ix;
      out.block<1, 3>(row, 0) = d.transpose();
      out.block<1, 3>(row, 3) = m.transpose();
    }
  }
  return out;
}

void write_cameras(const std::vector<Camera>& cams, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_cameras: cannot open " + path);
  out << std::setprecision(17);
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const Camera& c = cams[i];
    out << i << ' ' << c.fx << ' ' << c.fy << ' ' << c.cx << ' ' << c.cy << ' '
        << c.width << ' ' << c.height;
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col) out << ' ' << c.world_to_cam(r, col);
    out << '\n';
  }
}

std::vector<Camera> read_cameras(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_cameras: cannot open " + path);
  std::vector<Camera> cams;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t id;
    Camera c;
    ls >> id >> c.fx >> c.fy >> c.cx >> c.cy >> c.width >> c.height;
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col) ls >> c.world_to_cam(r, col);
    if (!ls) throw std::runtime_error("read_cameras: malformed line in " + path);
    cams.push_back(c);
  }
  return cams;
}

}  // namespace splatflow
