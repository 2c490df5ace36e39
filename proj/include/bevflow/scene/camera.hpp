#pragma once

// Pinhole cameras on a ring around the ego vehicle. Camera axes follow the
// usual CV convention: +z optical axis, +x right, +y down. The ego frame is
// +y forward, +x right, +z up.

#include <array>
#include <optional>

#include "bevflow/scene/geometry.hpp"

namespace bevflow::scene {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

struct Pixel {
  double u = 0, v = 0;  // column, row
};

struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int rows = 0, cols = 0;
  std::array<double, 9> rot{};  // row-major, columns are cam axes in ego coords
  Vec3 pos;                     // camera origin in ego coords

  Vec3 to_camera(Vec3 p) const {
    const double dx = p.x - pos.x, dy = p.y - pos.y, dz = p.z - pos.z;
    // R^T (p - pos)
    return {rot[0] * dx + rot[3] * dy + rot[6] * dz, rot[1] * dx + rot[4] * dy + rot[7] * dz,
            rot[2] * dx + rot[5] * dy + rot[8] * dz};
  }
  Vec3 dir_to_ego(Vec3 d) const {
    return {rot[0] * d.x + rot[1] * d.y + rot[2] * d.z, rot[3] * d.x + rot[4] * d.y + rot[5] * d.z,
            rot[6] * d.x + rot[7] * d.y + rot[8] * d.z};
  }
};

inline constexpr double kMinDepth = 0.1;

// Projects an ego-frame 3-D point; nullopt when behind the camera plane or
// outside the image.
inline std::optional<Pixel> project_to_camera(Vec3 p, const Camera& cam) {
  const Vec3 pc = cam.to_camera(p);
  if (pc.z <= kMinDepth) return std::nullopt;
  const double u = cam.fx * pc.x / pc.z + cam.cx;
  const double v = cam.fy * pc.y / pc.z + cam.cy;
  if (u < 0 || u > cam.cols - 1 || v < 0 || v > cam.rows - 1) return std::nullopt;
  return Pixel{u, v};
}

// Casts the pixel ray onto the ground plane z=0; nullopt at/above horizon.
inline std::optional<Vec2> unproject_to_ground(Pixel px, const Camera& cam) {
  const Vec3 d_cam{(px.u - cam.cx) / cam.fx, (px.v - cam.cy) / cam.fy, 1.0};
  const Vec3 d = cam.dir_to_ego(d_cam);
  if (d.z >= -1e-9) return std::nullopt;
  const double lambda = -cam.pos.z / d.z;
  return Vec2{cam.pos.x + lambda * d.x, cam.pos.y + lambda * d.y};
}

struct CameraRig {
  std::vector<Camera> cameras;
};

// Six cameras at 60 degree azimuth steps, camera 0 facing ego-forward (+y).
inline CameraRig make_ring_rig(int n_cams = 6, int rows = 64, int cols = 96, double height = 1.6,
                               double fov_deg = 90.0) {
  if (n_cams < 1) throw std::invalid_argument("camera rig: need at least one camera");
  CameraRig rig;
  const double f = (cols / 2.0) / std::tan(fov_deg * M_PI / 360.0);
  for (int k = 0; k < n_cams; ++k) {
    const double psi = 2.0 * M_PI * k / n_cams;
    const double c = std::cos(psi), s = std::sin(psi);
    Camera cam;
    cam.fx = cam.fy = f;
    cam.cx = (cols - 1) / 2.0;
    cam.cy = (rows - 1) / 2.0;
    cam.rows = rows;
    cam.cols = cols;
    // columns: right=(c,s,0), down=(0,0,-1), forward=(-s,c,0)
    cam.rot = {c, 0, -s, s, 0, c, 0, -1, 0};
    cam.pos = {0, 0, height};
    rig.cameras.push_back(cam);
  }
  return rig;
}

}  // namespace bevflow::scene
