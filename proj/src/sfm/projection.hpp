#pragma once

#include <Eigen/Core>

#include "locfuse/geometry.hpp"

namespace locfuse::sfm::detail {

using Mat23 = Eigen::Matrix<double, 2, 3>;

// Pixel residual of a world point and its derivatives w.r.t. the point, the
// camera position and a right-multiplied rotation increment.
struct Projection {
  bool valid = false;
  Vec2 residual = Vec2::Zero();
  Mat23 d_point;
  Mat23 d_position;
  Mat23 d_rotation;
};

inline Projection project(const Mat3& world_to_cam, const Vec3& position, const Intrinsics& k, const Vec3& x,
                          const Vec2& observed, bool jacobians = true) {
  Projection out;
  const Vec3 xc = world_to_cam * (x - position);
  if (!(xc.z() > 1e-9)) return out;
  out.valid = true;
  const double iz = 1.0 / xc.z();
  out.residual = Vec2(k.fx * xc.x() * iz + k.cx, k.fy * xc.y() * iz + k.cy) - observed;
  if (!jacobians) return out;
  Mat23 dpi;
  dpi << k.fx * iz, 0.0, -k.fx * xc.x() * iz * iz, 0.0, k.fy * iz, -k.fy * xc.y() * iz * iz;
  out.d_point = dpi * world_to_cam;
  out.d_position = -out.d_point;
  Mat3 skew;
  skew << 0.0, -xc.z(), xc.y(), xc.z(), 0.0, -xc.x(), -xc.y(), xc.x(), 0.0;
  out.d_rotation = dpi * skew;
  return out;
}

inline void apply_rotation_step(Pose& pose, const Vec3& step) {
  pose.q = (pose.q * rotation_exp(step)).normalized();
}

}  // namespace locfuse::sfm::detail
