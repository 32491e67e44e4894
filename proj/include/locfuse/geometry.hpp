#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace locfuse {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Quat = Eigen::Quaterniond;

// Camera/body pose in the world frame. q rotates body coordinates into world
// coordinates, p is the body origin in world coordinates. Camera bodies use
// x right, y down, z forward.
struct Pose {
  Vec3 p = Vec3::Zero();
  Quat q = Quat::Identity();

  Mat3 rotation() const { return q.toRotationMatrix(); }
  Mat4 matrix() const;
};

// Motion from pose a to pose b, expressed in a's body frame.
struct RelativePose {
  Vec3 dp = Vec3::Zero();
  Quat dq = Quat::Identity();
};

// Pinhole calibration in pixels.
struct Intrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;

  // Checkerboard calibration of the 640x480 capture rig.
  static Intrinsics reference();

  Mat3 matrix() const;
  void validate() const;
  Vec2 project(const Vec3& camera_point) const;
  // Unit-depth ray through a pixel.
  Vec3 unproject(const Vec2& pixel) const;
};

struct ImageSize {
  int width = 640;
  int height = 480;
};

// Quaternions cross this API as (w, x, y, z).
Vec4 to_wxyz(const Quat& q);
Quat from_wxyz(const Vec4& wxyz);

// Picks the w >= 0 representative of {q, -q}. When w == 0 the first non-zero
// vector component is made positive.
Quat canonicalize(const Quat& q);

// Unit quaternion in canonical hemisphere. Throws kDegenerateQuaternion on a
// zero (or non-finite) norm.
Quat quat_normalize(const Vec4& wxyz);
Quat quat_normalize(const Quat& q);

Mat3 rotation_matrix(const Quat& q);

// Rotation exponential/log maps (axis-angle vectors, radians).
Quat rotation_exp(const Vec3& omega);
Vec3 rotation_log(const Quat& q);

// Geodesic angle between two orientations, radians; sign-invariant.
double rotation_angle(const Quat& a, const Quat& b);

RelativePose relative_pose(const Pose& a, const Pose& b);
Pose compose(const Pose& a, const RelativePose& rel);

// Relative motions between consecutive poses; size n - 1.
std::vector<RelativePose> relative_stream(std::span<const Pose> poses);

// Median; even counts average the two central order statistics.
double median(std::vector<double> values);

double median_position_error(std::span<const Pose> pred, std::span<const Pose> gt);
// Per pair 2*acos(min(1, |<q_pred, q_gt>|)) in degrees.
double median_orientation_error(std::span<const Pose> pred, std::span<const Pose> gt);
double orientation_error_deg(const Quat& pred, const Quat& gt);

// 100 * (base - refined) / base; positive means refined is better.
double improvement_percent(double base, double refined);

}  // namespace locfuse
