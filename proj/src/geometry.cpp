#include "locfuse/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "locfuse/error.hpp"

namespace locfuse {

Mat4 Pose::matrix() const {
  Mat4 t = Mat4::Identity();
  t.topLeftCorner<3, 3>() = rotation();
  t.topRightCorner<3, 1>() = p;
  return t;
}

Intrinsics Intrinsics::reference() {
  return Intrinsics{548.44934818, 540.17600512, 317.73762648, 249.00614224};
}

Mat3 Intrinsics::matrix() const {
  Mat3 k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

void Intrinsics::validate() const {
  require(fx > 0.0 && fy > 0.0, "intrinsics: focal lengths must be positive");
  require(std::isfinite(cx) && std::isfinite(cy), "intrinsics: principal point must be finite");
}

Vec2 Intrinsics::project(const Vec3& x) const {
  return Vec2(fx * x.x() / x.z() + cx, fy * x.y() / x.z() + cy);
}

Vec3 Intrinsics::unproject(const Vec2& pixel) const {
  return Vec3((pixel.x() - cx) / fx, (pixel.y() - cy) / fy, 1.0);
}

Vec4 to_wxyz(const Quat& q) { return Vec4(q.w(), q.x(), q.y(), q.z()); }

Quat from_wxyz(const Vec4& v) { return Quat(v[0], v[1], v[2], v[3]); }

Quat canonicalize(const Quat& q) {
  bool flip = q.w() < 0.0;
  if (q.w() == 0.0) {
    for (double c : {q.x(), q.y(), q.z()}) {
      if (c != 0.0) {
        flip = c < 0.0;
        break;
      }
    }
  }
  if (!flip) return q;
  return Quat(-q.w(), -q.x(), -q.y(), -q.z());
}

Quat quat_normalize(const Vec4& wxyz) {
  const double n = wxyz.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    fail(ErrorCode::kDegenerateQuaternion, "quaternion has zero or non-finite norm");
  }
  return canonicalize(from_wxyz(wxyz / n));
}

Quat quat_normalize(const Quat& q) { return quat_normalize(to_wxyz(q)); }

Mat3 rotation_matrix(const Quat& q) { return quat_normalize(q).toRotationMatrix(); }

Quat rotation_exp(const Vec3& omega) {
  const double theta = omega.norm();
  const double half = 0.5 * theta;
  double s;
  if (theta < 1e-8) {
    s = 0.5 - theta * theta / 48.0;
  } else {
    s = std::sin(half) / theta;
  }
  return Quat(std::cos(half), s * omega.x(), s * omega.y(), s * omega.z());
}

Vec3 rotation_log(const Quat& q_in) {
  const Quat q = canonicalize(q_in);
  const Vec3 v(q.x(), q.y(), q.z());
  const double sn = v.norm();
  if (sn < 1e-10) return (2.0 / q.w()) * v;
  const double theta = 2.0 * std::atan2(sn, q.w());
  return (theta / sn) * v;
}

double rotation_angle(const Quat& a, const Quat& b) {
  // atan2 keeps precision near zero where acos of the dot product does not.
  const Quat d = a.normalized().conjugate() * b.normalized();
  return 2.0 * std::atan2(d.vec().norm(), std::abs(d.w()));
}

RelativePose relative_pose(const Pose& a, const Pose& b) {
  const Quat qa = a.q.normalized();
  RelativePose rel;
  rel.dp = qa.conjugate() * (b.p - a.p);
  rel.dq = canonicalize((qa.conjugate() * b.q.normalized()).normalized());
  return rel;
}

Pose compose(const Pose& a, const RelativePose& rel) {
  const Quat qa = a.q.normalized();
  Pose out;
  out.p = a.p + qa * rel.dp;
  out.q = canonicalize((qa * rel.dq.normalized()).normalized());
  return out;
}

std::vector<RelativePose> relative_stream(std::span<const Pose> poses) {
  std::vector<RelativePose> rel;
  if (poses.size() < 2) return rel;
  rel.reserve(poses.size() - 1);
  for (std::size_t i = 1; i < poses.size(); ++i) rel.push_back(relative_pose(poses[i - 1], poses[i]));
  return rel;
}

double median(std::vector<double> values) {
  require(!values.empty(), "median of an empty sequence");
  const std::size_t n = values.size();
  const std::size_t mid = n / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  const double upper = values[mid];
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + mid);
  return 0.5 * (lower + upper);
}

namespace {

void check_pairs(std::span<const Pose> pred, std::span<const Pose> gt) {
  require(!pred.empty(), "metric over an empty pose sequence");
  require(pred.size() == gt.size(), "metric: prediction and ground truth lengths differ");
}

}  // namespace

double median_position_error(std::span<const Pose> pred, std::span<const Pose> gt) {
  check_pairs(pred, gt);
  std::vector<double> err(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) err[i] = (pred[i].p - gt[i].p).norm();
  return median(std::move(err));
}

double orientation_error_deg(const Quat& pred, const Quat& gt) {
  return rotation_angle(pred, gt) * 180.0 / std::numbers::pi;
}

double median_orientation_error(std::span<const Pose> pred, std::span<const Pose> gt) {
  check_pairs(pred, gt);
  std::vector<double> err(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) err[i] = orientation_error_deg(pred[i].q, gt[i].q);
  return median(std::move(err));
}

double improvement_percent(double base, double refined) {
  require(base > 0.0, "improvement_percent: base error must be positive");
  return 100.0 * (base - refined) / base;
}

}  // namespace locfuse
