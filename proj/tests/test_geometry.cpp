#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "doctest.h"
#include "locfuse/error.hpp"
#include "locfuse/geometry.hpp"
#include "locfuse/pose_io.hpp"

using namespace locfuse;

namespace {

Pose random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Pose p;
  p.p = Vec3(10 * u(rng), 10 * u(rng), 10 * u(rng));
  p.q = quat_normalize(Vec4(u(rng), u(rng), u(rng), u(rng)));
  return p;
}

bool same_rotation(const Quat& a, const Quat& b, double tol) {
  return std::abs(std::abs(a.dot(b)) - 1.0) < tol && (a.toRotationMatrix() - b.toRotationMatrix()).norm() < tol;
}

}  // namespace

TEST_CASE("quat_normalize") {
  CHECK(to_wxyz(quat_normalize(Vec4(1, 0, 0, 0))).isApprox(Vec4(1, 0, 0, 0)));
  CHECK(to_wxyz(quat_normalize(Vec4(2, 0, 0, 0))).isApprox(Vec4(1, 0, 0, 0)));
  CHECK_THROWS_AS(quat_normalize(Vec4(0, 0, 0, 0)), Error);
  try {
    quat_normalize(Vec4::Zero());
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDegenerateQuaternion);
  }

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    Vec4 q(u(rng), u(rng), u(rng), u(rng));
    long double ss = 0;
    for (int k = 0; k < 4; ++k) ss += (long double)q[k] * q[k];
    const long double norm = std::sqrt(ss);
    const double sign = q[0] < 0 ? -1.0 : 1.0;
    const Vec4 got = to_wxyz(quat_normalize(q));
    for (int k = 0; k < 4; ++k) CHECK(std::abs(got[k] - double(sign * q[k] / norm)) < 1e-15);
    CHECK(std::abs(got.norm() - 1.0) < 1e-9);
    CHECK(got[0] >= 0.0);
  }
}

TEST_CASE("rotation matrices are orthonormal") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Mat3 r = rotation_matrix(random_pose(rng).q);
    CHECK((r.transpose() * r - Mat3::Identity()).norm() < 1e-9);
    CHECK(std::abs(r.determinant() - 1.0) < 1e-9);
  }
}

TEST_CASE("relative_pose and compose") {
  Pose a;
  auto rel = relative_pose(a, a);
  CHECK(rel.dp.norm() == 0.0);
  CHECK(to_wxyz(rel.dq).isApprox(Vec4(1, 0, 0, 0)));

  Pose b;
  b.p = Vec3(1, 2, 3);
  CHECK(relative_pose(a, b).dp.isApprox(Vec3(1, 2, 3)));

  RelativePose step;
  step.dp = Vec3(1, 0, 0);
  CHECK(compose(a, step).p.isApprox(Vec3(1, 0, 0)));
  CHECK(compose(b, RelativePose{}).p == b.p);

  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const Pose pa = random_pose(rng);
    const Pose pb = random_pose(rng);
    // Homogeneous-matrix oracle: inv(T_a) * T_b.
    const Mat4 t = pa.matrix().inverse() * pb.matrix();
    const auto r = relative_pose(pa, pb);
    CHECK((r.dp - t.topRightCorner<3, 1>()).norm() < 1e-9);
    CHECK((r.dq.toRotationMatrix() - t.topLeftCorner<3, 3>()).norm() < 1e-9);
    CHECK(r.dq.w() >= 0.0);

    const Pose back = compose(pa, r);
    CHECK((back.p - pb.p).norm() < 1e-9);
    CHECK(same_rotation(back.q, pb.q, 1e-9));
    const Mat4 composed = pa.matrix() * back.matrix().inverse() * pb.matrix();
    CHECK((composed - pa.matrix()).norm() < 1e-8);
  }
}

TEST_CASE("compose round trip property") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 10000; ++i) {
    const Pose a = random_pose(rng);
    const Pose tmp = random_pose(rng);
    RelativePose rel{tmp.p, tmp.q};
    const auto got = relative_pose(a, compose(a, rel));
    CHECK((got.dp - rel.dp).norm() < 1e-9);
    CHECK(same_rotation(got.dq, rel.dq, 1e-9));
  }
}

TEST_CASE("rotation exp/log") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  for (int i = 0; i < 500; ++i) {
    const Vec3 w(u(rng), u(rng), u(rng));
    CHECK((rotation_log(rotation_exp(w)) - w).norm() < 1e-12);
  }
  CHECK(rotation_log(Quat::Identity()).norm() == 0.0);
  CHECK(std::abs(rotation_angle(Quat::Identity(), rotation_exp(Vec3(0, 0, 0.3))) - 0.3) < 1e-12);
}

TEST_CASE("median metrics") {
  std::vector<Pose> gt(5), pred(5);
  CHECK(median_position_error(pred, gt) == 0.0);
  CHECK(median_orientation_error(pred, gt) == 0.0);

  std::vector<Pose> one_gt(1), one_pred(1);
  one_pred[0].p = Vec3(3, 4, 0);
  CHECK(median_position_error(one_pred, one_gt) == doctest::Approx(5.0));

  one_pred[0].q = Quat(Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitZ()));
  CHECK(median_orientation_error(one_pred, one_gt) == doctest::Approx(90.0));

  // q and -q are the same orientation.
  one_gt[0].q = Quat(0.5, 0.5, 0.5, 0.5);
  one_pred[0].q = Quat(-0.5, -0.5, -0.5, -0.5);
  CHECK(median_orientation_error(one_pred, one_gt) == 0.0);

  std::vector<Pose> empty;
  CHECK_THROWS_AS(median_position_error(empty, empty), Error);
  CHECK_THROWS_AS(median_orientation_error(empty, empty), Error);
}

TEST_CASE("median matches sort oracle for every length") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int n = 1; n <= 101; ++n) {
    std::vector<Pose> gt(n), pred(n);
    std::vector<double> d(n);
    for (int i = 0; i < n; ++i) {
      pred[i].p = Vec3(u(rng), u(rng), u(rng));
      d[i] = pred[i].p.norm();
    }
    std::sort(d.begin(), d.end());
    const double expect = n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
    CHECK(median_position_error(pred, gt) == expect);
  }
}

TEST_CASE("orientation error is invariant under sign flips") {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 200; ++i) {
    const Quat a = random_pose(rng).q;
    const Quat b = random_pose(rng).q;
    const Quat nb(-b.w(), -b.x(), -b.y(), -b.z());
    CHECK(orientation_error_deg(a, b) == doctest::Approx(orientation_error_deg(a, nb)).epsilon(1e-12));
  }
}

TEST_CASE("improvement_percent") {
  CHECK(std::abs(improvement_percent(0.2417, 0.1620) - 33.0) < 0.05);
  CHECK(std::abs(improvement_percent(0.4406, 0.2606) - 40.9) < 0.05);
  CHECK(improvement_percent(1.0, 1.0) == 0.0);
  CHECK_THROWS_AS(improvement_percent(0.0, 1.0), Error);
  CHECK_THROWS_AS(improvement_percent(-1.0, 1.0), Error);
}

TEST_CASE("pose stream csv round trip") {
  std::mt19937_64 rng(23);
  PoseStream s;
  for (int i = 0; i < 20; ++i) {
    s.times.push_back(i / 23.0);
    s.poses.push_back(random_pose(rng));
  }
  const auto dir = std::filesystem::temp_directory_path() / "locfuse_geometry_test";
  std::filesystem::create_directories(dir);
  write_pose_stream(dir / "poses.csv", s);
  const auto back = read_pose_stream(dir / "poses.csv");
  REQUIRE(back.size() == s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(back.times[i] == s.times[i]);
    CHECK(back.poses[i].p == s.poses[i].p);
    CHECK((to_wxyz(back.poses[i].q) - to_wxyz(s.poses[i].q)).norm() < 1e-15);
  }
  const auto rel = make_relative_stream(s);
  write_relative_stream(dir / "rel.csv", rel);
  const auto rel_back = read_relative_stream(dir / "rel.csv");
  REQUIRE(rel_back.size() == s.size() - 1);
  CHECK(rel_back.deltas[3].dp == rel.deltas[3].dp);
  std::ifstream in(dir / "poses.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "t,px,py,pz,qw,qx,qy,qz");
}
