#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "locfuse/error.hpp"
#include "locfuse/flow.hpp"
#include "locfuse/sim.hpp"

using namespace locfuse;
using namespace locfuse::sim;

TEST_CASE("trajectory: zero speed and jitter hold the pose") {
  MotionProfile p;
  p.speed_min = p.speed_max = 0.0;
  p.yaw_rate_max = 0.0;
  p.jitter_pos = p.jitter_rot = 0.0;
  const auto s = generate_trajectory(p, SceneSpec{}, 5.0, 10.0, 1);
  REQUIRE(s.size() == 50);
  for (const auto& pose : s.poses) {
    CHECK((pose.p - s.poses[0].p).norm() == 0.0);
    CHECK(to_wxyz(pose.q) == to_wxyz(s.poses[0].q));
  }
}

TEST_CASE("trajectory: per-step limits and box containment") {
  const SceneSpec scene;
  for (const auto& profile : {MotionProfile::robot(), MotionProfile::handheld()}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const double rate = 23.0;
      const auto s = generate_trajectory(profile, scene, 120.0, rate, seed);
      double max_step = 0.0, max_yaw = 0.0;
      for (std::size_t i = 1; i < s.size(); ++i) {
        max_step = std::max(max_step, (s.poses[i].p - s.poses[i - 1].p).norm());
        // Heading = camera forward projected on the floor.
        const Vec3 fa = s.poses[i - 1].rotation().col(2), fb = s.poses[i].rotation().col(2);
        const double ya = std::atan2(fa.y(), fa.x()), yb = std::atan2(fb.y(), fb.x());
        double d = std::abs(yb - ya);
        d = std::min(d, 2 * std::numbers::pi - d);
        max_yaw = std::max(max_yaw, d);
      }
      CHECK(max_step <= profile.speed_max / rate + 1e-12);
      CHECK(max_yaw <= profile.yaw_rate_max * std::numbers::pi / 180.0 / rate + 1e-9);
      for (const auto& pose : s.poses) {
        CHECK((pose.p.array() >= scene.box_min.array()).all());
        CHECK((pose.p.array() <= scene.box_max.array()).all());
      }
    }
  }
}

TEST_CASE("trajectory and scene are pure functions of the seed") {
  const auto a = generate_trajectory(MotionProfile::handheld(), SceneSpec{}, 10.0, 23.0, 42);
  const auto b = generate_trajectory(MotionProfile::handheld(), SceneSpec{}, 10.0, 23.0, 42);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.poses[i].p == b.poses[i].p);
    CHECK(to_wxyz(a.poses[i].q) == to_wxyz(b.poses[i].q));
  }
  CHECK(make_scene(SceneSpec{}, 3).landmarks == make_scene(SceneSpec{}, 3).landmarks);
  CHECK(MotionProfile::robot().jitter_pos < MotionProfile::handheld().jitter_pos);
  CHECK(MotionProfile::robot().jitter_rot < MotionProfile::handheld().jitter_rot);
}

TEST_CASE("scene landmarks lie on the box or racks") {
  SceneSpec spec;
  spec.landmark_count = 500;
  const auto scene = make_scene(spec, 1);
  CHECK(scene.landmarks.size() == 500);
  for (const auto& x : scene.landmarks) {
    CHECK((x.array() >= spec.box_min.array()).all());
    CHECK((x.array() <= spec.box_max.array()).all());
  }
  spec.landmark_count = 3;
  CHECK_THROWS_AS(make_scene(spec, 1), Error);
}

TEST_CASE("projection") {
  const Intrinsics k = Intrinsics::reference();
  CHECK(k.fx == 548.44934818);
  CHECK(k.cx == 317.73762648);
  CHECK(k.fy == 540.17600512);
  CHECK(k.cy == 249.00614224);
  const Pose cam;
  const std::vector<Vec3> pts = {Vec3(0, 0, 1), Vec3(0, 0, 0), Vec3(0, 0, -1), Vec3(10, 0, 1)};
  const auto obs = project_landmarks(pts, cam, k);
  REQUIRE(obs.size() == 1);
  CHECK(obs[0].landmark == 0);
  CHECK(obs[0].pixel.x() == k.cx);
  CHECK(obs[0].pixel.y() == k.cy);

  // K [R | t] oracle with t = -R^T p in homogeneous form.
  const Pose pose = look_at(Vec3(1, -4, 1.2), Vec3(0.3, 0.2, 0.9));
  std::vector<Vec3> cloud;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int i = 0; i < 300; ++i) cloud.emplace_back(u(rng), u(rng), u(rng));
  Eigen::Matrix<double, 3, 4> rt;
  rt.leftCols<3>() = pose.rotation().transpose();
  rt.col(3) = -pose.rotation().transpose() * pose.p;
  const Eigen::Matrix<double, 3, 4> proj = k.matrix() * rt;
  for (const auto& o : project_landmarks(cloud, pose, k)) {
    const Vec3 h = proj * cloud[o.landmark].homogeneous();
    CHECK((o.pixel - h.hnormalized()).norm() < 1e-9);
  }
}

TEST_CASE("synth_matches") {
  const auto sc = make_sfm_scenario(4, 300, 0, 5);
  SUBCASE("exact") {
    const auto m = synth_matches(sc.landmarks, 0, sc.cameras[0], 1, sc.cameras[1], sc.intrinsics, {}, 1);
    REQUIRE(m.size() > 50);
    for (const auto& x : m) {
      const auto oa = project_landmarks(std::span(&sc.landmarks[x.label], 1), sc.cameras[0], sc.intrinsics);
      CHECK((oa[0].pixel - x.xa).norm() == 0.0);
    }
  }
  SUBCASE("all outliers") {
    const auto m = synth_matches(sc.landmarks, 0, sc.cameras[0], 1, sc.cameras[1], sc.intrinsics, {0.0, 1.0}, 1);
    REQUIRE(!m.empty());
    for (const auto& x : m) CHECK(x.label == -1);
  }
  SUBCASE("noise statistics") {
    std::vector<double> res;
    for (std::uint64_t seed = 0; res.size() < 20000; ++seed) {
      for (const auto& x : synth_matches(sc.landmarks, 0, sc.cameras[0], 2, sc.cameras[2], sc.intrinsics, {0.5, 0.0}, seed)) {
        const auto oa = project_landmarks(std::span(&sc.landmarks[x.label], 1), sc.cameras[0], sc.intrinsics);
        res.push_back(x.xa.x() - oa[0].pixel.x());
        res.push_back(x.xa.y() - oa[0].pixel.y());
      }
    }
    double ss = 0.0;
    for (double r : res) ss += r * r;
    const double sd = std::sqrt(ss / double(res.size()));
    CHECK(std::abs(sd - 0.5) < 0.05);
  }
  SUBCASE("observation noise is shared across pairs") {
    const auto m01 = synth_matches(sc.landmarks, 0, sc.cameras[0], 1, sc.cameras[1], sc.intrinsics, {0.5, 0.0}, 9);
    const auto m02 = synth_matches(sc.landmarks, 0, sc.cameras[0], 2, sc.cameras[2], sc.intrinsics, {0.5, 0.0}, 9);
    int shared = 0;
    for (const auto& a : m01) {
      for (const auto& b : m02) {
        if (a.label == b.label) {
          CHECK(a.xa == b.xa);
          ++shared;
        }
      }
    }
    CHECK(shared > 20);
  }
}

TEST_CASE("synth_flow") {
  const Intrinsics k = Intrinsics::reference();
  const auto proxy = DepthProxy::box(Vec3(-10, -10, -10), Vec3(10, 10, 10));
  SUBCASE("identical poses") {
    const Pose p = look_at(Vec3(1, 2, 0), Vec3(3, 2, 0.5));
    const auto f = synth_flow(proxy, p, p, k, {64, 48});
    for (std::size_t i = 0; i < f.u.size(); ++i) {
      CHECK(std::abs(f.u[i]) < 1e-9);
      CHECK(std::abs(f.v[i]) < 1e-9);
    }
  }
  SUBCASE("x-translation against a fronto-parallel plane") {
    DepthProxy wall;
    wall.planes.push_back({Vec3::UnitZ(), 5.0});
    const Pose a;
    Pose b;
    b.p = Vec3(0.1, 0, 0);
    const auto f = synth_flow(wall, a, b, k, {64, 48});
    for (std::size_t i = 0; i < f.u.size(); ++i) {
      if (f.low_confidence[i]) continue;
      CHECK(f.u[i] == doctest::Approx(-k.fx * 0.1 / 5.0).epsilon(1e-12));
      CHECK(std::abs(f.v[i]) < 1e-12);
    }
  }
  SUBCASE("rotation about the optical axis") {
    const Pose a;
    Pose b;
    b.q = rotation_exp(Vec3(0, 0, 0.02));
    // Square pixels make the field exactly tangential.
    Intrinsics sq{500, 500, 320, 240};
    const auto f = synth_flow(proxy, a, b, sq);
    const auto c = f.index(320, 240);
    CHECK(std::abs(f.u[c]) < 1e-12);
    CHECK(std::abs(f.v[c]) < 1e-12);
    // Each pixel turns about (cx, cy) by -0.02 rad: the flow is the chord of
    // that rotation, perpendicular to the bisecting radius.
    const Eigen::Rotation2Dd turn(-0.02);
    for (int y = 40; y < 480; y += 80) {
      for (int x = 40; x < 640; x += 80) {
        const Vec2 r(x - 320.0, y - 240.0), d(f.u[f.index(x, y)], f.v[f.index(x, y)]);
        CHECK((d - (turn * r - r)).norm() < 1e-9);
        CHECK(std::abs((r + 0.5 * d).dot(d)) < 1e-9);
      }
    }
  }
}

TEST_CASE("rendered views agree with analytic flow") {
  const Intrinsics k = Intrinsics::reference();
  const auto proxy = DepthProxy::box(Vec3(-6, -6, -2), Vec3(6, 6, 3));
  const auto tex = SolidTexture::random(11, 0.15, 0.4);
  const Pose a = look_at(Vec3(0, 0, 0.5), Vec3(1, 0, 0.4));
  Pose b = a;
  b.p += a.rotation() * Vec3(0.03, 0.01, 0.0);
  b.q = canonicalize(a.q * rotation_exp(Vec3(0.0, 0.003, 0.0)));
  const auto ia = render_view(tex, proxy, a, k);
  const auto ib = render_view(tex, proxy, b, k);
  const auto lk = lucas_kanade(ia, ib);
  const auto an = synth_flow(proxy, a, b, k);
  double sum = 0.0;
  long n = 0;
  for (int y = 30; y < 450; ++y) {
    for (int x = 30; x < 610; ++x) {
      const auto i = lk.index(x, y);
      if (lk.low_confidence[i] || an.low_confidence[i]) continue;
      sum += std::hypot(lk.u[i] - an.u[i], lk.v[i] - an.v[i]);
      ++n;
    }
  }
  REQUIRE(n > 100000);
  MESSAGE("mean endpoint error ", sum / n, " px over ", n, " pixels");
  CHECK(sum / n < 0.3);
}

TEST_CASE("degrade_absolute") {
  const auto gt = generate_trajectory(MotionProfile::robot(), SceneSpec{}, 1000.0 / 23.0, 23.0, 1);
  REQUIRE(gt.size() == 1000);
  SUBCASE("no noise") {
    const auto d = degrade_absolute(gt, {}, 3);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      CHECK(d.stream.poses[i].p == gt.poses[i].p);
      CHECK(to_wxyz(d.stream.poses[i].q) == to_wxyz(gt.poses[i].q));
      CHECK(d.outlier[i] == 0);
    }
  }
  SUBCASE("outlier count") {
    const auto d = degrade_absolute(gt, {0.0, 0.0, 0.05, 1.0}, 3);
    const double flagged = std::count(d.outlier.begin(), d.outlier.end(), 1);
    CHECK(std::abs(flagged - 50.0) <= 3 * std::sqrt(1000 * 0.05 * 0.95));
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const double e = (d.stream.poses[i].p - gt.poses[i].p).norm();
      CHECK(e == doctest::Approx(d.outlier[i] ? 1.0 : 0.0));
    }
  }
  SUBCASE("median position error follows the Maxwell median") {
    // |N(0, s^2 I3)| is Maxwell distributed; its median solves
    // erf(x / (s sqrt 2)) - sqrt(2/pi) (x/s) exp(-x^2 / (2 s^2)) = 1/2.
    auto cdf = [](double z) { return std::erf(z / std::sqrt(2.0)) - std::sqrt(2.0 / std::numbers::pi) * z * std::exp(-z * z / 2); };
    double lo = 0.0, hi = 5.0;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      (cdf(mid) < 0.5 ? lo : hi) = mid;
    }
    const double expect = 0.2 * lo;
    std::vector<double> errs;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto d = degrade_absolute(gt, {0.2, 0.0, 0.0, 0.0}, seed);
      for (std::size_t i = 0; i < gt.size(); ++i) errs.push_back((d.stream.poses[i].p - gt.poses[i].p).norm());
    }
    std::sort(errs.begin(), errs.end());
    const double med = 0.5 * (errs[errs.size() / 2 - 1] + errs[errs.size() / 2]);
    CHECK(std::abs(med - expect) < 0.02 * expect);
  }
  SUBCASE("orientation noise keeps unit quaternions") {
    const auto d = degrade_absolute(gt, {0.0, 2.0, 0.0, 0.0}, 4);
    for (const auto& p : d.stream.poses) CHECK(std::abs(p.q.norm() - 1.0) < 1e-9);
  }
}
