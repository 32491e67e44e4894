#include "locfuse/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "locfuse/error.hpp"

namespace locfuse::sim {

namespace {

using Rng = std::mt19937_64;

constexpr double kDeg = std::numbers::pi / 180.0;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2 * std::numbers::pi;
  while (a < -std::numbers::pi) a += 2 * std::numbers::pi;
  return a;
}

// Camera looking horizontally along yaw with x right, y down, z forward.
Quat heading_rotation(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Mat3 r;
  r.col(0) = Vec3(s, -c, 0);
  r.col(1) = Vec3(0, 0, -1);
  r.col(2) = Vec3(c, s, 0);
  return canonicalize(Quat(r));
}

bool in_frame(const Vec2& px, ImageSize size) {
  return px.x() >= 0.0 && px.y() >= 0.0 && px.x() <= size.width - 1 && px.y() <= size.height - 1;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  std::uint64_t h = splitmix(a);
  h = splitmix(h ^ b);
  h = splitmix(h ^ c);
  return splitmix(h ^ d);
}

MotionProfile MotionProfile::robot() { return MotionProfile{}; }

MotionProfile MotionProfile::handheld() {
  MotionProfile p;
  p.kind = ProfileKind::kHandheld;
  p.speed_min = 0.5;
  p.speed_max = 1.4;
  p.yaw_rate_max = 60.0;
  p.jitter_pos = 0.01;
  p.jitter_rot = 1.5;
  p.camera_height = 1.5;
  return p;
}

void MotionProfile::validate() const {
  require(speed_min >= 0.0 && speed_max >= speed_min, "motion profile: need 0 <= speed_min <= speed_max");
  require(yaw_rate_max >= 0.0, "motion profile: yaw_rate_max must be >= 0");
  require(jitter_pos >= 0.0 && jitter_rot >= 0.0, "motion profile: jitter must be >= 0");
  require(camera_height >= 0.0, "motion profile: camera_height must be >= 0");
}

void SceneSpec::validate() const {
  require((box_max - box_min).minCoeff() > 0.0, "scene: box extents must be positive");
  require(landmark_count >= 8, "scene: need at least 8 landmarks");
  require(rack_count >= 0, "scene: rack_count must be >= 0");
  require(hole_fraction >= 0.0 && hole_fraction < 1.0, "scene: hole_fraction must be in [0, 1)");
}

Scene make_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(mix_seed(seed, 0x5ce7e));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Vec3 lo = spec.box_min, hi = spec.box_max, ext = hi - lo;

  // Walls 0..3: x = lo, x = hi, y = lo, y = hi. Each gets one landmark-free
  // interval along its length.
  std::array<std::pair<double, double>, 4> holes{};
  for (int w = 0; w < 4; ++w) {
    const double len = w < 2 ? ext.y() : ext.x();
    const double start = unit(rng) * (1.0 - spec.hole_fraction) * len;
    holes[w] = {start, start + spec.hole_fraction * len};
  }

  struct Rack {
    Vec3 center;
    bool along_x;
  };
  std::vector<Rack> racks;
  for (int r = 0; r < spec.rack_count; ++r) {
    const Vec3 c(lo.x() + (0.2 + 0.6 * unit(rng)) * ext.x(), lo.y() + (0.2 + 0.6 * unit(rng)) * ext.y(), lo.z());
    racks.push_back({c, unit(rng) < 0.5});
  }

  Scene scene;
  scene.spec = spec;
  const double rack_share = racks.empty() ? 0.0 : 0.25;
  while (int(scene.landmarks.size()) < spec.landmark_count) {
    const double pick = unit(rng);
    Vec3 x;
    if (pick < rack_share) {
      const auto& rack = racks[std::min(std::size_t(unit(rng) * racks.size()), racks.size() - 1)];
      const double along = (unit(rng) - 0.5) * 4.0;
      const double side = unit(rng) < 0.5 ? -0.3 : 0.3;
      const double z = lo.z() + std::min(2.5, ext.z()) * unit(rng);
      x = rack.along_x ? Vec3(rack.center.x() + along, rack.center.y() + side, z)
                       : Vec3(rack.center.x() + side, rack.center.y() + along, z);
      x = x.cwiseMax(lo).cwiseMin(hi);
    } else if (pick < rack_share + 0.2) {
      x = Vec3(lo.x() + ext.x() * unit(rng), lo.y() + ext.y() * unit(rng), lo.z());
    } else {
      const int w = std::min(int(unit(rng) * 4), 3);
      const double len = w < 2 ? ext.y() : ext.x();
      const double s = unit(rng) * len;
      if (s >= holes[w].first && s < holes[w].second) continue;
      const double z = lo.z() + ext.z() * (0.05 + 0.9 * unit(rng));
      switch (w) {
        case 0: x = Vec3(lo.x(), lo.y() + s, z); break;
        case 1: x = Vec3(hi.x(), lo.y() + s, z); break;
        case 2: x = Vec3(lo.x() + s, lo.y(), z); break;
        default: x = Vec3(lo.x() + s, hi.y(), z); break;
      }
    }
    scene.landmarks.push_back(x);
  }
  return scene;
}

DepthProxy DepthProxy::box(const Vec3& lo, const Vec3& hi) {
  DepthProxy proxy;
  for (int axis = 0; axis < 3; ++axis) {
    Vec3 n = Vec3::Zero();
    n[axis] = 1.0;
    proxy.planes.push_back({n, lo[axis]});
    proxy.planes.push_back({n, hi[axis]});
  }
  return proxy;
}

double DepthProxy::intersect(const Vec3& origin, const Vec3& direction) const {
  double best = -1.0;
  for (const auto& plane : planes) {
    const double denom = plane.normal.dot(direction);
    if (std::abs(denom) < 1e-12) continue;
    const double t = (plane.offset - plane.normal.dot(origin)) / denom;
    if (t > 1e-9 && (best < 0.0 || t < best)) best = t;
  }
  return best;
}

Pose look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(Vec3::UnitZ());
  if (x.norm() < 1e-9) x = Vec3::UnitX();
  x.normalize();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r << x, y, z;
  return Pose{eye, canonicalize(Quat(r))};
}

PoseStream generate_trajectory(const MotionProfile& profile, const SceneSpec& scene, double duration_s,
                               double rate_hz, std::uint64_t seed) {
  profile.validate();
  scene.validate();
  require(duration_s > 0.0 && rate_hz > 0.0, "generate_trajectory: duration and rate must be positive");
  const int n = std::max(1, int(std::lround(duration_s * rate_hz)));
  const double dt = 1.0 / rate_hz;
  const double step_max = profile.speed_max * dt;
  const double yaw_step_max = profile.yaw_rate_max * kDeg * dt;

  Rng rng(mix_seed(seed, 0x7a1));
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double margin = std::min(1.5, 0.25 * std::min(scene.box_max.x() - scene.box_min.x(),
                                                      scene.box_max.y() - scene.box_min.y()));
  const Vec2 lo(scene.box_min.x() + margin, scene.box_min.y() + margin);
  const Vec2 hi(scene.box_max.x() - margin, scene.box_max.y() - margin);
  const Vec2 centre = 0.5 * (lo + hi);
  const double z0 = std::clamp(scene.box_min.z() + profile.camera_height, scene.box_min.z(), scene.box_max.z());

  Vec2 pos(lo.x() + (0.25 + 0.5 * unit(rng)) * (hi.x() - lo.x()), lo.y() + (0.25 + 0.5 * unit(rng)) * (hi.y() - lo.y()));
  double yaw = (2 * unit(rng) - 1) * std::numbers::pi;
  double speed = profile.speed_min + unit(rng) * (profile.speed_max - profile.speed_min);
  double yaw_rate = 0.0;
  Vec3 jitter_p = Vec3::Zero();
  Vec3 jitter_r = Vec3::Zero();

  // First-order smoothing of the random processes (time constant ~1 s).
  const double alpha = std::min(1.0, dt);
  const double noise_gain = std::sqrt(alpha * (2.0 - alpha));
  const double lookahead = std::max(1.0, 3.0 * profile.speed_max);

  PoseStream out;
  Vec3 last_p;
  for (int i = 0; i < n; ++i) {
    if (i > 0) {
      const Vec2 heading(std::cos(yaw), std::sin(yaw));
      const Vec2 ahead = pos + lookahead * heading;
      double target_rate = (1 - alpha) * yaw_rate + noise_gain * 0.5 * profile.yaw_rate_max * kDeg * gauss(rng);
      if ((ahead.array() < lo.array()).any() || (ahead.array() > hi.array()).any()) {
        const Vec2 to_centre = centre - pos;
        const double want = std::atan2(to_centre.y(), to_centre.x());
        target_rate = (wrap_angle(want - yaw) >= 0 ? 1.0 : -1.0) * profile.yaw_rate_max * kDeg;
      }
      yaw_rate = std::clamp(target_rate, -profile.yaw_rate_max * kDeg, profile.yaw_rate_max * kDeg);
      yaw = wrap_angle(yaw + std::clamp(yaw_rate * dt, -yaw_step_max, yaw_step_max));

      const double mid = 0.5 * (profile.speed_min + profile.speed_max);
      const double spread = 0.5 * (profile.speed_max - profile.speed_min);
      speed = std::clamp(speed + alpha * (mid - speed) + noise_gain * 0.5 * spread * gauss(rng), profile.speed_min,
                         profile.speed_max);
      pos += speed * dt * Vec2(std::cos(yaw), std::sin(yaw));
      pos = pos.cwiseMax(lo).cwiseMin(hi);

      for (int k = 0; k < 3; ++k) {
        jitter_p[k] = (1 - alpha) * jitter_p[k] + noise_gain * profile.jitter_pos * gauss(rng);
        jitter_r[k] = (1 - alpha) * jitter_r[k] + noise_gain * profile.jitter_rot * kDeg * gauss(rng);
      }
    }
    Vec3 p(pos.x() + jitter_p.x(), pos.y() + jitter_p.y(), z0 + jitter_p.z());
    if (i > 0) {
      const Vec3 d = p - last_p;
      if (d.norm() > step_max) p = last_p + d * (step_max / d.norm());
    }
    last_p = p;
    // Pitch (camera x) after roll (camera z) leaves the heading untouched.
    const Quat tilt = rotation_exp(Vec3(jitter_r.x(), 0.0, 0.0)) * rotation_exp(Vec3(0.0, 0.0, jitter_r.z()));
    out.times.push_back(i * dt);
    out.poses.push_back(Pose{p, canonicalize(heading_rotation(yaw) * tilt)});
  }
  return out;
}

std::vector<Observation> project_landmarks(std::span<const Vec3> landmarks, const Pose& camera,
                                           const Intrinsics& intrinsics, ImageSize size) {
  intrinsics.validate();
  const Mat3 rt = camera.rotation().transpose();
  std::vector<Observation> out;
  for (std::size_t i = 0; i < landmarks.size(); ++i) {
    const Vec3 xc = rt * (landmarks[i] - camera.p);
    if (xc.z() <= 1e-6) continue;
    const Vec2 px = intrinsics.project(xc);
    if (!in_frame(px, size)) continue;
    out.push_back({int(i), px});
  }
  return out;
}

namespace {

Vec2 noisy_pixel(const Vec2& px, double sigma, std::uint64_t seed, int image, int landmark) {
  if (sigma == 0.0) return px;
  Rng rng(mix_seed(seed, 0x0b5, std::uint64_t(image), std::uint64_t(landmark)));
  std::normal_distribution<double> g(0.0, sigma);
  const double dx = g(rng);
  const double dy = g(rng);
  return px + Vec2(dx, dy);
}

void check_noise(const MatchNoise& noise) {
  require(noise.sigma_px >= 0.0, "match noise: sigma must be >= 0");
  require(noise.outlier_rate >= 0.0 && noise.outlier_rate <= 1.0, "match noise: outlier rate must be in [0, 1]");
}

}  // namespace

std::vector<Match> synth_matches(std::span<const Vec3> landmarks, int img_a, const Pose& a, int img_b, const Pose& b,
                                 const Intrinsics& intrinsics, const MatchNoise& noise, std::uint64_t seed,
                                 ImageSize size) {
  check_noise(noise);
  require(img_a != img_b, "synth_matches: image ids must differ");
  const auto va = project_landmarks(landmarks, a, intrinsics, size);
  const auto vb = project_landmarks(landmarks, b, intrinsics, size);
  std::vector<int> in_b(landmarks.size(), -1);
  for (std::size_t k = 0; k < vb.size(); ++k) in_b[vb[k].landmark] = int(k);

  std::vector<Match> out;
  for (const auto& oa : va) {
    const int kb = in_b[oa.landmark];
    if (kb < 0) continue;
    Match m;
    m.img_a = img_a;
    m.img_b = img_b;
    m.xa = noisy_pixel(oa.pixel, noise.sigma_px, seed, img_a, oa.landmark);
    m.xb = noisy_pixel(vb[kb].pixel, noise.sigma_px, seed, img_b, oa.landmark);
    m.label = oa.landmark;
    if (noise.outlier_rate > 0.0) {
      Rng rng(mix_seed(seed, 0x0a7, std::uint64_t(img_a) << 32 | std::uint32_t(img_b), std::uint64_t(oa.landmark)));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      if (unit(rng) < noise.outlier_rate) {
        m.xb = Vec2(unit(rng) * (size.width - 1), unit(rng) * (size.height - 1));
        m.label = -1;
      }
    }
    out.push_back(m);
  }
  return out;
}

std::vector<Correspondence> synth_correspondences(std::span<const Vec3> landmarks, const Pose& camera,
                                                  const Intrinsics& intrinsics, const MatchNoise& noise,
                                                  std::uint64_t seed, ImageSize size) {
  check_noise(noise);
  std::vector<Correspondence> out;
  Rng rng(mix_seed(seed, 0xc0e));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  for (const auto& o : project_landmarks(landmarks, camera, intrinsics, size)) {
    Correspondence c;
    c.point = landmarks[o.landmark];
    c.pixel = o.pixel + noise.sigma_px * Vec2(g(rng), g(rng));
    c.label = o.landmark;
    if (unit(rng) < noise.outlier_rate) {
      c.pixel = Vec2(unit(rng) * (size.width - 1), unit(rng) * (size.height - 1));
      c.label = -1;
    }
    out.push_back(c);
  }
  return out;
}

FlowField synth_flow(const DepthProxy& proxy, const Pose& a, const Pose& b, const Intrinsics& intrinsics,
                     ImageSize size) {
  intrinsics.validate();
  require(size.width > 0 && size.height > 0, "synth_flow: empty frame");
  FlowField f(size.width, size.height);
  f.low_confidence.assign(f.u.size(), 0);
  const Mat3 ra = a.rotation();
  const Mat3 rbt = b.rotation().transpose();
  for (int y = 0; y < size.height; ++y) {
    for (int x = 0; x < size.width; ++x) {
      const std::size_t i = f.index(x, y);
      const Vec2 px(x, y);
      const Vec3 ray = ra * intrinsics.unproject(px);
      const double t = proxy.intersect(a.p, ray);
      if (t <= 0.0) {
        f.low_confidence[i] = 1;
        continue;
      }
      const Vec3 xb = rbt * (a.p + t * ray - b.p);
      Vec2 target = px;
      if (xb.z() > 1e-9) target = intrinsics.project(xb);
      if (xb.z() <= 1e-9 || !in_frame(target, size)) {
        f.low_confidence[i] = 1;
        target = target.cwiseMax(Vec2::Zero()).cwiseMin(Vec2(size.width - 1, size.height - 1));
      }
      f.u[i] = target.x() - px.x();
      f.v[i] = target.y() - px.y();
    }
  }
  return f;
}

SolidTexture SolidTexture::random(std::uint64_t seed, double min_wavelength, double max_wavelength, int waves) {
  require(min_wavelength > 0.0 && max_wavelength >= min_wavelength, "texture: bad wavelength range");
  require(waves >= 1, "texture: need at least one wave");
  Rng rng(mix_seed(seed, 0x7e7));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> g;
  SolidTexture tex;
  for (int i = 0; i < waves; ++i) {
    const double wavelength = min_wavelength + unit(rng) * (max_wavelength - min_wavelength);
    const Vec3 dir = Vec3(g(rng), g(rng), g(rng)).normalized();
    tex.waves.push_back({dir * (2 * std::numbers::pi / wavelength), 2 * std::numbers::pi * unit(rng),
                         0.5 + 0.5 * unit(rng)});
  }
  return tex;
}

double SolidTexture::operator()(const Vec3& x) const {
  double s = 0.0;
  for (const auto& w : waves) s += w.amplitude * std::sin(w.k.dot(x) + w.phase);
  return std::clamp(0.5 + contrast * s, 0.0, 1.0);
}

Image render_view(const SolidTexture& texture, const DepthProxy& proxy, const Pose& camera,
                  const Intrinsics& intrinsics, ImageSize size) {
  intrinsics.validate();
  Image img(size.width, size.height, 0.5);
  const Mat3 r = camera.rotation();
  for (int y = 0; y < size.height; ++y) {
    for (int x = 0; x < size.width; ++x) {
      const Vec3 ray = r * intrinsics.unproject(Vec2(x, y));
      const double t = proxy.intersect(camera.p, ray);
      if (t > 0.0) img.at(x, y) = texture(camera.p + t * ray);
    }
  }
  return img;
}

DegradedStream degrade_absolute(const PoseStream& gt, const Degradation& d, std::uint64_t seed) {
  require(d.sigma_p >= 0.0 && d.sigma_q_deg >= 0.0 && d.outlier_magnitude >= 0.0, "degrade: noise must be >= 0");
  require(d.outlier_rate >= 0.0 && d.outlier_rate <= 1.0, "degrade: outlier rate must be in [0, 1]");
  DegradedStream out;
  out.stream = gt;
  out.outlier.assign(gt.size(), 0);
  Rng rng(mix_seed(seed, 0xde9));
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    // Draw every variate regardless of the settings so the streams for
    // different noise levels stay aligned.
    const Vec3 np(g(rng), g(rng), g(rng));
    const Vec3 nq(g(rng), g(rng), g(rng));
    const double u = unit(rng);
    const Vec3 dir = Vec3(g(rng), g(rng), g(rng)).normalized();
    Pose& p = out.stream.poses[i];
    p.p += d.sigma_p * np;
    if (d.sigma_q_deg > 0.0) p.q = canonicalize(p.q * rotation_exp(d.sigma_q_deg * kDeg * nq));
    if (u < d.outlier_rate) {
      p.p += d.outlier_magnitude * dir;
      out.outlier[i] = 1;
    }
  }
  return out;
}

SfmScenario make_sfm_scenario(int n_cameras, int n_landmarks, int n_queries, std::uint64_t seed) {
  require(n_cameras >= 2, "sfm scenario: need at least 2 cameras");
  require(n_landmarks >= 8, "sfm scenario: need at least 8 landmarks");
  require(n_queries >= 0, "sfm scenario: query count must be >= 0");
  Rng rng(mix_seed(seed, 0x5f3));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SfmScenario s;
  // Landmarks fill a 6 x 3 x 4 m volume centred on the origin (z up).
  for (int i = 0; i < n_landmarks; ++i) {
    s.landmarks.emplace_back(6.0 * (unit(rng) - 0.5), 3.0 * (unit(rng) - 0.5), 4.0 * (unit(rng) - 0.5));
  }
  // Cameras on a 60 degree arc of radius 9 m around the volume.
  const double radius = 9.0;
  const double span = 60.0 * kDeg;
  auto arc_pose = [&](double frac) {
    const double ang = -std::numbers::pi / 2 + (frac - 0.5) * span;
    const Vec3 eye(radius * std::cos(ang), radius * std::sin(ang), 0.5 * (unit(rng) - 0.5));
    const Vec3 target(0.5 * (unit(rng) - 0.5), 0.5 * (unit(rng) - 0.5), 0.5 * (unit(rng) - 0.5));
    return look_at(eye, target);
  };
  for (int c = 0; c < n_cameras; ++c) s.cameras.push_back(arc_pose(double(c) / (n_cameras - 1)));
  for (int q = 0; q < n_queries; ++q) s.queries.push_back(arc_pose(0.1 + 0.8 * unit(rng)));
  return s;
}

std::vector<Match> scenario_matches(const SfmScenario& scenario, const MatchNoise& noise, std::uint64_t seed) {
  std::vector<Match> out;
  const int n = int(scenario.cameras.size());
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      auto m = synth_matches(scenario.landmarks, a, scenario.cameras[a], b, scenario.cameras[b], scenario.intrinsics,
                             noise, seed);
      out.insert(out.end(), m.begin(), m.end());
    }
  }
  return out;
}

}  // namespace locfuse::sim
