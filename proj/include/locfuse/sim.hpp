#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "locfuse/flow.hpp"
#include "locfuse/geometry.hpp"
#include "locfuse/matches.hpp"
#include "locfuse/pose_io.hpp"

namespace locfuse::sim {

enum class ProfileKind { kRobot, kHandheld };

struct MotionProfile {
  ProfileKind kind = ProfileKind::kRobot;
  double speed_min = 0.2;      // m/s
  double speed_max = 0.5;      // m/s
  double yaw_rate_max = 20.0;  // deg/s
  double jitter_pos = 0.002;   // m
  double jitter_rot = 0.2;     // deg
  double camera_height = 0.8;  // m above the floor

  static MotionProfile robot();
  static MotionProfile handheld();
  void validate() const;
};

struct SceneSpec {
  Vec3 box_min{14.0, 7.0, 0.0};
  Vec3 box_max{34.0, 23.0, 4.0};
  int landmark_count = 3000;
  int rack_count = 4;
  // Fraction of each wall's length left without landmarks.
  double hole_fraction = 0.15;

  void validate() const;
};

struct Scene {
  SceneSpec spec;
  std::vector<Vec3> landmarks;  // id = index
};

Scene make_scene(const SceneSpec& spec, std::uint64_t seed);

// Plane n.x = offset. A depth proxy is a set of planes; a ray takes the
// nearest forward hit.
struct Plane {
  Vec3 normal = Vec3::UnitZ();
  double offset = 0.0;
};

struct DepthProxy {
  std::vector<Plane> planes;

  static DepthProxy box(const Vec3& lo, const Vec3& hi);
  // Ray parameter of the nearest hit in front of origin; < 0 when none.
  double intersect(const Vec3& origin, const Vec3& direction) const;
};

// Camera pose at eye looking at target with the world z axis up.
Pose look_at(const Vec3& eye, const Vec3& target);

// Floor-plane trajectory inside the scene box: speed and yaw rate follow
// smooth seeded random processes within the profile, the path turns away
// from walls, and positional/rotational jitter rides on top. Every step
// moves at most speed_max / rate and turns the heading by at most
// yaw_rate_max / rate.
PoseStream generate_trajectory(const MotionProfile& profile, const SceneSpec& scene, double duration_s,
                               double rate_hz, std::uint64_t seed);

using ::locfuse::ImageSize;

struct Observation {
  int landmark = 0;
  Vec2 pixel = Vec2::Zero();
};

// Landmarks in front of the camera whose projection lands inside the frame.
std::vector<Observation> project_landmarks(std::span<const Vec3> landmarks, const Pose& camera,
                                           const Intrinsics& intrinsics, ImageSize size = {});

struct MatchNoise {
  double sigma_px = 0.0;
  double outlier_rate = 0.0;
};

// Matches for co-visible landmarks. The pixel noise of a landmark in an image
// depends only on (seed, image, landmark), so tracks agree across pairs. An
// outlier replaces xb with a uniform pixel and carries label -1.
std::vector<Match> synth_matches(std::span<const Vec3> landmarks, int img_a, const Pose& a, int img_b, const Pose& b,
                                 const Intrinsics& intrinsics, const MatchNoise& noise, std::uint64_t seed,
                                 ImageSize size = {});

// Noisy 2D-3D correspondences of a query camera against ground-truth points.
std::vector<Correspondence> synth_correspondences(std::span<const Vec3> landmarks, const Pose& camera,
                                                  const Intrinsics& intrinsics, const MatchNoise& noise,
                                                  std::uint64_t seed, ImageSize size = {});

// Analytic flow: each pixel of a is cast onto the proxy and reprojected into
// b. Targets outside the frame (or behind b) are clamped to the frame and
// marked low-confidence.
FlowField synth_flow(const DepthProxy& proxy, const Pose& a, const Pose& b, const Intrinsics& intrinsics,
                     ImageSize size = {});

// Band-limited solid texture evaluated on 3D surface points, in [0, 1].
struct SolidTexture {
  struct Wave {
    Vec3 k;
    double phase;
    double amplitude;
  };
  std::vector<Wave> waves;
  double contrast = 0.1;

  // Wavelengths drawn between min_wavelength and max_wavelength (meters).
  static SolidTexture random(std::uint64_t seed, double min_wavelength, double max_wavelength, int waves = 8);
  double operator()(const Vec3& x) const;
};

Image render_view(const SolidTexture& texture, const DepthProxy& proxy, const Pose& camera,
                  const Intrinsics& intrinsics, ImageSize size = {});

struct Degradation {
  double sigma_p = 0.0;          // m, per axis
  double sigma_q_deg = 0.0;      // deg, per rotation-vector axis
  double outlier_rate = 0.0;
  double outlier_magnitude = 0.0;  // m, along a random direction
};

struct DegradedStream {
  PoseStream stream;
  std::vector<std::uint8_t> outlier;
};

DegradedStream degrade_absolute(const PoseStream& gt, const Degradation& d, std::uint64_t seed);

// Compact scene for reconstruction tests: landmarks in a textured volume,
// registration cameras on an arc looking at it, and query cameras between
// them.
struct SfmScenario {
  std::vector<Vec3> landmarks;
  std::vector<Pose> cameras;
  std::vector<Pose> queries;
  Intrinsics intrinsics = Intrinsics::reference();
};

SfmScenario make_sfm_scenario(int n_cameras, int n_landmarks, int n_queries, std::uint64_t seed);

// Matches for every camera pair of a scenario.
std::vector<Match> scenario_matches(const SfmScenario& scenario, const MatchNoise& noise, std::uint64_t seed);

// splitmix64-based hash used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0, std::uint64_t d = 0);

}  // namespace locfuse::sim
