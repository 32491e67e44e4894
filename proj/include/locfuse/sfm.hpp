#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "locfuse/geometry.hpp"
#include "locfuse/matches.hpp"

namespace locfuse::sfm {

struct SfmConfig {
  double sc = 2.0;     // spatial-consistency neighbourhood, px; 0 disables
  double oc = 2.0;     // floor-grid overlap between a pair, percent
  int mm = 5;          // minimum observations for a split cluster
  double ex = 4.0;     // separation limit, px
  bool gibbs = false;  // leave-one-out observation exclusion
  double std = 3.0;    // BA residual exclusion, in standard deviations
  // Inlier limits for two-view initialization and camera registration, px.
  // 0 follows ex. Pinning them leaves ex acting on exclusion alone.
  double ex_init = 0.0;
  double ex_register = 0.0;

  double init_limit() const { return ex_init > 0.0 ? ex_init : ex; }
  double register_limit() const { return ex_register > 0.0 ? ex_register : ex; }
  void validate() const;
};

struct TrackObservation {
  int image = 0;
  Vec2 pixel = Vec2::Zero();
};

// Observations of one landmark, at most one per image. label carries the
// ground-truth landmark id when the source matches had one (diagnostics only).
struct FeatureTrack {
  int landmark = -1;
  std::vector<TrackObservation> observations;
  int match_count = 0;
  int label = -1;
};

struct CameraEntry {
  int image = 0;
  Pose pose;
};

// Cameras are ordered; the first two fix the bundle-adjustment gauge.
struct PointCloud {
  std::map<int, Vec3> landmarks;
  std::vector<CameraEntry> cameras;
  Intrinsics intrinsics = Intrinsics::reference();

  const Pose* camera(int image) const;
};

// --- match filtering ---

// Keeps a match when more than half of the other matches of its image pair
// within sc px of it in image A also land within sc px of its partner in
// image B. Matches without neighbours are kept.
std::vector<Match> spatial_consistency_filter(std::span<const Match> matches, double sc);

struct FloorGrid {
  double x_min = -3.0, x_max = 3.0;
  double y_min = -3.0, y_max = 3.0;
  double z = 0.0;
  double spacing = 0.25;

  std::vector<Vec3> points() const;
};

// Indices of grid points that project into the frame in front of the camera.
std::vector<int> visible_floor_points(const Pose& camera, const Intrinsics& intrinsics, const FloorGrid& grid,
                                      ImageSize size = {});

// |A and B| / |A or B| of visible grid points, in percent (0 when neither
// sees the floor).
double shared_floor_percent(const Pose& a, const Pose& b, const Intrinsics& intrinsics, const FloorGrid& grid,
                            ImageSize size = {});

// Image pairs (i < j, indices into poses) whose shared floor percentage is
// at least oc. oc = 0 admits every pair.
std::vector<std::pair<int, int>> overlap_criterion(std::span<const Pose> poses, const Intrinsics& intrinsics,
                                                   const FloorGrid& grid, double oc, ImageSize size = {});

// --- track cleaning ---

// Exact two-cluster k-means (minimum within-cluster sum of squares). Labels
// are 0/1 with the first point in cluster 0. Sets above 16 points fall back
// to Lloyd iterations seeded with the farthest pair.
std::vector<int> two_means(std::span<const Vec2> points);

// Largest pairwise distance between residual vectors.
double residual_spread(std::span<const Vec2> residuals);

// Splits the track by two_means on its residuals when their spread exceeds
// ex. The cluster holding the first observation keeps the landmark id, the
// other takes next_landmark_id (incremented). Clusters with fewer than mm
// observations are dropped, so the result holds 0, 1 or 2 tracks.
std::vector<FeatureTrack> cluster_separation(const FeatureTrack& track, std::span<const Vec2> residuals, int mm,
                                             double ex, int& next_landmark_id);

struct GibbsResult {
  FeatureTrack track;
  Vec3 point = Vec3::Zero();
  int removed = 0;
};

// Leave-one-out passes in a seeded order: an observation goes when refitting
// the landmark without it lowers the mean reprojection error of the rest and
// the refit misses the held-out pixel by at least ex. Stops after a pass
// without removals or at mm observations.
GibbsResult gibbs_exclude(const PointCloud& cloud, const FeatureTrack& track, bool gibbs, int mm, double ex,
                          std::uint64_t seed);

// --- geometry solvers ---

// Reprojection residual (projected minus observed), px. Empty when the point
// is not in front of the camera.
std::optional<Vec2> reprojection_residual(const Pose& camera, const Intrinsics& intrinsics, const Vec3& point,
                                          const Vec2& pixel);

// Linear multi-view triangulation followed by Gauss-Newton on pixel error.
// Needs at least two views; throws kUnderConstrained otherwise.
Vec3 triangulate(std::span<const Pose> cameras, std::span<const Vec2> pixels, const Intrinsics& intrinsics);

// Gauss-Newton refinement of a single landmark against fixed cameras.
Vec3 refine_point(std::span<const Pose> cameras, std::span<const Vec2> pixels, const Intrinsics& intrinsics, Vec3 x);

// Candidate camera poses from three 2D-3D correspondences (up to four).
std::vector<Pose> p3p(std::span<const Vec3> points, std::span<const Vec2> pixels, const Intrinsics& intrinsics);

struct LocalizeOptions {
  double threshold_px = 4.0;
  double confidence = 0.999;
  int max_iterations = 2000;
  double min_inlier_ratio = 0.25;
  std::uint64_t seed = 1;
};

struct LocalizeResult {
  Pose pose;
  int inliers = 0;
  double rms_px = 0.0;
};

// RANSAC over P3P minimal solves, then Levenberg-Marquardt on the inliers.
// Throws kLocalizationFailure below 4 correspondences or without consensus.
LocalizeResult localize(std::span<const Correspondence> correspondences, const Intrinsics& intrinsics,
                        const LocalizeOptions& options = {});
Pose localize_query(std::span<const Correspondence> correspondences, const Intrinsics& intrinsics,
                    const LocalizeOptions& options = {});

// Levenberg-Marquardt on a camera pose against fixed points.
Pose refine_pose(const Pose& pose, std::span<const Correspondence> correspondences, const Intrinsics& intrinsics);

// Relative pose of camera b w.r.t. camera a (a at the origin, |b.p| = 1) from
// the essential matrix, RANSAC over eight-point fits.
struct TwoViewResult {
  Pose b;
  std::vector<std::uint8_t> inlier;
};
TwoViewResult two_view_geometry(std::span<const Vec2> pixels_a, std::span<const Vec2> pixels_b,
                                const Intrinsics& intrinsics, double threshold_px, std::uint64_t seed);

// x_dst ~ scale * R * x_src + t.
struct Similarity {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return scale * rotation * x + translation; }
  Pose apply(const Pose& pose) const;
};

// Least-squares similarity (Umeyama). Needs three non-collinear points.
Similarity align_similarity(std::span<const Vec3> src, std::span<const Vec3> dst);
void transform_cloud(PointCloud& cloud, const Similarity& s);

// --- bundle adjustment ---

enum class BaStage { kRotationsFixed, kFinal };

struct BaOptions {
  double std_factor = 3.0;  // <= 0 disables residual exclusion
  int max_iterations = 100;
  double lambda0 = 1e-3;
  int exclusion_rounds = 3;
};

struct BaResult {
  double initial_rms_px = 0.0;
  double rms_px = 0.0;
  std::vector<double> accepted_costs;  // starts with the initial cost
  int iterations = 0;
  bool converged = false;
  // (track index, observation index) pairs weighted to zero.
  std::vector<std::pair<int, int>> excluded;
};

// Levenberg-Marquardt over landmarks, camera positions and (kFinal only)
// camera rotations with a Schur-complement solve. Camera 0 is frozen and the
// dominant axis of camera 1's offset from it is held, fixing scale.
BaResult bundle_adjust(PointCloud& cloud, std::span<const FeatureTrack> tracks, BaStage stage,
                       const BaOptions& options = {});

// Mean and max reprojection error over all track observations with a
// registered camera and landmark.
struct ResidualStats {
  double mean_px = 0.0;
  double max_px = 0.0;
  int count = 0;
};
ResidualStats residual_stats(const PointCloud& cloud, std::span<const FeatureTrack> tracks);

// --- pipeline ---

// Union-find over (image, pixel) nodes. When a component holds several
// nodes of one image only the one with the most matches is kept.
std::vector<FeatureTrack> build_tracks(std::span<const Match> matches);

struct ReconstructOptions {
  // Reference poses by image id: used by the overlap criterion and to move
  // the result into their frame. Without them oc must be 0.
  std::map<int, Pose> priors;
  FloorGrid floor;
  ImageSize image_size;
  std::uint64_t seed = 1;
  int max_rounds = 10;
};

struct Reconstruction {
  PointCloud cloud;
  std::vector<FeatureTrack> tracks;
  std::vector<BaResult> ba_runs;
  int matches_in = 0;
  int matches_kept = 0;
  int rounds = 0;
  int observations() const;
};

Reconstruction reconstruct(std::span<const Match> matches, const Intrinsics& intrinsics, const SfmConfig& config,
                           const ReconstructOptions& options = {});

// 2D-3D correspondences for a query from matches against registered images:
// img_a is a registered image whose pixel xa is looked up among the track
// observations, img_b the query with pixel xb.
std::vector<Correspondence> query_correspondences(const Reconstruction& rec, std::span<const Match> query_matches);

// --- files ---

// CSV sections "LANDMARKS" (id,x,y,z) and "CAMERAS" (id,px,py,pz,qw,qx,qy,qz).
void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_point_cloud(const std::filesystem::path& path, const Intrinsics& intrinsics = Intrinsics::reference());

// CSV landmark,image,x,y
void write_tracks(const std::filesystem::path& path, std::span<const FeatureTrack> tracks);
std::vector<FeatureTrack> read_tracks(const std::filesystem::path& path);

}  // namespace locfuse::sfm
