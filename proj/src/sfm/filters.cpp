#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "locfuse/error.hpp"
#include "locfuse/sfm.hpp"

namespace locfuse::sfm {

void SfmConfig::validate() const {
  require(sc >= 0.0, "sfm config: sc must be >= 0");
  require(oc >= 0.0 && oc <= 100.0, "sfm config: oc must be in [0, 100]");
  require(mm >= 2, "sfm config: mm must be >= 2");
  require(ex > 0.0, "sfm config: ex must be > 0");
  require(ex_init >= 0.0 && ex_register >= 0.0, "sfm config: ex_init and ex_register must be >= 0");
  require(std > 0.0, "sfm config: std must be > 0");
}

const Pose* PointCloud::camera(int image) const {
  for (const auto& c : cameras) {
    if (c.image == image) return &c.pose;
  }
  return nullptr;
}

std::vector<Match> spatial_consistency_filter(std::span<const Match> matches, double sc) {
  require(sc >= 0.0, "spatial consistency: sc must be >= 0");
  if (sc == 0.0) return {matches.begin(), matches.end()};
  std::map<std::pair<int, int>, std::vector<std::size_t>> pairs;
  for (std::size_t i = 0; i < matches.size(); ++i) pairs[{matches[i].img_a, matches[i].img_b}].push_back(i);

  std::vector<std::uint8_t> keep(matches.size(), 1);
  const double r2 = sc * sc;
  for (const auto& [key, idx] : pairs) {
    for (std::size_t i : idx) {
      int near = 0, agree = 0;
      for (std::size_t j : idx) {
        if (j == i) continue;
        if ((matches[j].xa - matches[i].xa).squaredNorm() > r2) continue;
        ++near;
        if ((matches[j].xb - matches[i].xb).squaredNorm() <= r2) ++agree;
      }
      if (near > 0 && !(agree > 0.5 * near)) keep[i] = 0;
    }
  }
  std::vector<Match> out;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (keep[i]) out.push_back(matches[i]);
  }
  return out;
}

std::vector<Vec3> FloorGrid::points() const {
  require(spacing > 0.0 && x_max >= x_min && y_max >= y_min, "floor grid: bad extent");
  const int nx = int(std::floor((x_max - x_min) / spacing + 1e-9)) + 1;
  const int ny = int(std::floor((y_max - y_min) / spacing + 1e-9)) + 1;
  std::vector<Vec3> out;
  out.reserve(std::size_t(nx) * ny);
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) out.emplace_back(x_min + i * spacing, y_min + j * spacing, z);
  }
  return out;
}

std::vector<int> visible_floor_points(const Pose& camera, const Intrinsics& intrinsics, const FloorGrid& grid,
                                      ImageSize size) {
  const auto pts = grid.points();
  const Mat3 rt = camera.rotation().transpose();
  std::vector<int> out;
  for (int i = 0; i < int(pts.size()); ++i) {
    const Vec3 xc = rt * (pts[i] - camera.p);
    if (xc.z() <= 1e-6) continue;
    const Vec2 px = intrinsics.project(xc);
    if (px.x() >= 0 && px.x() <= size.width - 1 && px.y() >= 0 && px.y() <= size.height - 1) out.push_back(i);
  }
  return out;
}

double shared_floor_percent(const Pose& a, const Pose& b, const Intrinsics& intrinsics, const FloorGrid& grid,
                            ImageSize size) {
  const auto va = visible_floor_points(a, intrinsics, grid, size);
  const auto vb = visible_floor_points(b, intrinsics, grid, size);
  std::vector<int> both, either;
  std::set_intersection(va.begin(), va.end(), vb.begin(), vb.end(), std::back_inserter(both));
  std::set_union(va.begin(), va.end(), vb.begin(), vb.end(), std::back_inserter(either));
  if (either.empty()) return 0.0;
  return 100.0 * double(both.size()) / double(either.size());
}

std::vector<std::pair<int, int>> overlap_criterion(std::span<const Pose> poses, const Intrinsics& intrinsics,
                                                   const FloorGrid& grid, double oc, ImageSize size) {
  require(oc >= 0.0 && oc <= 100.0, "overlap criterion: oc must be in [0, 100]");
  std::vector<std::pair<int, int>> out;
  const int n = int(poses.size());
  if (oc == 0.0) {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) out.emplace_back(i, j);
    return out;
  }
  std::vector<std::vector<int>> vis;
  for (const auto& p : poses) vis.push_back(visible_floor_points(p, intrinsics, grid, size));
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      std::vector<int> both, either;
      std::set_intersection(vis[i].begin(), vis[i].end(), vis[j].begin(), vis[j].end(), std::back_inserter(both));
      std::set_union(vis[i].begin(), vis[i].end(), vis[j].begin(), vis[j].end(), std::back_inserter(either));
      const double pct = either.empty() ? 0.0 : 100.0 * double(both.size()) / double(either.size());
      if (pct >= oc) out.emplace_back(i, j);
    }
  }
  return out;
}

namespace {

double cluster_cost(std::span<const Vec2> pts, const std::vector<int>& label) {
  Vec2 sum[2] = {Vec2::Zero(), Vec2::Zero()};
  int cnt[2] = {0, 0};
  for (std::size_t i = 0; i < pts.size(); ++i) {
    sum[label[i]] += pts[i];
    ++cnt[label[i]];
  }
  double cost = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) cost += (pts[i] - sum[label[i]] / cnt[label[i]]).squaredNorm();
  return cost;
}

}  // namespace

std::vector<int> two_means(std::span<const Vec2> pts) {
  const int n = int(pts.size());
  require(n >= 2, "two_means: need at least two points");
  std::vector<int> best(n, 0), label(n, 0);
  if (n <= 16) {
    double best_cost = INFINITY;
    // Point 0 stays in cluster 0; every non-empty complement is tried.
    for (std::uint32_t mask = 1; mask < (1u << (n - 1)); ++mask) {
      for (int i = 1; i < n; ++i) label[i] = (mask >> (i - 1)) & 1u;
      const double c = cluster_cost(pts, label);
      if (c < best_cost) {
        best_cost = c;
        best = label;
      }
    }
    return best;
  }
  int fa = 0, fb = 1;
  double far = -1.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if ((pts[i] - pts[j]).squaredNorm() > far) {
        far = (pts[i] - pts[j]).squaredNorm();
        fa = i;
        fb = j;
      }
  Vec2 c0 = pts[fa], c1 = pts[fb];
  for (int it = 0; it < 100; ++it) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      const int l = (pts[i] - c1).squaredNorm() < (pts[i] - c0).squaredNorm() ? 1 : 0;
      changed |= l != label[i];
      label[i] = l;
    }
    Vec2 s[2] = {Vec2::Zero(), Vec2::Zero()};
    int cnt[2] = {0, 0};
    for (int i = 0; i < n; ++i) {
      s[label[i]] += pts[i];
      ++cnt[label[i]];
    }
    if (cnt[0] == 0 || cnt[1] == 0) break;
    c0 = s[0] / cnt[0];
    c1 = s[1] / cnt[1];
    if (!changed && it > 0) break;
  }
  if (label[0] == 1)
    for (auto& l : label) l = 1 - l;
  return label;
}

double residual_spread(std::span<const Vec2> r) {
  double d = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = i + 1; j < r.size(); ++j) d = std::max(d, (r[i] - r[j]).norm());
  return d;
}

std::vector<FeatureTrack> cluster_separation(const FeatureTrack& track, std::span<const Vec2> residuals, int mm,
                                             double ex, int& next_landmark_id) {
  require(residuals.size() == track.observations.size(), "cluster separation: one residual per observation");
  require(mm >= 2 && ex > 0.0, "cluster separation: mm >= 2 and ex > 0 required");
  if (track.observations.size() < 2 || residual_spread(residuals) <= ex) return {track};
  const auto label = two_means(residuals);
  FeatureTrack part[2];
  for (int k = 0; k < 2; ++k) {
    part[k].match_count = track.match_count;
    part[k].label = track.label;
  }
  for (std::size_t i = 0; i < label.size(); ++i) part[label[i]].observations.push_back(track.observations[i]);
  part[0].landmark = track.landmark;
  std::vector<FeatureTrack> out;
  if (int(part[0].observations.size()) >= mm) out.push_back(std::move(part[0]));
  if (int(part[1].observations.size()) >= mm) {
    part[1].landmark = next_landmark_id++;
    out.push_back(std::move(part[1]));
  }
  return out;
}

namespace {

struct Views {
  std::vector<Pose> poses;
  std::vector<Vec2> pixels;
  std::vector<int> index;  // observation index in the track
};

double mean_error(const Views& v, const Intrinsics& k, const Vec3& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.poses.size(); ++i) {
    const auto r = reprojection_residual(v.poses[i], k, x, v.pixels[i]);
    s += r ? r->norm() : 1e6;
  }
  return s / double(v.poses.size());
}

}  // namespace

GibbsResult gibbs_exclude(const PointCloud& cloud, const FeatureTrack& track, bool gibbs, int mm, double ex,
                          std::uint64_t seed) {
  GibbsResult res;
  res.track = track;
  const auto it = cloud.landmarks.find(track.landmark);
  if (it != cloud.landmarks.end()) res.point = it->second;
  if (!gibbs || int(track.observations.size()) < mm + 1) return res;

  Views v;
  for (std::size_t i = 0; i < track.observations.size(); ++i) {
    const Pose* p = cloud.camera(track.observations[i].image);
    if (!p) continue;
    v.poses.push_back(*p);
    v.pixels.push_back(track.observations[i].pixel);
    v.index.push_back(int(i));
  }
  if (int(v.poses.size()) < mm + 1) return res;

  Vec3 x = it != cloud.landmarks.end() ? it->second : triangulate(v.poses, v.pixels, cloud.intrinsics);
  x = refine_point(v.poses, v.pixels, cloud.intrinsics, x);
  double err = mean_error(v, cloud.intrinsics, x);
  std::mt19937_64 rng(seed);
  // Guards against removals that only win by round-off.
  constexpr double kMinGain = 1e-9;
  while (int(v.poses.size()) > mm) {
    std::vector<int> order(v.poses.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    bool removed = false;
    // Positions shift as entries go; track them by original observation index.
    std::vector<int> ids;
    for (int o : order) ids.push_back(v.index[o]);
    for (int id : ids) {
      if (int(v.poses.size()) <= mm) break;
      const auto pos = std::find(v.index.begin(), v.index.end(), id) - v.index.begin();
      Views c = v;
      c.poses.erase(c.poses.begin() + pos);
      c.pixels.erase(c.pixels.begin() + pos);
      c.index.erase(c.index.begin() + pos);
      const Vec3 xc = refine_point(c.poses, c.pixels, cloud.intrinsics, x);
      const double ec = mean_error(c, cloud.intrinsics, xc);
      const auto held_out = reprojection_residual(v.poses[pos], cloud.intrinsics, xc, v.pixels[pos]);
      const bool separated = !held_out || held_out->norm() >= ex;
      if (separated && ec < err - kMinGain) {
        v = std::move(c);
        x = xc;
        err = ec;
        removed = true;
        ++res.removed;
      }
    }
    if (!removed) break;
  }
  FeatureTrack out = track;
  out.observations.clear();
  for (std::size_t i = 0; i < track.observations.size(); ++i) {
    const bool registered = cloud.camera(track.observations[i].image) != nullptr;
    const bool kept = std::find(v.index.begin(), v.index.end(), int(i)) != v.index.end();
    if (!registered || kept) out.observations.push_back(track.observations[i]);
  }
  res.track = std::move(out);
  res.point = x;
  return res;
}

}  // namespace locfuse::sfm
