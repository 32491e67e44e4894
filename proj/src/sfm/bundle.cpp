#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

#include <Eigen/Dense>

#include "locfuse/error.hpp"
#include "locfuse/sfm.hpp"
#include "projection.hpp"

namespace locfuse::sfm {

namespace {

using Mat6 = Eigen::Matrix<double, 6, 6>;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat63 = Eigen::Matrix<double, 6, 3>;

struct Obs {
  int cam;
  int lm;
  Vec2 pixel;
  int track;
  int index;
  bool active = true;
};

// Residuals below this never count as outliers; keeps exact data intact.
constexpr double kExclusionFloorPx = 1e-3;

struct Problem {
  std::vector<Pose> poses;
  std::vector<Vec3> points;
  std::vector<Obs> obs;
  std::vector<std::vector<int>> obs_of_lm;
  std::vector<std::array<bool, 6>> free;
  const Intrinsics* k = nullptr;

  double cost(const std::vector<Pose>& ps, const std::vector<Vec3>& xs) const {
    std::vector<Mat3> rt(ps.size());
    for (std::size_t c = 0; c < ps.size(); ++c) rt[c] = ps[c].rotation().transpose();
    double s = 0.0;
    for (const auto& o : obs) {
      if (!o.active) continue;
      const auto pr = detail::project(rt[o.cam], ps[o.cam].p, *k, xs[o.lm], o.pixel, false);
      if (!pr.valid) return INFINITY;
      s += pr.residual.squaredNorm();
    }
    return s;
  }

  int active_count() const {
    return int(std::count_if(obs.begin(), obs.end(), [](const Obs& o) { return o.active; }));
  }
};

void check_constraints(const Problem& pb, BaStage stage) {
  std::vector<int> per_cam(pb.poses.size(), 0), per_lm(pb.points.size(), 0);
  for (const auto& o : pb.obs) {
    if (!o.active) continue;
    ++per_cam[o.cam];
    ++per_lm[o.lm];
  }
  const int need = stage == BaStage::kFinal ? 3 : 2;
  for (std::size_t c = 1; c < per_cam.size(); ++c) {
    if (per_cam[c] < need) {
      fail(ErrorCode::kUnderConstrained,
           "bundle adjustment: camera " + std::to_string(c) + " has " + std::to_string(per_cam[c]) + " observations");
    }
  }
  for (std::size_t l = 0; l < per_lm.size(); ++l) {
    if (per_lm[l] < 2) {
      fail(ErrorCode::kUnderConstrained, "bundle adjustment: a landmark has fewer than two observations");
    }
  }
}

}  // namespace

BaResult bundle_adjust(PointCloud& cloud, std::span<const FeatureTrack> tracks, BaStage stage, const BaOptions& opt) {
  cloud.intrinsics.validate();
  require(opt.max_iterations >= 0 && opt.lambda0 > 0.0, "bundle adjustment: bad options");
  if (cloud.cameras.size() < 2) fail(ErrorCode::kUnderConstrained, "bundle adjustment: need at least two cameras");

  Problem pb;
  pb.k = &cloud.intrinsics;
  std::map<int, int> cam_of;
  for (std::size_t c = 0; c < cloud.cameras.size(); ++c) {
    cam_of[cloud.cameras[c].image] = int(c);
    pb.poses.push_back(cloud.cameras[c].pose);
  }
  std::map<int, int> lm_of;
  std::vector<int> lm_ids;
  for (int t = 0; t < int(tracks.size()); ++t) {
    const auto it = cloud.landmarks.find(tracks[t].landmark);
    if (it == cloud.landmarks.end()) continue;
    for (int o = 0; o < int(tracks[t].observations.size()); ++o) {
      const auto& ob = tracks[t].observations[o];
      const auto ci = cam_of.find(ob.image);
      if (ci == cam_of.end()) continue;
      auto [li, fresh] = lm_of.try_emplace(tracks[t].landmark, int(pb.points.size()));
      if (fresh) {
        pb.points.push_back(it->second);
        lm_ids.push_back(tracks[t].landmark);
      }
      pb.obs.push_back({ci->second, li->second, ob.pixel, t, o});
    }
  }

  BaResult res;
  // Observations behind their camera cannot be linearized; they start excluded.
  for (auto& o : pb.obs) {
    if (!detail::project(pb.poses[o.cam].rotation().transpose(), pb.poses[o.cam].p, cloud.intrinsics,
                         pb.points[o.lm], o.pixel, false)
             .valid) {
      o.active = false;
      res.excluded.emplace_back(o.track, o.index);
    }
  }
  check_constraints(pb, stage);

  // Gauge: camera 0 frozen, camera 1 keeps its dominant offset axis.
  pb.free.assign(pb.poses.size(), {true, true, true, true, true, true});
  pb.free[0].fill(false);
  const Vec3 base = pb.poses[1].p - pb.poses[0].p;
  if (!(base.norm() > 0.0)) fail(ErrorCode::kUnderConstrained, "bundle adjustment: zero gauge baseline");
  int axis = 0;
  base.cwiseAbs().maxCoeff(&axis);
  pb.free[1][axis] = false;
  if (stage == BaStage::kRotationsFixed) {
    for (auto& f : pb.free) f[3] = f[4] = f[5] = false;
  }

  pb.obs_of_lm.assign(pb.points.size(), {});
  for (int i = 0; i < int(pb.obs.size()); ++i) pb.obs_of_lm[pb.obs[i].lm].push_back(i);

  const int nc = int(pb.poses.size());
  const int nl = int(pb.points.size());
  double cost = pb.cost(pb.poses, pb.points);
  if (!std::isfinite(cost)) fail(ErrorCode::kDiverged, "bundle adjustment: non-finite initial cost");
  res.accepted_costs.push_back(cost);
  res.initial_rms_px = std::sqrt(cost / std::max(1, pb.active_count()));

  double lambda = opt.lambda0;
  int rounds = 0;
  while (true) {
    bool converged = false;
    while (!converged && res.iterations < opt.max_iterations) {
      if (cost <= 1e-20) {
        converged = true;
        break;
      }
      // Linearize.
      std::vector<Mat6> u(nc, Mat6::Zero());
      std::vector<Vec6> gc(nc, Vec6::Zero());
      std::vector<Mat3> v(nl, Mat3::Zero());
      std::vector<Vec3> gl(nl, Vec3::Zero());
      std::vector<Mat63> w(pb.obs.size(), Mat63::Zero());
      std::vector<Mat3> rt(nc);
      for (int c = 0; c < nc; ++c) rt[c] = pb.poses[c].rotation().transpose();
      for (std::size_t i = 0; i < pb.obs.size(); ++i) {
        const auto& o = pb.obs[i];
        if (!o.active) continue;
        const auto pr = detail::project(rt[o.cam], pb.poses[o.cam].p, cloud.intrinsics, pb.points[o.lm], o.pixel);
        Eigen::Matrix<double, 2, 6> jc;
        jc << pr.d_position, pr.d_rotation;
        for (int j = 0; j < 6; ++j)
          if (!pb.free[o.cam][j]) jc.col(j).setZero();
        u[o.cam] += jc.transpose() * jc;
        gc[o.cam] += jc.transpose() * pr.residual;
        v[o.lm] += pr.d_point.transpose() * pr.d_point;
        gl[o.lm] += pr.d_point.transpose() * pr.residual;
        w[i] = jc.transpose() * pr.d_point;
      }

      bool accepted = false;
      while (!accepted && res.iterations < opt.max_iterations) {
        ++res.iterations;
        Eigen::MatrixXd s = Eigen::MatrixXd::Zero(6 * nc, 6 * nc);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(6 * nc);
        for (int c = 0; c < nc; ++c) {
          Mat6 uc = u[c];
          for (int j = 0; j < 6; ++j) uc(j, j) = pb.free[c][j] ? uc(j, j) * (1.0 + lambda) : 1.0;
          s.block<6, 6>(6 * c, 6 * c) += uc;
          rhs.segment<6>(6 * c) -= gc[c];
        }
        std::vector<Mat3> vinv(nl);
        for (int l = 0; l < nl; ++l) {
          Mat3 vd = v[l];
          vd.diagonal() *= 1.0 + lambda;
          vinv[l] = vd.inverse();
          const auto& ol = pb.obs_of_lm[l];
          for (int i : ol) {
            if (!pb.obs[i].active) continue;
            const Mat63 wv = w[i] * vinv[l];
            rhs.segment<6>(6 * pb.obs[i].cam) += wv * gl[l];
            for (int j : ol) {
              if (!pb.obs[j].active) continue;
              s.block<6, 6>(6 * pb.obs[i].cam, 6 * pb.obs[j].cam) -= wv * w[j].transpose();
            }
          }
        }
        const Eigen::VectorXd dc = s.ldlt().solve(rhs);
        if (!dc.allFinite()) {
          lambda *= 10.0;
          continue;
        }
        std::vector<Pose> poses = pb.poses;
        for (int c = 0; c < nc; ++c) {
          poses[c].p += dc.segment<3>(6 * c);
          if (stage == BaStage::kFinal && c > 0) detail::apply_rotation_step(poses[c], dc.segment<3>(6 * c + 3));
        }
        std::vector<Vec3> points = pb.points;
        double step_max = dc.cwiseAbs().maxCoeff();
        for (int l = 0; l < nl; ++l) {
          Vec3 b = -gl[l];
          for (int i : pb.obs_of_lm[l]) {
            if (pb.obs[i].active) b -= w[i].transpose() * dc.segment<6>(6 * pb.obs[i].cam);
          }
          const Vec3 dl = vinv[l] * b;
          points[l] += dl;
          step_max = std::max(step_max, dl.cwiseAbs().maxCoeff());
        }
        const double cand = pb.cost(poses, points);
        if (cand < cost) {
          const double gain = cost - cand;
          pb.poses = std::move(poses);
          pb.points = std::move(points);
          cost = cand;
          res.accepted_costs.push_back(cost);
          lambda = std::max(lambda / 10.0, 1e-15);
          accepted = true;
          if (gain <= 1e-12 * (cost + gain) || step_max < 1e-13) converged = true;
        } else {
          lambda *= 10.0;
          if (lambda > 1e16) {
            converged = true;
            break;
          }
        }
      }
    }
    res.converged = converged;
    if (!converged || opt.std_factor <= 0.0 || rounds >= opt.exclusion_rounds) break;
    ++rounds;

    // Residual exclusion: drop the worst observations beyond std_factor sigma.
    std::vector<std::pair<double, int>> norms;
    for (int i = 0; i < int(pb.obs.size()); ++i) {
      const auto& o = pb.obs[i];
      if (!o.active) continue;
      const auto pr = detail::project(pb.poses[o.cam].rotation().transpose(), pb.poses[o.cam].p, cloud.intrinsics,
                                      pb.points[o.lm], o.pixel, false);
      norms.emplace_back(pr.residual.norm(), i);
    }
    // Per-axis sigma from the median residual norm (Rayleigh median is
    // sigma * sqrt(2 ln 2)); the plain RMS shrinks with every trim and
    // cascades.
    std::vector<double> mags;
    for (const auto& n : norms) mags.push_back(n.first);
    const double sigma = mags.empty() ? 0.0 : median(mags) / std::sqrt(2.0 * std::numbers::ln2);
    const double thr = std::max(opt.std_factor * sigma, kExclusionFloorPx);
    std::sort(norms.begin(), norms.end(), [](auto& a, auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    std::vector<int> per_cam(nc, 0), per_lm(nl, 0);
    for (const auto& o : pb.obs) {
      if (!o.active) continue;
      ++per_cam[o.cam];
      ++per_lm[o.lm];
    }
    const int cam_min = stage == BaStage::kFinal ? 3 : 2;
    int dropped = 0;
    for (const auto& [r, i] : norms) {
      if (r <= thr) break;
      auto& o = pb.obs[i];
      if (per_lm[o.lm] <= 2 || (o.cam > 0 && per_cam[o.cam] <= cam_min)) continue;
      o.active = false;
      --per_lm[o.lm];
      --per_cam[o.cam];
      res.excluded.emplace_back(o.track, o.index);
      ++dropped;
    }
    if (dropped == 0) break;
    cost = pb.cost(pb.poses, pb.points);
    res.accepted_costs.push_back(cost);
  }

  res.rms_px = std::sqrt(cost / std::max(1, pb.active_count()));
  for (int c = 0; c < nc; ++c) {
    cloud.cameras[c].pose.p = pb.poses[c].p;
    if (stage == BaStage::kFinal) cloud.cameras[c].pose.q = canonicalize(pb.poses[c].q);
  }
  for (int l = 0; l < nl; ++l) cloud.landmarks[lm_ids[l]] = pb.points[l];
  return res;
}

ResidualStats residual_stats(const PointCloud& cloud, std::span<const FeatureTrack> tracks) {
  ResidualStats st;
  double sum = 0.0;
  for (const auto& t : tracks) {
    const auto it = cloud.landmarks.find(t.landmark);
    if (it == cloud.landmarks.end()) continue;
    for (const auto& o : t.observations) {
      const Pose* p = cloud.camera(o.image);
      if (!p) continue;
      const auto r = reprojection_residual(*p, cloud.intrinsics, it->second, o.pixel);
      const double e = r ? r->norm() : 1e9;
      sum += e;
      st.max_px = std::max(st.max_px, e);
      ++st.count;
    }
  }
  if (st.count) st.mean_px = sum / st.count;
  return st;
}

}  // namespace locfuse::sfm
