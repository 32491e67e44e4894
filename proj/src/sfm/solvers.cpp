#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <unsupported/Eigen/Polynomials>

#include "locfuse/error.hpp"
#include "locfuse/sfm.hpp"
#include "projection.hpp"

namespace locfuse::sfm {

using detail::project;

std::optional<Vec2> reprojection_residual(const Pose& camera, const Intrinsics& k, const Vec3& point,
                                          const Vec2& pixel) {
  const auto pr = project(camera.rotation().transpose(), camera.p, k, point, pixel, false);
  if (!pr.valid) return std::nullopt;
  return pr.residual;
}

Vec3 refine_point(std::span<const Pose> cameras, std::span<const Vec2> pixels, const Intrinsics& k, Vec3 x) {
  require(cameras.size() == pixels.size(), "refine_point: one pixel per camera");
  std::vector<Mat3> rt;
  for (const auto& c : cameras) rt.push_back(c.rotation().transpose());
  auto cost = [&](const Vec3& p) {
    double s = 0.0;
    for (std::size_t i = 0; i < cameras.size(); ++i) {
      const auto pr = project(rt[i], cameras[i].p, k, p, pixels[i], false);
      if (!pr.valid) return std::numeric_limits<double>::infinity();
      s += pr.residual.squaredNorm();
    }
    return s;
  };
  double c = cost(x);
  double lambda = 1e-6;
  for (int it = 0; it < 30 && std::isfinite(c) && c > 1e-28; ++it) {
    Mat3 h = Mat3::Zero();
    Vec3 g = Vec3::Zero();
    for (std::size_t i = 0; i < cameras.size(); ++i) {
      const auto pr = project(rt[i], cameras[i].p, k, x, pixels[i]);
      h += pr.d_point.transpose() * pr.d_point;
      g += pr.d_point.transpose() * pr.residual;
    }
    bool accepted = false;
    for (int tries = 0; tries < 10 && !accepted; ++tries) {
      Mat3 a = h;
      a.diagonal() *= 1.0 + lambda;
      const Vec3 step = a.ldlt().solve(-g);
      const Vec3 cand = x + step;
      const double cc = cost(cand);
      if (cc < c) {
        const bool tiny = step.norm() < 1e-15 * (1.0 + x.norm());
        x = cand;
        c = cc;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        if (tiny) return x;
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) break;
  }
  return x;
}

Vec3 triangulate(std::span<const Pose> cameras, std::span<const Vec2> pixels, const Intrinsics& k) {
  require(cameras.size() == pixels.size(), "triangulate: one pixel per camera");
  if (cameras.size() < 2) fail(ErrorCode::kUnderConstrained, "triangulate: need at least two views");
  Eigen::MatrixXd a(2 * cameras.size(), 4);
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    const Mat3 rt = cameras[i].rotation().transpose();
    Eigen::Matrix<double, 3, 4> p;
    p << rt, -rt * cameras[i].p;
    const Vec3 n = k.unproject(pixels[i]);
    a.row(2 * i) = n.x() * p.row(2) - p.row(0);
    a.row(2 * i + 1) = n.y() * p.row(2) - p.row(1);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::Vector4d v = svd.matrixV().col(3);
  if (std::abs(v(3)) < 1e-12 * v.head<3>().norm()) {
    fail(ErrorCode::kUnderConstrained, "triangulate: point at infinity");
  }
  return refine_point(cameras, pixels, k, v.head<3>() / v(3));
}

namespace {

// Rotation and translation with dst = r * src + t over three or more points.
std::pair<Mat3, Vec3> rigid_fit(std::span<const Vec3> src, std::span<const Vec3> dst) {
  Vec3 ms = Vec3::Zero(), md = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    ms += src[i];
    md += dst[i];
  }
  ms /= double(src.size());
  md /= double(src.size());
  Mat3 cov = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) cov += (dst[i] - md) * (src[i] - ms).transpose();
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) d(2, 2) = -1.0;
  const Mat3 r = svd.matrixU() * d * svd.matrixV().transpose();
  return {r, md - r * ms};
}

}  // namespace

std::vector<Pose> p3p(std::span<const Vec3> points, std::span<const Vec2> pixels, const Intrinsics& k) {
  require(points.size() == 3 && pixels.size() == 3, "p3p: exactly three correspondences");
  Vec3 j[3];
  for (int i = 0; i < 3; ++i) j[i] = k.unproject(pixels[i]).normalized();
  const double a2 = (points[1] - points[2]).squaredNorm();
  const double b2 = (points[0] - points[2]).squaredNorm();
  const double c2 = (points[0] - points[1]).squaredNorm();
  if (a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18) return {};
  const double ca = j[1].dot(j[2]), cb = j[0].dot(j[2]), cg = j[0].dot(j[1]);
  const double amc = (a2 - c2) / b2, apc = (a2 + c2) / b2;

  // Quartic in v = s3 / s1 (Grunert).
  Eigen::Matrix<double, 5, 1> poly;
  poly(4) = (amc - 1) * (amc - 1) - 4 * c2 / b2 * ca * ca;
  poly(3) = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca * ca * cb);
  poly(2) = 2 * (amc * amc - 1 + 2 * amc * amc * cb * cb + 2 * (b2 - c2) / b2 * ca * ca -
                 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg * cg);
  poly(1) = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg * cg * cb - (1 - apc) * ca * cg);
  poly(0) = (1 + amc) * (1 + amc) - 4 * a2 / b2 * cg * cg;
  if (!poly.allFinite() || std::abs(poly(4)) < 1e-14) return {};

  Eigen::PolynomialSolver<double, 4> solver(poly);
  std::vector<double> roots;
  solver.realRoots(roots, 1e-7);

  std::vector<Pose> out;
  for (double v : roots) {
    const double den = 2 * (cg - v * ca);
    if (std::abs(den) < 1e-14) continue;
    const double u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den;
    const double q = 1 + v * v - 2 * v * cb;
    if (!(q > 0) || u <= 0 || v <= 0) continue;
    const double s1 = std::sqrt(b2 / q);
    const Vec3 cam[3] = {s1 * j[0], u * s1 * j[1], v * s1 * j[2]};
    const auto [r, t] = rigid_fit(points, cam);  // camera = r * world + t
    Pose pose;
    pose.q = canonicalize(Quat(r.transpose()).normalized());
    pose.p = -r.transpose() * t;
    if (pose.p.allFinite()) out.push_back(pose);
  }
  return out;
}

namespace {

// Levenberg-Marquardt on one camera pose against fixed points.
Pose refine_subset(Pose pose, std::span<const Correspondence> cs, std::span<const int> use, const Intrinsics& k) {
  auto cost = [&](const Pose& p) {
    const Mat3 rt = p.rotation().transpose();
    double s = 0.0;
    for (int i : use) {
      const auto pr = project(rt, p.p, k, cs[i].point, cs[i].pixel, false);
      if (!pr.valid) return std::numeric_limits<double>::infinity();
      s += pr.residual.squaredNorm();
    }
    return s;
  };
  double c = cost(pose);
  double lambda = 1e-3;
  bool done = false;
  for (int it = 0; it < 100 && !done && std::isfinite(c) && c > 1e-26; ++it) {
    using Mat6 = Eigen::Matrix<double, 6, 6>;
    using Vec6 = Eigen::Matrix<double, 6, 1>;
    Mat6 h = Mat6::Zero();
    Vec6 g = Vec6::Zero();
    const Mat3 rt = pose.rotation().transpose();
    for (int i : use) {
      const auto pr = project(rt, pose.p, k, cs[i].point, cs[i].pixel);
      Eigen::Matrix<double, 2, 6> jac;
      jac << pr.d_position, pr.d_rotation;
      h += jac.transpose() * jac;
      g += jac.transpose() * pr.residual;
    }
    bool accepted = false;
    while (!accepted && lambda < 1e12) {
      Mat6 a = h;
      a.diagonal() *= 1.0 + lambda;
      const Vec6 step = a.ldlt().solve(-g);
      Pose cand = pose;
      cand.p += step.head<3>();
      detail::apply_rotation_step(cand, step.tail<3>());
      const double cc = cost(cand);
      if (cc < c) {
        const double gain = c - cc;
        pose = cand;
        c = cc;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        done = gain < 1e-14 * c || step.norm() < 1e-15;
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) break;
  }
  pose.q = canonicalize(pose.q);
  return pose;
}

std::vector<int> inliers_of(const Pose& pose, std::span<const Correspondence> cs, const Intrinsics& k, double thr,
                            double* sum_sq = nullptr) {
  const Mat3 rt = pose.rotation().transpose();
  std::vector<int> out;
  double s = 0.0;
  for (int i = 0; i < int(cs.size()); ++i) {
    const auto pr = project(rt, pose.p, k, cs[i].point, cs[i].pixel, false);
    if (pr.valid && pr.residual.norm() < thr) {
      out.push_back(i);
      s += pr.residual.squaredNorm();
    }
  }
  if (sum_sq) *sum_sq = s;
  return out;
}

}  // namespace

LocalizeResult localize(std::span<const Correspondence> cs, const Intrinsics& k, const LocalizeOptions& opt) {
  k.validate();
  require(opt.threshold_px > 0.0, "localize: threshold must be > 0");
  const int n = int(cs.size());
  if (n < 4) fail(ErrorCode::kLocalizationFailure, "localize: " + std::to_string(n) + " correspondences, need 4");

  std::mt19937_64 rng(opt.seed);
  std::vector<int> best;
  double best_sq = INFINITY;
  Pose best_pose;
  long needed = opt.max_iterations;
  std::vector<int> idx(n);
  for (long it = 0; it < std::min<long>(needed, opt.max_iterations); ++it) {
    std::iota(idx.begin(), idx.end(), 0);
    for (int s = 0; s < 3; ++s) {
      std::uniform_int_distribution<int> pick(s, n - 1);
      std::swap(idx[s], idx[pick(rng)]);
    }
    const Vec3 pts[3] = {cs[idx[0]].point, cs[idx[1]].point, cs[idx[2]].point};
    const Vec2 pxs[3] = {cs[idx[0]].pixel, cs[idx[1]].pixel, cs[idx[2]].pixel};
    for (const auto& cand : p3p(pts, pxs, k)) {
      double sq = 0.0;
      auto in = inliers_of(cand, cs, k, opt.threshold_px, &sq);
      if (in.size() > best.size() || (in.size() == best.size() && sq < best_sq)) {
        best = std::move(in);
        best_sq = sq;
        best_pose = cand;
        const double w = double(best.size()) / n;
        if (w >= 1.0) {
          needed = 0;
        } else {
          needed = long(std::ceil(std::log(1.0 - opt.confidence) / std::log(1.0 - w * w * w)));
        }
      }
    }
  }
  const int min_inliers = std::max(4, int(std::ceil(opt.min_inlier_ratio * n)));
  if (int(best.size()) < 3) fail(ErrorCode::kLocalizationFailure, "localize: no consensus");

  Pose pose = best_pose;
  std::vector<int> in = best;
  for (int round = 0; round < 4; ++round) {
    pose = refine_subset(pose, cs, in, k);
    auto next = inliers_of(pose, cs, k, opt.threshold_px);
    if (next == in) break;
    if (next.size() < 3) break;
    in = std::move(next);
  }
  if (int(in.size()) < min_inliers) {
    fail(ErrorCode::kLocalizationFailure, "localize: " + std::to_string(in.size()) + " inliers of " +
                                              std::to_string(n) + ", need " + std::to_string(min_inliers));
  }
  LocalizeResult res;
  res.pose = pose;
  res.inliers = int(in.size());
  double sq = 0.0;
  inliers_of(pose, cs, k, opt.threshold_px, &sq);
  res.rms_px = std::sqrt(sq / double(in.size()));
  return res;
}

Pose refine_pose(const Pose& pose, std::span<const Correspondence> cs, const Intrinsics& k) {
  std::vector<int> all(cs.size());
  std::iota(all.begin(), all.end(), 0);
  return refine_subset(pose, cs, all, k);
}

Pose localize_query(std::span<const Correspondence> cs, const Intrinsics& k, const LocalizeOptions& opt) {
  return localize(cs, k, opt).pose;
}

namespace {

Mat3 fit_essential(std::span<const Vec3> na, std::span<const Vec3> nb, std::span<const int> use) {
  Eigen::MatrixXd a(std::max<std::size_t>(use.size(), 9), 9);
  a.setZero();
  for (std::size_t r = 0; r < use.size(); ++r) {
    const Vec3& x = na[use[r]];
    const Vec3& y = nb[use[r]];
    a.row(r) << y.x() * x.x(), y.x() * x.y(), y.x(), y.y() * x.x(), y.y() * x.y(), y.y(), x.x(), x.y(), 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd e = svd.matrixV().col(8);
  Mat3 m;
  m << e(0), e(1), e(2), e(3), e(4), e(5), e(6), e(7), e(8);
  Eigen::JacobiSVD<Mat3> s2(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return s2.matrixU() * Vec3(1, 1, 0).asDiagonal() * s2.matrixV().transpose();
}

double sampson(const Mat3& e, const Vec3& x, const Vec3& y) {
  const Vec3 ex = e * x, ety = e.transpose() * y;
  const double num = y.dot(ex);
  const double den = ex.x() * ex.x() + ex.y() * ex.y() + ety.x() * ety.x() + ety.y() * ety.y();
  return den > 0 ? num * num / den : INFINITY;
}

}  // namespace

TwoViewResult two_view_geometry(std::span<const Vec2> pa, std::span<const Vec2> pb, const Intrinsics& k,
                                double threshold_px, std::uint64_t seed) {
  require(pa.size() == pb.size(), "two_view_geometry: mismatched inputs");
  const int n = int(pa.size());
  if (n < 8) fail(ErrorCode::kInsufficientMatches, "two_view_geometry: need 8 matches, have " + std::to_string(n));
  std::vector<Vec3> na, nb;
  for (int i = 0; i < n; ++i) {
    na.push_back(k.unproject(pa[i]));
    nb.push_back(k.unproject(pb[i]));
  }
  const double f = 0.5 * (k.fx + k.fy);
  const double thr2 = (threshold_px / f) * (threshold_px / f);
  auto inliers = [&](const Mat3& e) {
    std::vector<int> out;
    for (int i = 0; i < n; ++i)
      if (sampson(e, na[i], nb[i]) < thr2) out.push_back(i);
    return out;
  };

  std::mt19937_64 rng(seed);
  std::vector<int> idx(n), best;
  long needed = 1000;
  for (long it = 0; it < std::min<long>(needed, 1000); ++it) {
    std::iota(idx.begin(), idx.end(), 0);
    for (int s = 0; s < 8; ++s) {
      std::uniform_int_distribution<int> pick(s, n - 1);
      std::swap(idx[s], idx[pick(rng)]);
    }
    auto in = inliers(fit_essential(na, nb, std::span(idx.data(), 8)));
    if (in.size() > best.size()) {
      best = std::move(in);
      const double w = double(best.size()) / n;
      needed = w >= 1.0 ? 0 : long(std::ceil(std::log(1e-3) / std::log(1.0 - std::pow(w, 8))));
    }
  }
  if (best.size() < 8) fail(ErrorCode::kInsufficientMatches, "two_view_geometry: no epipolar consensus");
  Mat3 e = fit_essential(na, nb, best);
  best = inliers(e);
  if (best.size() < 8) fail(ErrorCode::kInsufficientMatches, "two_view_geometry: no epipolar consensus");
  e = fit_essential(na, nb, best);

  Eigen::JacobiSVD<Mat3> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU(), v = svd.matrixV();
  if (u.determinant() < 0) u = -u;
  if (v.determinant() < 0) v = -v;
  Mat3 w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Mat3 rs[2] = {u * w * v.transpose(), u * w.transpose() * v.transpose()};
  const Vec3 tu = u.col(2);

  TwoViewResult res;
  int best_front = -1;
  Pose a;
  for (const Mat3& r : rs) {
    for (double sign : {1.0, -1.0}) {
      const Vec3 t = sign * tu;  // x_b = r x_a + t
      Pose b;
      b.q = canonicalize(Quat(r.transpose()).normalized());
      b.p = -r.transpose() * t;
      int front = 0;
      for (int i : best) {
        // Midpoint-free depth check from the linear two-view solve.
        const Vec3 da = na[i], db = r.transpose() * nb[i];
        Eigen::Matrix<double, 3, 2> m;
        m << da, -db;
        const Eigen::Vector2d depth = m.colPivHouseholderQr().solve(b.p);
        if (depth(0) > 0 && depth(1) > 0) ++front;
      }
      if (front > best_front) {
        best_front = front;
        res.b = b;
      }
    }
  }
  res.inlier.assign(n, 0);
  for (int i : best) res.inlier[i] = 1;
  return res;
}

Pose Similarity::apply(const Pose& pose) const {
  Pose out;
  out.p = apply(pose.p);
  out.q = canonicalize(Quat(rotation * pose.rotation()).normalized());
  return out;
}

Similarity align_similarity(std::span<const Vec3> src, std::span<const Vec3> dst) {
  require(src.size() == dst.size() && src.size() >= 3, "align_similarity: need three matching points");
  Eigen::Matrix3Xd s(3, src.size()), d(3, dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    s.col(i) = src[i];
    d.col(i) = dst[i];
  }
  const Mat4 t = Eigen::umeyama(s, d, true);
  Similarity out;
  const Mat3 sr = t.topLeftCorner<3, 3>();
  out.scale = std::cbrt(sr.determinant());
  if (!(out.scale > 0) || !std::isfinite(out.scale)) fail(ErrorCode::kUnderConstrained, "align_similarity: degenerate");
  out.rotation = sr / out.scale;
  out.translation = t.topRightCorner<3, 1>();
  return out;
}

void transform_cloud(PointCloud& cloud, const Similarity& s) {
  for (auto& [id, x] : cloud.landmarks) x = s.apply(x);
  for (auto& c : cloud.cameras) c.pose = s.apply(c.pose);
}

}  // namespace locfuse::sfm
