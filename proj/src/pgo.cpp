#include "locfuse/pgo.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Sparse>

#include "locfuse/error.hpp"

namespace locfuse::pgo {

namespace {

using Triplet = Eigen::Triplet<double>;

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

// Inverse right Jacobian of SO(3): d log(R exp(d)) / dd at d = 0.
Mat3 right_jacobian_inv(const Vec3& phi) {
  const double t = phi.norm();
  const Mat3 k = skew(phi);
  if (t < 1e-6) return Mat3::Identity() + 0.5 * k + (1.0 / 12.0) * k * k;
  const double c = 1.0 / (t * t) - (1.0 + std::cos(t)) / (2.0 * t * std::sin(t));
  return Mat3::Identity() + 0.5 * k + c * k * k;
}

// Weight of the incoming chunk at node i of an overlap [s, s + len).
double ramp(int i, int s, int len) { return double(i - s + 1) / double(len + 1); }

struct Linearization {
  Eigen::VectorXd r;
  Eigen::SparseMatrix<double> jac;
};

// Rows per node: abs position, abs orientation. Rows per edge: rel
// position, rel orientation. Parameters per node: position (world) then a
// right rotation increment.
Linearization linearize(const PoseGraph& g, std::span<const Pose> x, bool with_jacobian) {
  const int n = int(x.size());
  const int rows = 6 * n + 6 * (n - 1);
  Linearization out;
  out.r.resize(rows);
  std::vector<Triplet> trip;
  auto put = [&](int row, int col, const Mat3& m) {
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        if (m(a, b) != 0.0) trip.emplace_back(row + a, col + b, m(a, b));
  };
  const Weights& w = g.weights;
  const double sap = std::sqrt(w.abs_p), saq = std::sqrt(w.abs_q);
  const double srp = std::sqrt(w.rel_p), srq = std::sqrt(w.rel_q);
  for (int i = 0; i < n; ++i) {
    const int row = 6 * i;
    out.r.segment<3>(row) = sap * (x[i].p - g.nodes[i].p);
    const Vec3 phi = rotation_log(g.nodes[i].q.conjugate() * x[i].q);
    out.r.segment<3>(row + 3) = saq * phi;
    if (with_jacobian) {
      put(row, 6 * i, sap * Mat3::Identity());
      put(row + 3, 6 * i + 3, saq * right_jacobian_inv(phi));
    }
  }
  for (int i = 0; i + 1 < n; ++i) {
    const int row = 6 * n + 6 * i;
    const Mat3 ri = x[i].rotation();
    const Vec3 local = ri.transpose() * (x[i + 1].p - x[i].p);
    out.r.segment<3>(row) = srp * (local - g.edges[i].dp);
    const Quat between = x[i].q.conjugate() * x[i + 1].q;
    const Vec3 phi = rotation_log(g.edges[i].dq.conjugate() * between);
    out.r.segment<3>(row + 3) = srq * phi;
    if (with_jacobian) {
      put(row, 6 * i, -srp * ri.transpose());
      put(row, 6 * (i + 1), srp * ri.transpose());
      put(row, 6 * i + 3, srp * skew(local));
      const Mat3 jr = right_jacobian_inv(phi);
      put(row + 3, 6 * (i + 1) + 3, srq * jr);
      put(row + 3, 6 * i + 3, -srq * jr * between.toRotationMatrix().transpose());
    }
  }
  if (with_jacobian) {
    out.jac.resize(rows, 6 * n);
    out.jac.setFromTriplets(trip.begin(), trip.end());
  }
  return out;
}

std::vector<Pose> step(std::span<const Pose> x, const Eigen::VectorXd& d) {
  std::vector<Pose> out(x.begin(), x.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].p += d.segment<3>(6 * i);
    out[i].q = (out[i].q * rotation_exp(d.segment<3>(6 * i + 3))).normalized();
  }
  return out;
}

}  // namespace

void Weights::validate() const {
  require(abs_p > 0.0 && abs_q > 0.0, "pgo weights: absolute weights must be > 0");
  require(rel_p >= 0.0 && rel_q >= 0.0, "pgo weights: relative weights must be >= 0");
  require(std::isfinite(abs_p + abs_q + rel_p + rel_q), "pgo weights: must be finite");
}

void PoseGraph::validate() const {
  weights.validate();
  if (nodes.empty() || edges.size() + 1 != nodes.size()) {
    fail(ErrorCode::kShapeMismatch, "pose graph: " + std::to_string(nodes.size()) + " nodes need " +
                                        std::to_string(nodes.empty() ? 0 : nodes.size() - 1) + " edges, got " +
                                        std::to_string(edges.size()));
  }
}

ChunkPlan plan_chunks(int n, int chunk_size, int overlap) {
  require(n >= 1, "plan_chunks: n must be >= 1");
  require(chunk_size >= 1, "plan_chunks: chunk_size must be >= 1");
  require(overlap >= 0 && overlap < chunk_size, "plan_chunks: need 0 <= overlap < chunk_size");
  ChunkPlan plan{chunk_size, overlap, {}};
  const int stride = chunk_size - overlap;
  for (int s = 0; s < n; s += stride) plan.ranges.emplace_back(s, std::min(n, s + chunk_size));
  return plan;
}

std::vector<std::vector<std::pair<int, double>>> blend_weights(const ChunkPlan& plan, int n) {
  std::vector<std::vector<std::pair<int, double>>> w(std::max(n, 0));
  int covered = 0;
  for (int k = 0; k < int(plan.ranges.size()); ++k) {
    const auto [s, e] = plan.ranges[k];
    require(s >= 0 && s < e && e <= n && s <= covered, "blend_weights: chunk ranges must tile [0, n) in order");
    const int len = std::min(e, covered) - s;
    for (int i = s; i < e; ++i) {
      const double a = i < covered ? ramp(i, s, len) : 1.0;
      for (auto& [chunk, v] : w[i]) v *= 1.0 - a;
      w[i].emplace_back(k, a);
    }
    covered = std::max(covered, e);
  }
  require(covered == n, "blend_weights: chunk ranges do not cover [0, n)");
  return w;
}

double graph_cost(const PoseGraph& graph, std::span<const Pose> poses) {
  graph.validate();
  if (poses.size() != graph.nodes.size()) fail(ErrorCode::kShapeMismatch, "graph_cost: pose count mismatch");
  return linearize(graph, poses, false).r.squaredNorm();
}

ChunkResult optimize_chunk(const PoseGraph& graph, const SolveOptions& options) {
  graph.validate();
  require(graph.nodes.size() >= 2, "optimize_chunk: needs at least 2 nodes");
  require(options.max_iterations >= 0 && options.lambda0 > 0.0, "optimize_chunk: bad solver options");

  ChunkResult res;
  res.poses = graph.nodes;
  auto lin = linearize(graph, res.poses, true);
  double cost = lin.r.squaredNorm();
  res.accepted_costs.push_back(cost);
  double lambda = options.lambda0;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
  constexpr double kTinyCost = 1e-24, kRelGain = 1e-12, kTinyStep = 1e-12, kMaxLambda = 1e16;

  while (res.iterations < options.max_iterations) {
    if (cost <= kTinyCost) {
      res.converged = true;
      break;
    }
    ++res.iterations;
    const Eigen::SparseMatrix<double> h = lin.jac.transpose() * lin.jac;
    const Eigen::VectorXd grad = lin.jac.transpose() * lin.r;
    Eigen::SparseMatrix<double> a = h;
    for (int j = 0; j < a.cols(); ++j) a.coeffRef(j, j) += lambda * h.coeff(j, j);
    solver.compute(a);
    if (solver.info() != Eigen::Success) {
      lambda *= 10.0;
      if (lambda > kMaxLambda) {
        res.converged = true;
        break;
      }
      continue;
    }
    const Eigen::VectorXd d = -solver.solve(grad);
    if (d.norm() < kTinyStep) {
      res.converged = true;
      break;
    }
    auto trial = step(res.poses, d);
    auto trial_lin = linearize(graph, trial, true);
    const double trial_cost = trial_lin.r.squaredNorm();
    if (trial_cost < cost) {
      const double gain = cost - trial_cost;
      res.poses = std::move(trial);
      lin = std::move(trial_lin);
      cost = trial_cost;
      res.accepted_costs.push_back(cost);
      lambda = std::max(lambda / 10.0, 1e-12);
      if (gain <= kRelGain * cost) {
        res.converged = true;
        break;
      }
    } else {
      lambda *= 10.0;
      if (lambda > kMaxLambda) {
        res.converged = true;
        break;
      }
    }
  }
  for (auto& p : res.poses) p.q = canonicalize(p.q.normalized());
  return res;
}

std::vector<Pose> refine_stream(std::span<const Pose> absolute, std::span<const RelativePose> relative,
                                const Weights& weights, const ChunkPlan& plan, const SolveOptions& options) {
  weights.validate();
  const int n = int(absolute.size());
  if (n == 0 || relative.size() + 1 != absolute.size()) {
    fail(ErrorCode::kShapeMismatch, "refine_stream: " + std::to_string(absolute.size()) +
                                        " absolute poses need one fewer relative poses, got " +
                                        std::to_string(relative.size()));
  }
  // Validates the tiling.
  blend_weights(plan, n);

  std::vector<Pose> out(absolute.begin(), absolute.end());
  int covered = 0;
  for (const auto& [s, e] : plan.ranges) {
    std::vector<Pose> part;
    if (e - s >= 2) {
      PoseGraph g{{absolute.begin() + s, absolute.begin() + e}, {relative.begin() + s, relative.begin() + e - 1},
                  weights};
      part = optimize_chunk(g, options).poses;
    } else {
      part.assign(absolute.begin() + s, absolute.begin() + e);
    }
    const int len = std::min(e, covered) - s;
    for (int i = s; i < e; ++i) {
      const Pose& fresh = part[i - s];
      if (i >= covered) {
        out[i] = fresh;
        continue;
      }
      const double a = ramp(i, s, len);
      out[i].p = (1.0 - a) * out[i].p + a * fresh.p;
      out[i].q = out[i].q.slerp(a, fresh.q);
    }
    covered = std::max(covered, e);
  }
  for (auto& p : out) p.q = canonicalize(p.q.normalized());
  return out;
}

}  // namespace locfuse::pgo
