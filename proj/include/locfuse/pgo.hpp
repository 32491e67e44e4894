#pragma once

#include <span>
#include <utility>
#include <vector>

#include "locfuse/geometry.hpp"

namespace locfuse::pgo {

// Absolute terms anchor each node to its measurement, relative terms tie
// consecutive nodes to the measured motion. Absolute weights must be
// positive; relative weights may be zero (pure absolute fit).
struct Weights {
  double abs_p = 1.0;
  double abs_q = 1.0;
  double rel_p = 10.0;
  double rel_q = 10.0;

  void validate() const;
};

struct PoseGraph {
  std::vector<Pose> nodes;
  std::vector<RelativePose> edges;  // edges[i] links nodes i and i + 1
  Weights weights;

  void validate() const;
};

struct ChunkPlan {
  int chunk_size = 100;
  int overlap = 20;
  std::vector<std::pair<int, int>> ranges;  // half-open [begin, end)
};

// Chunk k starts at k * (chunk_size - overlap); the last one is clipped at n.
ChunkPlan plan_chunks(int n, int chunk_size = 100, int overlap = 20);

// Per node, (chunk index, weight) pairs. A later chunk ramps in linearly over
// the nodes it shares with the ones before it.
std::vector<std::vector<std::pair<int, double>>> blend_weights(const ChunkPlan& plan, int n);

struct SolveOptions {
  int max_iterations = 100;
  double lambda0 = 1e-3;
};

struct ChunkResult {
  std::vector<Pose> poses;
  std::vector<double> accepted_costs;  // starts with the initial cost
  int iterations = 0;
  bool converged = false;  // false: iteration cap hit, poses hold the last iterate
};

// Weighted least squares over node positions and orientations, orientation
// errors taken through the rotation log map. Starts from the absolute poses.
ChunkResult optimize_chunk(const PoseGraph& graph, const SolveOptions& options = {});

// Total weighted cost of a pose sequence against the graph's measurements.
double graph_cost(const PoseGraph& graph, std::span<const Pose> poses);

// Chunked optimization of a whole stream, stitched by blend_weights.
std::vector<Pose> refine_stream(std::span<const Pose> absolute, std::span<const RelativePose> relative,
                                const Weights& weights, const ChunkPlan& plan, const SolveOptions& options = {});

}  // namespace locfuse::pgo
