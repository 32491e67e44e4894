#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "locfuse/cells.hpp"
#include "locfuse/flow.hpp"
#include "locfuse/geometry.hpp"

namespace locfuse::rpr {

using nn::Matrix;

// Pooled flow grid fed to the network: rows are time steps, cols features.
struct RprShape {
  int rows = 120;
  int cols = 160;
  int units = 50;

  void validate() const;
  bool operator==(const RprShape&) const = default;
};

struct RprLossWeights {
  double beta2 = 50.0;
  void validate() const;
};

// One LSTM per flow channel, final states concatenated into affine heads for
// translation (3) and rotation (4). Heads carry no activation.
struct RprNetwork {
  RprShape shape;
  nn::ParamSet lstm_u;
  nn::ParamSet lstm_v;
  nn::ParamSet heads;  // fc_dp.w (3 x 2u), fc_dp.b, fc_dq.w (4 x 2u), fc_dq.b

  static RprNetwork create(const RprShape& shape, std::uint64_t seed);
  nn::CellSpec cell_spec() const { return {nn::CellKind::kLstm, shape.cols, shape.units}; }
  std::size_t scalar_count() const;
};

// Raw head outputs for a batch: dp 3 x B, dq 4 x B (not normalized).
struct RprOutput {
  Matrix dp;
  Matrix dq;
};

// Sequences for a batch of pooled fields: rows entries of cols x B.
struct RprBatch {
  std::vector<Matrix> u_seq;
  std::vector<Matrix> v_seq;
};

RprBatch make_batch(const RprShape& shape, std::span<const FlowField* const> fields);

RprOutput rpr_forward(const RprNetwork& net, const RprBatch& batch);

// Single field; dq is normalized and canonicalized. Throws kShapeMismatch
// when the field is not rows x cols, kDegenerateQuaternion on a zero dq.
RelativePose rpr_predict(const RprNetwork& net, const FlowField& pooled);

// ||dp_hat - dp|| + beta2 ||dq_hat - dq / ||dq|| ||, norms unsquared.
double rpr_loss(const Vec3& dp_hat, const Vec4& dq_hat_wxyz, const RelativePose& gt, const RprLossWeights& w);

// Frame-local regression target between consecutive poses.
RelativePose make_rpr_target(const Pose& prev, const Pose& cur);

struct RprSample {
  FlowField pooled;
  RelativePose target;
};

struct RprGradients {
  nn::ParamSet lstm_u;
  nn::ParamSet lstm_v;
  nn::ParamSet heads;
};

// Mean batch loss and its gradient.
double rpr_loss_and_gradients(const RprNetwork& net, std::span<const RprSample> samples,
                              std::span<const std::size_t> batch, const RprLossWeights& w, RprGradients* grads);

struct RprTrainResult {
  std::vector<double> loss_trace;  // mean batch loss per iteration
};

// Adam over shuffled minibatches. Throws kDiverged on a non-finite loss.
RprTrainResult train_rpr(RprNetwork& net, std::span<const RprSample> dataset, const nn::TrainConfig& config,
                         const RprLossWeights& w = {});

void save_rpr(const std::filesystem::path& path, const RprNetwork& net);
RprNetwork load_rpr(const std::filesystem::path& path);

// Manifest CSV flow_file,dp_x,dp_y,dp_z,dq_w,dq_x,dq_y,dq_z with flow paths
// relative to the manifest. Fields 4x the network shape are mean pooled on
// load.
void write_rpr_dataset(const std::filesystem::path& manifest, std::span<const RprSample> samples);
std::vector<RprSample> read_rpr_dataset(const std::filesystem::path& manifest, const RprShape& shape);

}  // namespace locfuse::rpr
