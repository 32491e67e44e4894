#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "locfuse/cells.hpp"
#include "locfuse/geometry.hpp"

namespace locfuse::fusion {

using nn::Matrix;

// Per timestep: absolute pose (px py pz qw qx qy qz) then relative pose
// (dp_x dp_y dp_z dq_w dq_x dq_y dq_z).
inline constexpr int kFeatureWidth = 14;

struct FusionConfig {
  nn::CellKind cell = nn::CellKind::kTrnn;
  int n_t = 15;
  int r_u = 10;
  bool stacked = true;
  double beta3 = 50.0;
  int batch_size = 100;
  // Express each window in the frame of its last absolute pose and predict a
  // correction to that pose. Off: the heads emit world poses directly.
  bool anchored = true;

  void validate() const;
};

struct FusionWindow {
  Matrix features;            // n_t x 14
  std::optional<Pose> target;  // ground truth at the last timestep
  int last = 0;               // stream index of the last timestep
};

// Sliding windows of n_t timesteps, stride 1. relative[i] is the motion
// arriving at timestep i + 1; timestep 0 gets the identity. truth, when
// given, supplies the targets.
std::vector<FusionWindow> build_windows(std::span<const Pose> absolute, std::span<const RelativePose> relative,
                                        int n_t, std::span<const Pose> truth = {});

struct FusionNet {
  FusionConfig config;
  nn::RecurrentStack stack;
  nn::ParamSet heads;  // fc_p.w (3 x r_u), fc_p.b, fc_q.w (4 x r_u), fc_q.b

  static FusionNet create(const FusionConfig& config, std::uint64_t seed);
  std::size_t scalar_count() const;
};

// Raw head outputs mapped to poses: p 3 x B, q 4 x B (w, x, y, z), not
// normalized.
struct FusionOutput {
  Matrix p;
  Matrix q;
};

FusionOutput fusion_forward_batch(const FusionNet& net, std::span<const FusionWindow* const> windows);

// Single window; the quaternion is normalized and canonicalized.
Pose fusion_forward(const FusionNet& net, const FusionWindow& window);

// ||p_hat - p||^2 + beta3 ||q_hat - q / ||q|| ||^2, q_hat taken as given.
double fusion_loss(const Vec3& p_hat, const Vec4& q_hat_wxyz, const Pose& gt, double beta3);
double fusion_loss(const Pose& pred, const Pose& gt, double beta3);

struct FusionGradients {
  std::vector<nn::ParamSet> stack;
  nn::ParamSet heads;
};

// Mean loss over the selected windows and, optionally, its gradient.
double fusion_loss_and_gradients(const FusionNet& net, std::span<const FusionWindow> windows,
                                 std::span<const std::size_t> batch, FusionGradients* grads);

struct FusionTrainResult {
  std::vector<double> loss_trace;
};

// Adam over shuffled minibatches of train.batch_size windows. Windows need
// targets. Throws kDiverged on a non-finite loss.
FusionTrainResult train_fusion(FusionNet& net, std::span<const FusionWindow> windows, const nn::TrainConfig& train);

// Fused stream: timesteps before the first full window keep their absolute
// pose.
std::vector<Pose> fuse_stream(const FusionNet& net, std::span<const Pose> absolute,
                              std::span<const RelativePose> relative);

void save_fusion(const std::filesystem::path& path, const FusionNet& net);
FusionNet load_fusion(const std::filesystem::path& path);

// --- sweeps ---

// A stream triple used for training or evaluation.
struct Segment {
  std::vector<Pose> absolute;
  std::vector<RelativePose> relative;
  std::vector<Pose> truth;
};

struct SweepEntry {
  nn::CellKind cell = nn::CellKind::kTrnn;
  bool stacked = true;
  int n_t = 15;
  int r_u = 10;
  int iterations = -1;  // < 0: the sweep's training length
};

// Cartesian product of the grid axes.
std::vector<SweepEntry> sweep_grid(std::span<const nn::CellKind> cells, std::span<const bool> stacking,
                                   std::span<const int> n_t, std::span<const int> r_u);

struct SweepRow {
  SweepEntry entry;
  double median_pos_m = 0.0;
  double median_ori_deg = 0.0;
  int rank = 0;
  bool failed = false;
  std::string error;
};

// Trains every entry from the same seed and ranks by held-out median
// position error (orientation breaks ties, failures last). Rows carry the
// resolved iteration count.
std::vector<SweepRow> sweep_fusion(std::span<const SweepEntry> grid, std::span<const Segment> train,
                                   std::span<const Segment> test, const FusionConfig& base,
                                   const nn::TrainConfig& train_config);

// CSV cell,stacked,n_t,r_u,median_pos_m,median_ori_deg,rank,iterations.
// Failed rows carry "nan" errors.
void write_sweep_report(const std::filesystem::path& path, std::span<const SweepRow> rows);

}  // namespace locfuse::fusion
