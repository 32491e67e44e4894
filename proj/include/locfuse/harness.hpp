#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "locfuse/config.hpp"
#include "locfuse/error.hpp"
#include "locfuse/fusion.hpp"
#include "locfuse/pgo.hpp"
#include "locfuse/rpr.hpp"
#include "locfuse/sfm.hpp"
#include "locfuse/sim.hpp"

namespace locfuse::harness {

enum class AbsoluteSource { kDegraded, kSfm, kFile };
enum class RelativeSource { kExact, kRpr, kFile };
enum class FusionMethod { kNone, kPgo, kRecurrent, kAll };

struct ScenarioConfig {
  std::filesystem::path spec;  // optional scenario file, read before the inline keys
  sim::MotionProfile profile = sim::MotionProfile::robot();
  sim::SceneSpec scene;
  double duration_s = 60.0;
  double rate_hz = 10.0;
  int train_trajectories = 4;
  int test_trajectories = 2;
  sim::Degradation degradation{0.2, 1.0, 0.05, 1.0};
  sim::MatchNoise match_noise{0.5, 0.05};
  // Compact reconstruction scene used by the sfm stage and sweeps.
  int sfm_cameras = 10;
  int sfm_landmarks = 200;
  int sfm_queries = 20;
  // Warehouse map for the sfm absolute source: keyframes on a floor grid
  // (keyframe_spacing apart, inset by half a spacing) at keyframe_headings
  // evenly spread yaws, each frame localized against its nearest keyframes.
  double keyframe_spacing = 5.0;
  int keyframe_headings = 6;
  int query_keyframes = 3;
};

struct RprSettings {
  rpr::RprShape shape{12, 16, 16};
  double beta2 = 50.0;
  int batch_size = 50;
};

struct TrainSettings {
  int rpr_iterations = 5000;
  int fusion_iterations = 5000;
  double learning_rate = 1e-4;
  // Long schedules: 150k RPR, 75k fusion.
  bool long_schedule = false;

  int rpr_length() const { return long_schedule ? 150000 : rpr_iterations; }
  int fusion_length() const { return long_schedule ? 75000 : fusion_iterations; }
};

struct PgoSettings {
  pgo::Weights weights;
  int chunk_size = 100;
  int overlap = 20;
  pgo::SolveOptions solve;
};

struct PipelineSettings {
  AbsoluteSource absolute = AbsoluteSource::kDegraded;
  RelativeSource relative = RelativeSource::kExact;
  FusionMethod fusion = FusionMethod::kAll;
  // File sources: one evaluation segment. Training still uses simulated data.
  std::filesystem::path absolute_file;
  std::filesystem::path relative_file;
  std::filesystem::path truth_file;
};

struct SfmSweepGrid {
  std::vector<double> sc, oc;
  std::vector<int> mm;
  std::vector<double> ex;
  std::vector<bool> gibbs;
  std::vector<double> std;
};

struct FusionSweepGrid {
  std::vector<nn::CellKind> cells{nn::CellKind::kTrnn, nn::CellKind::kLstm};
  std::vector<bool> stacked{true};
  std::vector<int> n_t{10, 15};
  std::vector<int> r_u{10};
  // Append an untrained copy of the first entry.
  bool control = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "out";
  bool report_runtime = false;  // runtimes break byte-identical reports
  ScenarioConfig scenario;
  sfm::SfmConfig sfm;
  RprSettings rpr;
  fusion::FusionConfig fusion;
  double beta1 = 50.0;
  bool absolute_loss = false;  // weight the fusion loss with beta1 instead of beta3
  TrainSettings train;
  PgoSettings pgo;
  PipelineSettings pipeline;
  SfmSweepGrid sweep_sfm;
  FusionSweepGrid sweep_fusion;

  void validate() const;
};

// Unknown keys, malformed values and invalid settings throw kConfig.
ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

// Runs f, rethrowing any failure as kStage with the stage name in front.
void run_stage(std::string_view name, const std::function<void()>& f);

// --- data ---

struct Dataset {
  std::vector<fusion::Segment> train;
  std::vector<fusion::Segment> test;
  std::vector<double> test_times;  // shared stamps of the first test segment
  int sfm_failures = 0;           // frames that fell back to the previous pose
};

// Simulated truth per trajectory; index k uses its own seed.
PoseStream simulate_truth(const ExperimentConfig& cfg, int k);

// Pooled-flow samples along a trajectory at the RPR input scale.
std::vector<rpr::RprSample> rpr_samples(const ExperimentConfig& cfg, std::span<const Pose> truth);

rpr::RprNetwork train_rpr_stage(const ExperimentConfig& cfg, std::vector<double>* loss_trace = nullptr);

// Segments with the configured absolute and relative sources. rpr is needed
// for the rpr relative source.
Dataset build_dataset(const ExperimentConfig& cfg, const rpr::RprNetwork* rpr = nullptr);

fusion::FusionNet train_fusion_stage(const ExperimentConfig& cfg, std::span<const fusion::Segment> train,
                                     std::vector<double>* loss_trace = nullptr);

std::vector<Pose> refine_pgo(const ExperimentConfig& cfg, const fusion::Segment& segment);

// --- reports ---

struct ReportRow {
  std::string method;
  double median_pos_m = 0.0;
  double median_ori_deg = 0.0;
  double improvement_pct = 0.0;  // position, against the absolute-only row
  double runtime_s = 0.0;
};

struct Report {
  std::vector<ReportRow> rows;
};

// CSV method,median_pos_m,median_ori_deg,improvement_pct[,runtime_s]
void write_report(const std::filesystem::path& path, const Report& report, bool runtime);

// Writes streams, checkpoints and report.csv under cfg.out_dir. Errors are
// kStage naming the failing stage.
Report run_pipeline(const ExperimentConfig& cfg);

// --- sfm experiments ---

struct SfmRun {
  sfm::SfmConfig config;
  int observations = 0;
  int landmarks = 0;
  int cameras = 0;
  double median_pos_m = 0.0;
  double median_ori_deg = 0.0;
  int localized = 0;
  bool failed = false;
  std::string error;
};

// Reconstruction of the compact scene and localization of its queries.
// Failures are recorded, not thrown. Artifacts land in out when non-empty.
SfmRun run_sfm(const ExperimentConfig& cfg, const sfm::SfmConfig& sfm_config, const std::filesystem::path& out = {});

// Cartesian product of the grid; empty axes take the base value. ex_init and
// ex_register are pinned to the base ex when unset, so ex only moves
// exclusion across the grid.
std::vector<SfmRun> sweep_sfm(const ExperimentConfig& cfg);

// CSV sc,oc,mm,ex,gibbs,std,observations,landmarks,cameras,localized,median_pos_m,median_ori_deg,failed
void write_sfm_runs(const std::filesystem::path& path, std::span<const SfmRun> runs);

std::vector<fusion::SweepRow> sweep_fusion(const ExperimentConfig& cfg);

}  // namespace locfuse::harness
