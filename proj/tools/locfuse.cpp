// locfuse command line: one subcommand per pipeline stage.

#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "locfuse/csv.hpp"
#include "locfuse/harness.hpp"

using namespace locfuse;
using namespace locfuse::harness;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kStageFailure = 2;

void write_trace(const std::filesystem::path& path, const std::vector<double>& trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  csv::write_row(out, {"iteration", "loss"});
  for (std::size_t i = 0; i < trace.size(); ++i) csv::write_row(out, {std::to_string(i), csv::format(trace[i])});
}

std::vector<double> stamps(std::size_t n, double rate) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = double(i) / rate;
  return t;
}

void write_segments(const std::filesystem::path& out, const std::string& prefix,
                    const std::vector<fusion::Segment>& segs, double rate) {
  for (std::size_t k = 0; k < segs.size(); ++k) {
    const auto& s = segs[k];
    const auto t = stamps(s.truth.size(), rate);
    const auto stem = prefix + "_" + std::to_string(k) + "_";
    write_pose_stream(out / (stem + "truth.csv"), {t, s.truth});
    write_pose_stream(out / (stem + "absolute.csv"), {t, s.absolute});
    write_relative_stream(out / (stem + "relative.csv"), {std::vector<double>(t.begin() + 1, t.end()), s.relative});
  }
}

std::optional<rpr::RprNetwork> maybe_rpr(const ExperimentConfig& cfg) {
  if (cfg.pipeline.relative != RelativeSource::kRpr) return std::nullopt;
  std::optional<rpr::RprNetwork> net;
  run_stage("train-rpr", [&] { net = train_rpr_stage(cfg); });
  return net;
}

void simulate(const ExperimentConfig& cfg) {
  // Raw simulator output: the rpr source needs a trained network, so it is
  // replaced by exact motion here.
  ExperimentConfig c = cfg;
  if (c.pipeline.relative == RelativeSource::kRpr) c.pipeline.relative = RelativeSource::kExact;
  const auto data = build_dataset(c);
  run_stage("simulate", [&] {
    std::filesystem::create_directories(c.out_dir);
    write_segments(c.out_dir, "train", data.train, c.scenario.rate_hz);
    write_segments(c.out_dir, "test", data.test, c.scenario.rate_hz);
    const auto& sc = c.scenario;
    const auto scenario = sim::make_sfm_scenario(sc.sfm_cameras, sc.sfm_landmarks, sc.sfm_queries, c.seed);
    write_matches(c.out_dir / "sfm_matches.csv", sim::scenario_matches(scenario, sc.match_noise, c.seed));
  });
}

void sfm_stage(const ExperimentConfig& cfg) {
  const auto run = run_sfm(cfg, cfg.sfm, cfg.out_dir);
  run_stage("sfm", [&] {
    write_sfm_runs(cfg.out_dir / "sfm.csv", std::vector<SfmRun>{run});
    if (run.failed) fail(ErrorCode::kStage, "stage sfm: " + run.error);
  });
}

void train_rpr(const ExperimentConfig& cfg) {
  run_stage("train-rpr", [&] {
    std::vector<double> trace;
    const auto net = train_rpr_stage(cfg, &trace);
    std::filesystem::create_directories(cfg.out_dir);
    rpr::save_rpr(cfg.out_dir / "rpr.ckpt", net);
    write_trace(cfg.out_dir / "rpr_loss.csv", trace);
  });
}

void train_fusion(const ExperimentConfig& cfg) {
  const auto rpr_net = maybe_rpr(cfg);
  const auto data = build_dataset(cfg, rpr_net ? &*rpr_net : nullptr);
  run_stage("train-fusion", [&] {
    std::vector<double> trace;
    const auto net = train_fusion_stage(cfg, data.train, &trace);
    std::filesystem::create_directories(cfg.out_dir);
    fusion::save_fusion(cfg.out_dir / "fusion.ckpt", net);
    write_trace(cfg.out_dir / "fusion_loss.csv", trace);
  });
}

void pipeline(ExperimentConfig cfg, std::optional<FusionMethod> method) {
  if (method) cfg.pipeline.fusion = *method;
  const auto report = run_pipeline(cfg);
  for (const auto& r : report.rows)
    std::cout << r.method << ": median " << csv::format(r.median_pos_m) << " m, " << csv::format(r.median_ori_deg)
              << " deg, improvement " << csv::format(r.improvement_pct) << " %\n";
}

void sweep_sfm_stage(const ExperimentConfig& cfg) {
  std::vector<SfmRun> runs;
  run_stage("sweep-sfm", [&] {
    runs = sweep_sfm(cfg);
    write_sfm_runs(cfg.out_dir / "sweep_sfm.csv", runs);
  });
  int failed = 0;
  for (const auto& r : runs) failed += r.failed;
  std::cout << runs.size() << " runs, " << failed << " failed\n";
}

void sweep_fusion_stage(const ExperimentConfig& cfg) {
  const auto rows = sweep_fusion(cfg);
  run_stage("sweep-fusion", [&] { fusion::write_sweep_report(cfg.out_dir / "sweep_fusion.csv", rows); });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Localization fusion experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  app.add_option("--config", config_path, "Experiment config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed override");
  app.add_option("--out", out_dir, "Output directory override");
  app.fallthrough();

  const std::vector<std::pair<std::string, std::string>> commands{
      {"simulate", "Write simulated truth, absolute and relative streams and SfM matches"},
      {"sfm", "Reconstruct the synthetic scene and localize its queries"},
      {"train-rpr", "Train the relative pose network on simulated flow"},
      {"train-fusion", "Train the recurrent fusion network"},
      {"pgo", "Refine absolute streams with pose graph optimization"},
      {"eval", "Run the configured pipeline and write report.csv"},
      {"sweep-sfm", "Grid over SfM parameters"},
      {"sweep-fusion", "Grid over fusion network configurations"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  ExperimentConfig cfg;
  try {
    if (!config_path.empty()) cfg = load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "simulate") simulate(cfg);
    else if (command == "sfm") sfm_stage(cfg);
    else if (command == "train-rpr") train_rpr(cfg);
    else if (command == "train-fusion") train_fusion(cfg);
    else if (command == "pgo") pipeline(cfg, FusionMethod::kPgo);
    else if (command == "eval") pipeline(cfg, std::nullopt);
    else if (command == "sweep-sfm") sweep_sfm_stage(cfg);
    else if (command == "sweep-fusion") sweep_fusion_stage(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kStageFailure;
  }
  return kOk;
}
