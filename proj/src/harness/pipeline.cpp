#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>

#include "locfuse/csv.hpp"
#include "locfuse/harness.hpp"

namespace locfuse::harness {
namespace {

// Seed streams.
enum : std::uint64_t {
  kTrajectory = 1,
  kAbsolute,
  kScene,
  kMatches,
  kLocalize,
  kRprInit,
  kRprTrain,
  kFusionInit,
  kFusionTrain,
  kSfmScenario,
  kSfmMatches,
  kSfmQueries,
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<double> stamps(std::size_t n, double rate) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = double(i) / rate;
  return t;
}

void write_poses(const std::filesystem::path& path, std::span<const Pose> poses, std::span<const double> times) {
  write_pose_stream(path, {std::vector<double>(times.begin(), times.end()), std::vector<Pose>(poses.begin(), poses.end())});
}

void write_relative(const std::filesystem::path& path, std::span<const RelativePose> rel, std::span<const double> times) {
  // Entry i arrives at timestep i + 1.
  write_relative_stream(path, {std::vector<double>(times.begin() + 1, times.end()),
                               std::vector<RelativePose>(rel.begin(), rel.end())});
}

void write_trace(const std::filesystem::path& path, std::span<const double> trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  csv::write_row(out, {"iteration", "loss"});
  for (std::size_t i = 0; i < trace.size(); ++i) csv::write_row(out, {std::to_string(i), csv::format(trace[i])});
}

Intrinsics scaled_intrinsics(double s) {
  const auto k = Intrinsics::reference();
  return {k.fx * s, k.fy * s, k.cx * s, k.cy * s};
}

// Keyframe map of the warehouse scene for the sfm absolute source.
class WarehouseMap {
 public:
  explicit WarehouseMap(const ExperimentConfig& cfg) : cfg_(cfg), k_(Intrinsics::reference()) {
    const auto& sc = cfg.scenario;
    scene_ = sim::make_scene(sc.scene, sim::mix_seed(cfg.seed, kScene));
    const double step = sc.keyframe_spacing;
    const Vec3 lo = sc.scene.box_min, hi = sc.scene.box_max;
    for (double x = lo.x() + step / 2; x < hi.x(); x += step)
      for (double y = lo.y() + step / 2; y < hi.y(); y += step)
        for (int h = 0; h < sc.keyframe_headings; ++h) {
          const double yaw = 2.0 * std::numbers::pi * h / sc.keyframe_headings;
          const Vec3 eye(x, y, lo.z() + sc.profile.camera_height);
          keyframes_.push_back(sim::look_at(eye, eye + Vec3(std::cos(yaw), std::sin(yaw), 0.0)));
        }
    std::vector<Match> matches;
    for (int i = 0; i < int(keyframes_.size()); ++i)
      for (int j = i + 1; j < int(keyframes_.size()); ++j) {
        auto m = sim::synth_matches(scene_.landmarks, i, keyframes_[i], j, keyframes_[j], k_, sc.match_noise,
                                    sim::mix_seed(cfg.seed, kMatches));
        matches.insert(matches.end(), m.begin(), m.end());
      }
    sfm::ReconstructOptions opt;
    for (int i = 0; i < int(keyframes_.size()); ++i) opt.priors[i] = keyframes_[i];
    opt.floor = sfm::FloorGrid{sc.scene.box_min.x(), sc.scene.box_max.x(), sc.scene.box_min.y(),
                               sc.scene.box_max.y(), sc.scene.box_min.z(), 0.5};
    opt.seed = sim::mix_seed(cfg.seed, kMatches, 1);
    rec_ = sfm::reconstruct(matches, k_, cfg.sfm, opt);
  }

  const sfm::Reconstruction& reconstruction() const { return rec_; }

  // Localizes each frame against the registered keyframes closest in
  // position and heading, a stand-in for image retrieval. A failed frame
  // repeats the previous estimate (the nearest keyframe for the first).
  std::vector<Pose> localize_stream(std::span<const Pose> truth, int image_base, int& failures) const {
    std::vector<Pose> out;
    out.reserve(truth.size());
    for (int f = 0; f < int(truth.size()); ++f) {
      const Pose& cam = truth[f];
      std::vector<std::pair<double, int>> near;
      for (const auto& c : rec_.cloud.cameras) {
        const Pose& kf = keyframes_[c.image];
        near.emplace_back((kf.p - cam.p).norm() + 2.0 * rotation_angle(kf.q, cam.q), c.image);
      }
      std::sort(near.begin(), near.end());
      near.resize(std::min<std::size_t>(near.size(), std::size_t(cfg_.scenario.query_keyframes)));
      std::vector<Match> qm;
      for (const auto& [d, img] : near) {
        auto m = sim::synth_matches(scene_.landmarks, img, keyframes_[img], image_base + f, cam, k_,
                                    cfg_.scenario.match_noise, sim::mix_seed(cfg_.seed, kMatches));
        qm.insert(qm.end(), m.begin(), m.end());
      }
      try {
        sfm::LocalizeOptions lo;
        lo.threshold_px = cfg_.sfm.register_limit();
        lo.seed = sim::mix_seed(cfg_.seed, kLocalize, std::uint64_t(image_base + f));
        out.push_back(sfm::localize_query(sfm::query_correspondences(rec_, qm), k_, lo));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kLocalizationFailure && e.code() != ErrorCode::kUnderConstrained) throw;
        ++failures;
        out.push_back(out.empty() ? *rec_.cloud.camera(near.front().second) : out.back());
      }
    }
    return out;
  }

 private:
  const ExperimentConfig& cfg_;
  Intrinsics k_;
  sim::Scene scene_;
  std::vector<Pose> keyframes_;
  sfm::Reconstruction rec_;
};

std::vector<RelativePose> rpr_relative(const ExperimentConfig& cfg, const rpr::RprNetwork& net,
                                       std::span<const Pose> truth) {
  std::vector<RelativePose> out;
  for (const auto& s : rpr_samples(cfg, truth)) out.push_back(rpr::rpr_predict(net, s.pooled));
  return out;
}

nn::TrainConfig fusion_train_config(const ExperimentConfig& cfg) {
  nn::TrainConfig tc;
  tc.learning_rate = cfg.train.learning_rate;
  tc.batch_size = cfg.fusion.batch_size;
  tc.iterations = cfg.train.fusion_length();
  tc.seed = sim::mix_seed(cfg.seed, kFusionTrain);
  return tc;
}

fusion::FusionConfig effective_fusion(const ExperimentConfig& cfg) {
  auto f = cfg.fusion;
  if (cfg.absolute_loss) f.beta3 = cfg.beta1;
  return f;
}

std::vector<Pose> concat(std::span<const fusion::Segment> segs, std::vector<Pose> fusion::Segment::*field) {
  std::vector<Pose> out;
  for (const auto& s : segs) out.insert(out.end(), (s.*field).begin(), (s.*field).end());
  return out;
}

bool needs_rpr(const ExperimentConfig& cfg) { return cfg.pipeline.relative == RelativeSource::kRpr; }

bool needs_map(const ExperimentConfig& cfg) { return cfg.pipeline.absolute == AbsoluteSource::kSfm; }

}  // namespace

void run_stage(std::string_view name, const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kStage) throw;
    fail(ErrorCode::kStage, "stage " + std::string(name) + ": " + e.what());
  } catch (const std::exception& e) {
    fail(ErrorCode::kStage, "stage " + std::string(name) + ": " + e.what());
  }
}

PoseStream simulate_truth(const ExperimentConfig& cfg, int k) {
  const auto& sc = cfg.scenario;
  return sim::generate_trajectory(sc.profile, sc.scene, sc.duration_s, sc.rate_hz,
                                  sim::mix_seed(cfg.seed, kTrajectory, std::uint64_t(k)));
}

std::vector<rpr::RprSample> rpr_samples(const ExperimentConfig& cfg, std::span<const Pose> truth) {
  const auto& shape = cfg.rpr.shape;
  const Intrinsics k = scaled_intrinsics(4.0 * shape.cols / 640.0);
  const ImageSize size{4 * shape.cols, 4 * shape.rows};
  const auto proxy = sim::DepthProxy::box(cfg.scenario.scene.box_min, cfg.scenario.scene.box_max);
  std::vector<rpr::RprSample> out;
  for (std::size_t i = 0; i + 1 < truth.size(); ++i)
    out.push_back({mean_pool(sim::synth_flow(proxy, truth[i], truth[i + 1], k, size), 4),
                   rpr::make_rpr_target(truth[i], truth[i + 1])});
  return out;
}

rpr::RprNetwork train_rpr_stage(const ExperimentConfig& cfg, std::vector<double>* loss_trace) {
  std::vector<rpr::RprSample> data;
  for (int k = 0; k < cfg.scenario.train_trajectories; ++k) {
    auto s = rpr_samples(cfg, simulate_truth(cfg, k).poses);
    data.insert(data.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  auto net = rpr::RprNetwork::create(cfg.rpr.shape, sim::mix_seed(cfg.seed, kRprInit));
  nn::TrainConfig tc;
  tc.learning_rate = cfg.train.learning_rate;
  tc.batch_size = cfg.rpr.batch_size;
  tc.iterations = cfg.train.rpr_length();
  tc.seed = sim::mix_seed(cfg.seed, kRprTrain);
  auto res = rpr::train_rpr(net, data, tc, {cfg.rpr.beta2});
  if (loss_trace) *loss_trace = std::move(res.loss_trace);
  return net;
}

Dataset build_dataset(const ExperimentConfig& cfg, const rpr::RprNetwork* rpr) {
  require(!needs_rpr(cfg) || rpr, "build_dataset: the rpr relative source needs a network");
  Dataset data;
  std::optional<WarehouseMap> map;
  if (needs_map(cfg)) run_stage("sfm", [&] { map.emplace(cfg); });

  const auto& sc = cfg.scenario;
  auto simulated = [&](int k) {
    const auto gt = simulate_truth(cfg, k);
    fusion::Segment s;
    s.truth = gt.poses;
    run_stage("absolute", [&] {
      if (map) {
        s.absolute = map->localize_stream(gt.poses, 1000000 * (k + 1), data.sfm_failures);
      } else {
        s.absolute = sim::degrade_absolute(gt, sc.degradation, sim::mix_seed(cfg.seed, kAbsolute, std::uint64_t(k)))
                         .stream.poses;
      }
    });
    run_stage("relative", [&] {
      s.relative = rpr ? rpr_relative(cfg, *rpr, gt.poses) : relative_stream(gt.poses);
    });
    return s;
  };

  for (int k = 0; k < sc.train_trajectories; ++k) data.train.push_back(simulated(k));

  const bool from_files =
      cfg.pipeline.absolute == AbsoluteSource::kFile || cfg.pipeline.relative == RelativeSource::kFile;
  if (!from_files) {
    for (int k = 0; k < sc.test_trajectories; ++k) data.test.push_back(simulated(sc.train_trajectories + k));
    data.test_times = stamps(data.test.front().truth.size(), sc.rate_hz);
    return data;
  }

  run_stage("load", [&] {
    const auto& p = cfg.pipeline;
    const auto truth = read_pose_stream(p.truth_file);
    if (truth.size() < 2) fail(ErrorCode::kShapeMismatch, "truth stream needs at least two poses");
    fusion::Segment s;
    s.truth = truth.poses;
    if (p.absolute == AbsoluteSource::kFile) {
      s.absolute = read_pose_stream(p.absolute_file).poses;
    } else if (map) {
      s.absolute = map->localize_stream(truth.poses, 0, data.sfm_failures);
    } else {
      s.absolute = sim::degrade_absolute(truth, sc.degradation, sim::mix_seed(cfg.seed, kAbsolute, 999999)).stream.poses;
    }
    if (p.relative == RelativeSource::kFile) {
      s.relative = read_relative_stream(p.relative_file).deltas;
    } else {
      s.relative = rpr ? rpr_relative(cfg, *rpr, truth.poses) : relative_stream(truth.poses);
    }
    if (s.absolute.size() != s.truth.size() || s.relative.size() + 1 != s.truth.size())
      fail(ErrorCode::kShapeMismatch, "input streams need n absolute and n - 1 relative entries for n truth poses");
    data.test_times = truth.times;
    data.test.push_back(std::move(s));
  });
  return data;
}

fusion::FusionNet train_fusion_stage(const ExperimentConfig& cfg, std::span<const fusion::Segment> train,
                                     std::vector<double>* loss_trace) {
  const auto fc = effective_fusion(cfg);
  std::vector<fusion::FusionWindow> windows;
  for (const auto& s : train) {
    auto w = fusion::build_windows(s.absolute, s.relative, fc.n_t, s.truth);
    windows.insert(windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  auto net = fusion::FusionNet::create(fc, sim::mix_seed(cfg.seed, kFusionInit));
  auto res = fusion::train_fusion(net, windows, fusion_train_config(cfg));
  if (loss_trace) *loss_trace = std::move(res.loss_trace);
  return net;
}

std::vector<Pose> refine_pgo(const ExperimentConfig& cfg, const fusion::Segment& segment) {
  const int n = int(segment.absolute.size());
  return pgo::refine_stream(segment.absolute, segment.relative, cfg.pgo.weights,
                            pgo::plan_chunks(n, cfg.pgo.chunk_size, cfg.pgo.overlap), cfg.pgo.solve);
}

void write_report(const std::filesystem::path& path, const Report& report, bool runtime) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  std::vector<std::string> header{"method", "median_pos_m", "median_ori_deg", "improvement_pct"};
  if (runtime) header.push_back("runtime_s");
  csv::write_row(out, header);
  for (const auto& r : report.rows) {
    std::vector<std::string> row{r.method, csv::format(r.median_pos_m), csv::format(r.median_ori_deg),
                                 csv::format(r.improvement_pct)};
    if (runtime) row.push_back(csv::format(r.runtime_s));
    csv::write_row(out, row);
  }
  if (!out) fail(ErrorCode::kIo, "write failed: " + path.string());
}

Report run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto& out = cfg.out_dir;
  run_stage("output", [&] { std::filesystem::create_directories(out); });

  std::optional<rpr::RprNetwork> rpr_net;
  if (needs_rpr(cfg)) {
    run_stage("train-rpr", [&] {
      std::vector<double> trace;
      rpr_net = train_rpr_stage(cfg, &trace);
      rpr::save_rpr(out / "rpr.ckpt", *rpr_net);
      write_trace(out / "rpr_loss.csv", trace);
    });
  }

  auto t0 = Clock::now();
  const Dataset data = build_dataset(cfg, rpr_net ? &*rpr_net : nullptr);
  const double data_time = seconds_since(t0);
  const auto& test = data.test;
  run_stage("write", [&] {
    for (std::size_t k = 0; k < test.size(); ++k) {
      const auto times = stamps(test[k].truth.size(), cfg.scenario.rate_hz);
      const auto& t = k == 0 ? data.test_times : times;
      const auto stem = "test_" + std::to_string(k) + "_";
      write_poses(out / (stem + "truth.csv"), test[k].truth, t);
      write_poses(out / (stem + "absolute.csv"), test[k].absolute, t);
      write_relative(out / (stem + "relative.csv"), test[k].relative, t);
    }
  });

  const auto truth = concat(test, &fusion::Segment::truth);
  const auto absolute = concat(test, &fusion::Segment::absolute);
  Report report;
  const double base = median_position_error(absolute, truth);
  report.rows.push_back({"absolute", base, median_orientation_error(absolute, truth), 0.0, data_time});

  auto add_row = [&](const std::string& method, const std::vector<std::vector<Pose>>& streams, double runtime) {
    std::vector<Pose> all;
    for (std::size_t k = 0; k < streams.size(); ++k) {
      const auto times = stamps(streams[k].size(), cfg.scenario.rate_hz);
      write_poses(out / ("test_" + std::to_string(k) + "_" + method + ".csv"), streams[k],
                  k == 0 ? data.test_times : times);
      all.insert(all.end(), streams[k].begin(), streams[k].end());
    }
    const double pos = median_position_error(all, truth);
    report.rows.push_back({method, pos, median_orientation_error(all, truth), improvement_percent(base, pos), runtime});
  };

  const auto method = cfg.pipeline.fusion;
  if (method == FusionMethod::kPgo || method == FusionMethod::kAll) {
    run_stage("pgo", [&] {
      t0 = Clock::now();
      std::vector<std::vector<Pose>> streams;
      for (const auto& s : test) streams.push_back(refine_pgo(cfg, s));
      add_row("pgo", streams, seconds_since(t0));
    });
  }
  if (method == FusionMethod::kRecurrent || method == FusionMethod::kAll) {
    std::optional<fusion::FusionNet> net;
    run_stage("train-fusion", [&] {
      t0 = Clock::now();
      std::vector<double> trace;
      net = train_fusion_stage(cfg, data.train, &trace);
      fusion::save_fusion(out / "fusion.ckpt", *net);
      write_trace(out / "fusion_loss.csv", trace);
    });
    run_stage("recurrent", [&] {
      std::vector<std::vector<Pose>> streams;
      for (const auto& s : test) streams.push_back(fusion::fuse_stream(*net, s.absolute, s.relative));
      add_row("recurrent", streams, seconds_since(t0));
    });
  }
  run_stage("report", [&] { write_report(out / "report.csv", report, cfg.report_runtime); });
  return report;
}

std::vector<fusion::SweepRow> sweep_fusion(const ExperimentConfig& cfg) {
  cfg.validate();
  std::optional<rpr::RprNetwork> rpr_net;
  if (needs_rpr(cfg)) run_stage("train-rpr", [&] { rpr_net = train_rpr_stage(cfg); });
  const Dataset data = build_dataset(cfg, rpr_net ? &*rpr_net : nullptr);
  const auto& g = cfg.sweep_fusion;
  // vector<bool> has no contiguous storage to view.
  const auto stacking = std::make_unique<bool[]>(g.stacked.size());
  std::copy(g.stacked.begin(), g.stacked.end(), stacking.get());
  auto grid = fusion::sweep_grid(g.cells, {stacking.get(), g.stacked.size()}, g.n_t, g.r_u);
  if (g.control) {
    auto control = grid.front();
    control.iterations = 0;
    grid.push_back(control);
  }
  std::vector<fusion::SweepRow> rows;
  run_stage("sweep-fusion", [&] {
    rows = fusion::sweep_fusion(grid, data.train, data.test, effective_fusion(cfg), fusion_train_config(cfg));
  });
  return rows;
}

// --- sfm experiments ---

SfmRun run_sfm(const ExperimentConfig& cfg, const sfm::SfmConfig& sfm_config, const std::filesystem::path& out) {
  SfmRun run;
  run.config = sfm_config;
  try {
    sfm_config.validate();
    const auto& sc = cfg.scenario;
    const auto scenario = sim::make_sfm_scenario(sc.sfm_cameras, sc.sfm_landmarks, sc.sfm_queries,
                                                 sim::mix_seed(cfg.seed, kSfmScenario));
    const auto& k = scenario.intrinsics;
    sfm::ReconstructOptions opt;
    for (int i = 0; i < int(scenario.cameras.size()); ++i) opt.priors[i] = scenario.cameras[i];
    // The scenario's floor sits two units below its landmark volume.
    opt.floor = sfm::FloorGrid{-4, 4, -4, 4, -2.0, 0.25};
    opt.seed = sim::mix_seed(cfg.seed, kSfmMatches, 1);
    const auto rec =
        sfm::reconstruct(sim::scenario_matches(scenario, sc.match_noise, sim::mix_seed(cfg.seed, kSfmMatches)), k,
                         sfm_config, opt);
    run.observations = rec.observations();
    run.landmarks = int(rec.cloud.landmarks.size());
    run.cameras = int(rec.cloud.cameras.size());

    std::vector<Pose> est, gt;
    for (int q = 0; q < int(scenario.queries.size()); ++q) {
      std::vector<Match> qm;
      for (const auto& c : rec.cloud.cameras) {
        auto m = sim::synth_matches(scenario.landmarks, c.image, scenario.cameras[c.image], 100000 + q,
                                    scenario.queries[q], k, sc.match_noise, sim::mix_seed(cfg.seed, kSfmMatches));
        qm.insert(qm.end(), m.begin(), m.end());
      }
      sfm::LocalizeOptions lo;
      lo.threshold_px = sfm_config.register_limit();
      lo.seed = sim::mix_seed(cfg.seed, kSfmQueries, std::uint64_t(q));
      try {
        est.push_back(sfm::localize_query(sfm::query_correspondences(rec, qm), k, lo));
        gt.push_back(scenario.queries[q]);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kLocalizationFailure && e.code() != ErrorCode::kUnderConstrained) throw;
      }
    }
    run.localized = int(est.size());
    if (est.empty()) fail(ErrorCode::kLocalizationFailure, "no query could be localized");
    run.median_pos_m = median_position_error(est, gt);
    run.median_ori_deg = median_orientation_error(est, gt);
    if (!out.empty()) {
      std::filesystem::create_directories(out);
      sfm::write_point_cloud(out / "cloud.csv", rec.cloud);
      sfm::write_tracks(out / "tracks.csv", rec.tracks);
    }
  } catch (const Error& e) {
    run.failed = true;
    run.error = e.what();
    run.median_pos_m = run.median_ori_deg = std::nan("");
  }
  return run;
}

std::vector<SfmRun> sweep_sfm(const ExperimentConfig& cfg) {
  const auto& g = cfg.sweep_sfm;
  sfm::SfmConfig base = cfg.sfm;
  if (base.ex_init <= 0.0) base.ex_init = base.ex;
  if (base.ex_register <= 0.0) base.ex_register = base.ex;
  auto axis = [](const auto& v, auto fallback) {
    using T = decltype(fallback);
    return v.empty() ? std::vector<T>{fallback} : std::vector<T>(v.begin(), v.end());
  };
  const auto sc = axis(g.sc, base.sc), oc = axis(g.oc, base.oc), ex = axis(g.ex, base.ex), sd = axis(g.std, base.std);
  const auto mm = axis(g.mm, base.mm);
  const auto gibbs = axis(g.gibbs, base.gibbs);
  std::vector<SfmRun> rows;
  for (double a : sc)
    for (double b : oc)
      for (int c : mm)
        for (double d : ex)
          for (bool e : gibbs)
            for (double f : sd) {
              sfm::SfmConfig s = base;
              s.sc = a;
              s.oc = b;
              s.mm = c;
              s.ex = d;
              s.gibbs = e;
              s.std = f;
              rows.push_back(run_sfm(cfg, s));
            }
  return rows;
}

void write_sfm_runs(const std::filesystem::path& path, std::span<const SfmRun> runs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  csv::write_row(out, {"sc", "oc", "mm", "ex", "gibbs", "std", "observations", "landmarks", "cameras", "localized",
                       "median_pos_m", "median_ori_deg", "failed"});
  auto num = [](double x) { return std::isnan(x) ? std::string("nan") : csv::format(x); };
  for (const auto& r : runs) {
    const auto& c = r.config;
    csv::write_row(out, {csv::format(c.sc), csv::format(c.oc), std::to_string(c.mm), csv::format(c.ex),
                         c.gibbs ? "true" : "false", csv::format(c.std), std::to_string(r.observations),
                         std::to_string(r.landmarks), std::to_string(r.cameras), std::to_string(r.localized),
                         num(r.median_pos_m), num(r.median_ori_deg), r.failed ? "true" : "false"});
  }
  if (!out) fail(ErrorCode::kIo, "write failed: " + path.string());
}

}  // namespace locfuse::harness
