#include <fstream>
#include <set>
#include <sstream>

#include "locfuse/harness.hpp"

namespace locfuse::harness {
namespace {

using config::Document;

// Reads known keys and remembers them so the rest can be rejected.
struct Binder {
  const Document& doc;
  std::set<std::string> allowed;

  template <class T>
  void operator()(const std::string& key, T& target) {
    allowed.insert(key);
    doc.read(key, target);
  }

  template <class T, class F>
  void mapped(const std::string& key, T& target, F&& convert) {
    allowed.insert(key);
    if (!doc.has(key)) return;
    std::string text;
    doc.read(key, text);
    target = convert(text);
  }

  void path(const std::string& key, std::filesystem::path& target, const std::filesystem::path& base) {
    allowed.insert(key);
    if (!doc.has(key)) return;
    std::string text;
    doc.read(key, text);
    const std::filesystem::path p(text);
    target = p.is_absolute() || base.empty() ? p : base / p;
  }

  void vec3(const std::string& key, Vec3& target) {
    allowed.insert(key);
    if (!doc.has(key)) return;
    std::vector<double> v;
    doc.read(key, v);
    if (v.size() != 3) fail(ErrorCode::kConfig, "key '" + key + "' expects 3 numbers");
    target = Vec3(v[0], v[1], v[2]);
  }
};

[[noreturn]] void bad_choice(const std::string& what, const std::string& got) {
  fail(ErrorCode::kConfig, "unknown " + what + " '" + got + "'");
}

sim::MotionProfile profile_named(const std::string& s) {
  if (s == "robot") return sim::MotionProfile::robot();
  if (s == "handheld") return sim::MotionProfile::handheld();
  bad_choice("profile", s);
}

nn::CellKind cell_named(const std::string& s) {
  try {
    return nn::parse_cell_kind(s);
  } catch (const Error&) {
    bad_choice("cell", s);
  }
}

// Keys shared by the experiment config and a standalone scenario file.
void bind_scenario(Binder& b, ScenarioConfig& s) {
  b.mapped("scenario.profile", s.profile, profile_named);
  b("profile.speed_min", s.profile.speed_min);
  b("profile.speed_max", s.profile.speed_max);
  b("profile.yaw_rate_max", s.profile.yaw_rate_max);
  b("profile.jitter_pos", s.profile.jitter_pos);
  b("profile.jitter_rot", s.profile.jitter_rot);
  b("profile.camera_height", s.profile.camera_height);
  b.vec3("scene.box_min", s.scene.box_min);
  b.vec3("scene.box_max", s.scene.box_max);
  b("scene.landmark_count", s.scene.landmark_count);
  b("scene.rack_count", s.scene.rack_count);
  b("scene.hole_fraction", s.scene.hole_fraction);
  b("noise.sigma_p", s.degradation.sigma_p);
  b("noise.sigma_q", s.degradation.sigma_q_deg);
  b("noise.outlier_rate", s.degradation.outlier_rate);
  b("noise.outlier_magnitude", s.degradation.outlier_magnitude);
  b("noise.pixel_sigma", s.match_noise.sigma_px);
  b("noise.match_outliers", s.match_noise.outlier_rate);
  b("scenario.duration", s.duration_s);
  b("scenario.rate", s.rate_hz);
  b("scenario.train_trajectories", s.train_trajectories);
  b("scenario.test_trajectories", s.test_trajectories);
  b("scenario.sfm_cameras", s.sfm_cameras);
  b("scenario.sfm_landmarks", s.sfm_landmarks);
  b("scenario.sfm_queries", s.sfm_queries);
  b("scenario.keyframe_spacing", s.keyframe_spacing);
  b("scenario.keyframe_headings", s.keyframe_headings);
  b("scenario.query_keyframes", s.query_keyframes);
}

void bind_experiment(Binder& b, ExperimentConfig& c, const std::filesystem::path& base) {
  b("run.seed", c.seed);
  b.path("run.out", c.out_dir, {});
  b("run.report_runtime", c.report_runtime);

  bind_scenario(b, c.scenario);

  b("sfm.sc", c.sfm.sc);
  b("sfm.oc", c.sfm.oc);
  b("sfm.mm", c.sfm.mm);
  b("sfm.ex", c.sfm.ex);
  b("sfm.gibbs", c.sfm.gibbs);
  b("sfm.std", c.sfm.std);
  b("sfm.ex_init", c.sfm.ex_init);
  b("sfm.ex_register", c.sfm.ex_register);

  b("rpr.rows", c.rpr.shape.rows);
  b("rpr.cols", c.rpr.shape.cols);
  b("rpr.units", c.rpr.shape.units);
  b("rpr.beta2", c.rpr.beta2);
  b("rpr.batch_size", c.rpr.batch_size);

  b.mapped("fusion.cell", c.fusion.cell, cell_named);
  b("fusion.n_t", c.fusion.n_t);
  b("fusion.r_u", c.fusion.r_u);
  b("fusion.stacked", c.fusion.stacked);
  b("fusion.beta1", c.beta1);
  b("fusion.beta3", c.fusion.beta3);
  b("fusion.batch_size", c.fusion.batch_size);
  b("fusion.anchored", c.fusion.anchored);
  b("fusion.absolute_loss", c.absolute_loss);

  b("train.rpr_iterations", c.train.rpr_iterations);
  b("train.fusion_iterations", c.train.fusion_iterations);
  b("train.lr", c.train.learning_rate);
  b("train.long_schedule", c.train.long_schedule);

  b("pgo.w_abs_p", c.pgo.weights.abs_p);
  b("pgo.w_abs_q", c.pgo.weights.abs_q);
  b("pgo.w_rel_p", c.pgo.weights.rel_p);
  b("pgo.w_rel_q", c.pgo.weights.rel_q);
  b("pgo.chunk_size", c.pgo.chunk_size);
  b("pgo.overlap", c.pgo.overlap);
  b("pgo.max_iterations", c.pgo.solve.max_iterations);

  b.mapped("pipeline.absolute", c.pipeline.absolute, [](const std::string& s) {
    if (s == "degraded") return AbsoluteSource::kDegraded;
    if (s == "sfm") return AbsoluteSource::kSfm;
    if (s == "file") return AbsoluteSource::kFile;
    bad_choice("absolute source", s);
  });
  b.mapped("pipeline.relative", c.pipeline.relative, [](const std::string& s) {
    if (s == "exact") return RelativeSource::kExact;
    if (s == "rpr") return RelativeSource::kRpr;
    if (s == "file") return RelativeSource::kFile;
    bad_choice("relative source", s);
  });
  b.mapped("pipeline.fusion", c.pipeline.fusion, [](const std::string& s) {
    if (s == "none") return FusionMethod::kNone;
    if (s == "pgo") return FusionMethod::kPgo;
    if (s == "recurrent") return FusionMethod::kRecurrent;
    if (s == "all") return FusionMethod::kAll;
    bad_choice("fusion method", s);
  });
  b.path("pipeline.absolute_file", c.pipeline.absolute_file, base);
  b.path("pipeline.relative_file", c.pipeline.relative_file, base);
  b.path("pipeline.truth_file", c.pipeline.truth_file, base);

  b("sweep_sfm.sc", c.sweep_sfm.sc);
  b("sweep_sfm.oc", c.sweep_sfm.oc);
  b("sweep_sfm.mm", c.sweep_sfm.mm);
  b("sweep_sfm.ex", c.sweep_sfm.ex);
  b("sweep_sfm.gibbs", c.sweep_sfm.gibbs);
  b("sweep_sfm.std", c.sweep_sfm.std);

  b.allowed.insert("sweep_fusion.cells");
  if (b.doc.has("sweep_fusion.cells")) {
    std::vector<std::string> names;
    b.doc.read("sweep_fusion.cells", names);
    c.sweep_fusion.cells.clear();
    for (const auto& n : names) c.sweep_fusion.cells.push_back(cell_named(n));
  }
  b("sweep_fusion.stacked", c.sweep_fusion.stacked);
  b("sweep_fusion.n_t", c.sweep_fusion.n_t);
  b("sweep_fusion.r_u", c.sweep_fusion.r_u);
  b("sweep_fusion.control", c.sweep_fusion.control);
}

template <class T>
void positive(T v, const char* what) {
  if (!(v > T(0))) fail(ErrorCode::kConfig, std::string(what) + " must be positive");
}

}  // namespace

void ExperimentConfig::validate() const {
  try {
    scenario.profile.validate();
    scenario.scene.validate();
    sfm.validate();
    rpr.shape.validate();
    rpr::RprLossWeights{rpr.beta2}.validate();
    fusion.validate();
    pgo.weights.validate();
    if (pgo.chunk_size < 1 || pgo.overlap < 0 || pgo.overlap >= pgo.chunk_size)
      fail(ErrorCode::kConfig, "pgo needs chunk_size >= 1 and 0 <= overlap < chunk_size");
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kConfig) throw;
    fail(ErrorCode::kConfig, e.what());
  }
  positive(scenario.duration_s, "scenario.duration");
  positive(scenario.rate_hz, "scenario.rate");
  positive(scenario.train_trajectories, "scenario.train_trajectories");
  positive(scenario.test_trajectories, "scenario.test_trajectories");
  positive(scenario.sfm_cameras - 1, "scenario.sfm_cameras - 1");
  positive(scenario.sfm_landmarks, "scenario.sfm_landmarks");
  positive(scenario.sfm_queries, "scenario.sfm_queries");
  positive(scenario.keyframe_spacing, "scenario.keyframe_spacing");
  positive(scenario.keyframe_headings, "scenario.keyframe_headings");
  positive(scenario.query_keyframes, "scenario.query_keyframes");
  positive(rpr.batch_size, "rpr.batch_size");
  positive(beta1, "fusion.beta1");
  positive(train.learning_rate, "train.lr");
  positive(pgo.solve.max_iterations, "pgo.max_iterations");
  if (train.rpr_iterations < 0 || train.fusion_iterations < 0)
    fail(ErrorCode::kConfig, "iteration counts must be non-negative");
  const auto& d = scenario.degradation;
  if (d.sigma_p < 0 || d.sigma_q_deg < 0 || d.outlier_rate < 0 || d.outlier_rate > 1 || d.outlier_magnitude < 0)
    fail(ErrorCode::kConfig, "noise parameters out of range");
  if (scenario.match_noise.sigma_px < 0 || scenario.match_noise.outlier_rate < 0 ||
      scenario.match_noise.outlier_rate > 1)
    fail(ErrorCode::kConfig, "match noise out of range");
  if (sweep_fusion.cells.empty() || sweep_fusion.stacked.empty() || sweep_fusion.n_t.empty() ||
      sweep_fusion.r_u.empty())
    fail(ErrorCode::kConfig, "sweep_fusion axes must be non-empty");
  if (pipeline.absolute == AbsoluteSource::kFile && pipeline.absolute_file.empty())
    fail(ErrorCode::kConfig, "pipeline.absolute = file needs pipeline.absolute_file");
  if (pipeline.relative == RelativeSource::kFile && pipeline.relative_file.empty())
    fail(ErrorCode::kConfig, "pipeline.relative = file needs pipeline.relative_file");
  if ((pipeline.absolute == AbsoluteSource::kFile || pipeline.relative == RelativeSource::kFile) &&
      pipeline.truth_file.empty())
    fail(ErrorCode::kConfig, "file sources need pipeline.truth_file for evaluation");
  if (out_dir.empty()) fail(ErrorCode::kConfig, "run.out must not be empty");
}

ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir) {
  const auto doc = Document::parse(text);
  ExperimentConfig cfg;
  Binder main{doc, {}};
  std::filesystem::path spec;
  main.path("scenario.spec", spec, base_dir);
  if (!spec.empty()) {
    const auto spec_doc = Document::load(spec);
    Binder b{spec_doc, {}};
    bind_scenario(b, cfg.scenario);
    spec_doc.reject_unknown(b.allowed);
    cfg.scenario.spec = spec;
  }
  bind_experiment(main, cfg, base_dir);
  doc.reject_unknown(main.allowed);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kConfig, "cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.parent_path());
}

}  // namespace locfuse::harness
