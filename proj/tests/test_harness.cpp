#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "locfuse/config.hpp"
#include "locfuse/csv.hpp"
#include "locfuse/error.hpp"
#include "locfuse/harness.hpp"

using namespace locfuse;
using namespace locfuse::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "locfuse_harness" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kInvalidArgument;
}

// Short, fast experiment on the degraded/exact sources.
ExperimentConfig small(const fs::path& out) {
  ExperimentConfig c;
  c.out_dir = out;
  c.scenario.duration_s = 20.0;
  c.scenario.train_trajectories = 2;
  c.scenario.test_trajectories = 1;
  c.train.fusion_iterations = 200;
  c.train.learning_rate = 1e-3;
  c.fusion.batch_size = 32;
  return c;
}

// Median of per-pose distances, written out independently of the library.
double median_distance(const std::vector<Pose>& a, const std::vector<Pose>& b) {
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) d.push_back((a[i].p - b[i].p).norm());
  std::sort(d.begin(), d.end());
  const auto n = d.size();
  return n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
}

}  // namespace

TEST_CASE("config document") {
  using config::Document;
  SUBCASE("sections, scalars, arrays and comments") {
    const auto doc = Document::parse(R"(
top = 3   # trailing comment
[a]
flag = true
x = -2.5e-1
name = "q\"uote\\d"
list = [1, 2.5, 3,]
words = ["x", "y"]
empty = []
[b]
big = 1_000
)");
    bool flag = false;
    double x = 0, big = 0;
    int top = 0;
    std::string name;
    std::vector<double> list;
    std::vector<std::string> words;
    std::vector<int> empty{1};
    doc.read("a.flag", flag);
    doc.read("a.x", x);
    doc.read("top", top);
    doc.read("a.name", name);
    doc.read("a.list", list);
    doc.read("a.words", words);
    doc.read("a.empty", empty);
    doc.read("b.big", big);
    CHECK(flag);
    CHECK(x == -0.25);
    CHECK(top == 3);
    CHECK(name == "q\"uote\\d");
    CHECK(list == std::vector<double>{1, 2.5, 3});
    CHECK(words == std::vector<std::string>{"x", "y"});
    CHECK(empty.empty());
    CHECK(big == 1000);
    CHECK(doc.keys().size() == 8);
  }
  SUBCASE("absent keys leave defaults, scalars widen to lists") {
    const auto doc = Document::parse("[s]\nv = 4\n");
    int keep = 7;
    doc.read("s.missing", keep);
    CHECK(keep == 7);
    std::vector<int> v;
    doc.read("s.v", v);
    CHECK(v == std::vector<int>{4});
  }
  SUBCASE("malformed input") {
    for (const char* text : {"x = ", "x 1", "[s\nx = 1", "x = \"open", "x = [1, 2", "x = 1 2", "x = 1\nx = 2",
                             "x = [[1]]", "x = 1.2.3", "= 4", "x = \"\\q\""})
      CHECK(code_of([&] { Document::parse(text); }) == ErrorCode::kConfig);
  }
  SUBCASE("type mismatches") {
    const auto doc = Document::parse("a = \"s\"\nb = 1.5\nc = [1, true]\nd = -1\n");
    double x;
    int i;
    bool f;
    std::vector<double> v;
    std::uint64_t u;
    CHECK(code_of([&] { doc.read("a", x); }) == ErrorCode::kConfig);
    CHECK(code_of([&] { doc.read("b", i); }) == ErrorCode::kConfig);
    CHECK(code_of([&] { doc.read("b", f); }) == ErrorCode::kConfig);
    CHECK(code_of([&] { doc.read("c", v); }) == ErrorCode::kConfig);
    CHECK(code_of([&] { doc.read("d", u); }) == ErrorCode::kConfig);
  }
  SUBCASE("unknown keys") {
    const auto doc = Document::parse("[s]\nknown = 1\nother = 2\n");
    CHECK(code_of([&] { doc.reject_unknown({"s.known"}); }) == ErrorCode::kConfig);
    CHECK_NOTHROW(doc.reject_unknown({"s.known", "s.other"}));
  }
}

TEST_CASE("experiment config") {
  SUBCASE("empty text gives the defaults") {
    const auto c = parse_config("");
    const ExperimentConfig d;
    CHECK(c.seed == d.seed);
    CHECK(c.sfm.ex == d.sfm.ex);
    CHECK(c.fusion.n_t == 15);
    CHECK(c.fusion.r_u == 10);
    CHECK(c.train.fusion_length() == 5000);
    CHECK(c.train.rpr_length() == 5000);
    CHECK(c.pgo.chunk_size == 100);
    CHECK(c.pgo.overlap == 20);
  }
  SUBCASE("named symbols land in their fields") {
    const auto c = parse_config(R"(
[run]
seed = 42
[sfm]
sc = 1.5
oc = 3
mm = 4
ex = 0.6
gibbs = true
std = 2.5
[fusion]
cell = "LSTM"
n_t = 10
r_u = 5
stacked = false
beta1 = 40
beta3 = 30
[rpr]
beta2 = 20
[train]
long_schedule = true
[pipeline]
absolute = "sfm"
relative = "rpr"
fusion = "pgo"
[sweep_sfm]
ex = [0.1, 0.3, 0.6]
gibbs = [false, true]
[sweep_fusion]
cells = ["TRNN", "GRU"]
n_t = [3, 6]
)");
    CHECK(c.seed == 42);
    CHECK(c.sfm.sc == 1.5);
    CHECK(c.sfm.oc == 3.0);
    CHECK(c.sfm.mm == 4);
    CHECK(c.sfm.ex == 0.6);
    CHECK(c.sfm.gibbs);
    CHECK(c.sfm.std == 2.5);
    CHECK(c.fusion.cell == nn::CellKind::kLstm);
    CHECK(c.fusion.n_t == 10);
    CHECK(c.fusion.r_u == 5);
    CHECK_FALSE(c.fusion.stacked);
    CHECK(c.beta1 == 40.0);
    CHECK(c.fusion.beta3 == 30.0);
    CHECK(c.rpr.beta2 == 20.0);
    CHECK(c.train.rpr_length() == 150000);
    CHECK(c.train.fusion_length() == 75000);
    CHECK(c.pipeline.absolute == AbsoluteSource::kSfm);
    CHECK(c.pipeline.relative == RelativeSource::kRpr);
    CHECK(c.pipeline.fusion == FusionMethod::kPgo);
    CHECK(c.sweep_sfm.ex == std::vector<double>{0.1, 0.3, 0.6});
    CHECK(c.sweep_sfm.gibbs == std::vector<bool>{false, true});
    CHECK(c.sweep_fusion.cells == std::vector<nn::CellKind>{nn::CellKind::kTrnn, nn::CellKind::kGru});
    CHECK(c.sweep_fusion.n_t == std::vector<int>{3, 6});
  }
  SUBCASE("scenario file first, inline keys on top") {
    const auto dir = scratch("spec");
    std::ofstream(dir / "scene.toml") << "[scenario]\nprofile = \"handheld\"\nduration = 12\n[noise]\nsigma_p = 0.4\n"
                                         "[scene]\nbox_max = [30, 20, 3]\n";
    std::ofstream(dir / "exp.toml") << "[scenario]\nspec = \"scene.toml\"\nduration = 8\n";
    const auto c = load_config(dir / "exp.toml");
    CHECK(c.scenario.profile.kind == sim::ProfileKind::kHandheld);
    CHECK(c.scenario.duration_s == 8.0);
    CHECK(c.scenario.degradation.sigma_p == 0.4);
    CHECK(c.scenario.scene.box_max == Vec3(30, 20, 3));
    std::ofstream(dir / "bad.toml") << "[scenario]\nspec = \"scene_bad.toml\"\n";
    std::ofstream(dir / "scene_bad.toml") << "[sfm]\nex = 1\n";
    CHECK(code_of([&] { load_config(dir / "bad.toml"); }) == ErrorCode::kConfig);
  }
  SUBCASE("rejections") {
    for (const char* text : {"[sfm]\nexx = 1\n", "[sfm]\nex = \"big\"\n", "[sfm]\nmm = 2.5\n", "[fusion]\ncell = \"XYZ\"\n",
                             "[fusion]\nn_t = 0\n", "[pipeline]\nabsolute = \"gps\"\n", "[pipeline]\nabsolute = \"file\"\n",
                             "[pgo]\noverlap = 100\n", "[train]\nlr = 0\n", "[noise]\noutlier_rate = 2\n",
                             "[sweep_fusion]\nn_t = []\n", "[scene]\nbox_min = [1, 2]\n"})
      CHECK_MESSAGE(code_of([&] { parse_config(text); }) == ErrorCode::kConfig, text);
    CHECK(code_of([] { load_config("/nonexistent/locfuse.toml"); }) == ErrorCode::kConfig);
  }
}

TEST_CASE("pipeline") {
  SUBCASE("fusion none: only the absolute row") {
    auto c = small(scratch("none"));
    c.pipeline.fusion = FusionMethod::kNone;
    const auto r = run_pipeline(c);
    REQUIRE(r.rows.size() == 1);
    CHECK(r.rows[0].method == "absolute");
    CHECK(r.rows[0].improvement_pct == 0.0);
    const auto t = csv::read(c.out_dir / "report.csv", {"method", "median_pos_m", "median_ori_deg", "improvement_pct"});
    REQUIRE(t.rows.size() == 1);
    CHECK(t.rows[0][3] == "0");
  }
  SUBCASE("degraded absolute, exact relative, pgo: improves on the absolute stream") {
    auto c = small(scratch("pgo"));
    c.pipeline.fusion = FusionMethod::kPgo;
    const auto r = run_pipeline(c);
    REQUIRE(r.rows.size() == 2);
    // Recompute from the written streams.
    const auto truth = read_pose_stream(c.out_dir / "test_0_truth.csv").poses;
    const auto abs = read_pose_stream(c.out_dir / "test_0_absolute.csv").poses;
    const auto refined = read_pose_stream(c.out_dir / "test_0_pgo.csv").poses;
    const double base = median_distance(abs, truth), after = median_distance(refined, truth);
    const double expected = 100.0 * (base - after) / base;
    MESSAGE("pgo improvement ", expected, " %");
    CHECK(expected > 0.0);
    CHECK(r.rows[1].improvement_pct == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("every row's improvement follows its own columns") {
    auto c = small(scratch("all"));
    const auto r = run_pipeline(c);
    REQUIRE(r.rows.size() == 3);
    CHECK(r.rows[1].method == "pgo");
    CHECK(r.rows[2].method == "recurrent");
    for (const auto& row : r.rows)
      CHECK(row.improvement_pct == improvement_percent(r.rows[0].median_pos_m, row.median_pos_m));
    std::set<std::string> files;
    for (const auto& e : fs::directory_iterator(c.out_dir)) files.insert(e.path().filename().string());
    CHECK(files == std::set<std::string>{"fusion.ckpt", "fusion_loss.csv", "report.csv", "test_0_absolute.csv",
                                         "test_0_pgo.csv", "test_0_recurrent.csv", "test_0_relative.csv",
                                         "test_0_truth.csv"});
  }
  SUBCASE("same seed, byte-identical artifacts") {
    auto a = small(scratch("det_a"));
    auto b = small(scratch("det_b"));
    run_pipeline(a);
    run_pipeline(b);
    for (const auto& e : fs::directory_iterator(a.out_dir))
      CHECK_MESSAGE(slurp(e.path()) == slurp(b.out_dir / e.path().filename()), e.path().filename().string());
    auto c = small(scratch("det_c"));
    c.seed = 2;
    run_pipeline(c);
    CHECK(slurp(a.out_dir / "report.csv") != slurp(c.out_dir / "report.csv"));
  }
  SUBCASE("runtime column on request") {
    auto c = small(scratch("runtime"));
    c.pipeline.fusion = FusionMethod::kPgo;
    c.report_runtime = true;
    run_pipeline(c);
    const auto t = csv::read(c.out_dir / "report.csv",
                             {"method", "median_pos_m", "median_ori_deg", "improvement_pct", "runtime_s"});
    CHECK(t.rows.size() == 2);
  }
  SUBCASE("file sources round trip the simulated streams") {
    auto sim_cfg = small(scratch("files_src"));
    sim_cfg.pipeline.fusion = FusionMethod::kPgo;
    const auto direct = run_pipeline(sim_cfg);
    auto c = small(scratch("files"));
    c.pipeline = {AbsoluteSource::kFile, RelativeSource::kFile, FusionMethod::kPgo,
                  sim_cfg.out_dir / "test_0_absolute.csv", sim_cfg.out_dir / "test_0_relative.csv",
                  sim_cfg.out_dir / "test_0_truth.csv"};
    const auto r = run_pipeline(c);
    REQUIRE(r.rows.size() == 2);
    CHECK(r.rows[0].median_pos_m == direct.rows[0].median_pos_m);
    CHECK(r.rows[1].median_pos_m == doctest::Approx(direct.rows[1].median_pos_m).epsilon(1e-9));
  }
  SUBCASE("a failing stage is named") {
    auto c = small(scratch("fail"));
    c.pipeline.absolute = AbsoluteSource::kFile;
    c.pipeline.absolute_file = c.out_dir / "missing.csv";
    c.pipeline.truth_file = c.out_dir / "missing_truth.csv";
    try {
      run_pipeline(c);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kStage);
      CHECK(std::string(e.what()).find("stage load") == 0);
    }
  }
  SUBCASE("sfm absolute and rpr relative sources") {
    auto c = small(scratch("sources"));
    c.scenario.duration_s = 10.0;
    c.scenario.keyframe_headings = 4;
    c.pipeline = {AbsoluteSource::kSfm, RelativeSource::kRpr, FusionMethod::kPgo, {}, {}, {}};
    c.train.rpr_iterations = 300;
    const auto r = run_pipeline(c);
    REQUIRE(r.rows.size() == 2);
    MESSAGE("sfm absolute median ", r.rows[0].median_pos_m, " m");
    CHECK(r.rows[0].median_pos_m < 0.05);
    CHECK(fs::exists(c.out_dir / "rpr.ckpt"));
    CHECK(fs::exists(c.out_dir / "rpr_loss.csv"));
    const auto rel = read_relative_stream(c.out_dir / "test_0_relative.csv");
    CHECK(rel.size() == 99);
  }
}

TEST_CASE("sfm sweep") {
  ExperimentConfig c;
  c.sfm.oc = 0.0;

  SUBCASE("single-point grid") {
    const auto rows = sweep_sfm(c);
    REQUIRE(rows.size() == 1);
    CHECK_FALSE(rows[0].failed);
    CHECK(rows[0].cameras == 10);
    CHECK(rows[0].localized == 20);
    CHECK(rows[0].median_pos_m < 0.05);
  }
  SUBCASE("ex grid on a noisy scene: observation counts never drop") {
    c.sweep_sfm.ex = {0.1, 0.3, 0.6};
    c.scenario.match_noise = {0.1, 0.1};
    const auto rows = sweep_sfm(c);
    REQUIRE(rows.size() == 3);
    for (const auto& r : rows) {
      CHECK_FALSE(r.failed);
      CHECK(r.config.ex_init == c.sfm.ex);
      CHECK(r.config.ex_register == c.sfm.ex);
    }
    MESSAGE("observations ", rows[0].observations, " ", rows[1].observations, " ", rows[2].observations);
    CHECK(rows[0].observations <= rows[1].observations);
    CHECK(rows[1].observations <= rows[2].observations);
  }
  SUBCASE("gibbs off matches a direct run") {
    c.sweep_sfm.gibbs = {false};
    const auto rows = sweep_sfm(c);
    REQUIRE(rows.size() == 1);
    auto direct_cfg = c.sfm;
    direct_cfg.ex_init = direct_cfg.ex_register = c.sfm.ex;
    const auto direct = run_sfm(c, direct_cfg);
    CHECK(rows[0].observations == direct.observations);
    CHECK(rows[0].landmarks == direct.landmarks);
    CHECK(rows[0].median_pos_m == direct.median_pos_m);
    CHECK(rows[0].median_ori_deg == direct.median_ori_deg);
    // Unset limits follow ex, so the direct run with defaults agrees too.
    const auto plain = run_sfm(c, c.sfm);
    CHECK(plain.observations == direct.observations);
  }
  SUBCASE("failures become flagged rows") {
    c.sweep_sfm.oc = {0.0, 100.0};
    const auto rows = sweep_sfm(c);
    REQUIRE(rows.size() == 2);
    CHECK_FALSE(rows[0].failed);
    CHECK(rows[1].failed);
    CHECK_FALSE(rows[1].error.empty());
    const auto path = scratch("sweep_sfm") / "sweep.csv";
    write_sfm_runs(path, rows);
    const auto t = csv::read(path, {"sc", "oc", "mm", "ex", "gibbs", "std", "observations", "landmarks", "cameras",
                                    "localized", "median_pos_m", "median_ori_deg", "failed"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[1][1] == "100");
    CHECK(t.rows[1][10] == "nan");
    CHECK(t.rows[1][12] == "true");
  }
  SUBCASE("grid product size") {
    c.sweep_sfm.sc = {0.0, 2.0};
    c.sweep_sfm.mm = {3, 5};
    c.sweep_sfm.gibbs = {false, true};
    c.scenario.sfm_cameras = 4;
    c.scenario.sfm_landmarks = 60;
    c.scenario.sfm_queries = 3;
    CHECK(sweep_sfm(c).size() == 8);
  }
}

TEST_CASE("fusion sweep from config") {
  auto c = small(scratch("sweep_fusion"));
  c.sweep_fusion.cells = {nn::CellKind::kTrnn};
  c.sweep_fusion.n_t = {6};
  const auto rows = sweep_fusion(c);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].entry.iterations == 200);
  CHECK(rows[1].entry.iterations == 0);
  CHECK(rows[0].rank == 1);
  CHECK(rows[1].rank == 2);
}
