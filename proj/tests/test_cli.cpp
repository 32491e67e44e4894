#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "locfuse_cli";

int run(const std::string& args, const fs::path& log = kRoot / "log.txt") {
  const std::string cmd = std::string(LOCFUSE_CLI) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

fs::path write_config(const std::string& name, const std::string& text) {
  fs::create_directories(kRoot);
  const auto p = kRoot / name;
  std::ofstream(p) << text;
  return p;
}

const char* kSmall = R"(
[scenario]
duration = 15
train_trajectories = 2
test_trajectories = 1
sfm_cameras = 6
sfm_landmarks = 120
sfm_queries = 5
[sfm]
oc = 0
[rpr]
rows = 6
cols = 8
units = 4
[train]
rpr_iterations = 30
fusion_iterations = 60
lr = 1e-3
[fusion]
batch_size = 16
n_t = 5
r_u = 4
[sweep_sfm]
ex = [0.6, 4]
[sweep_fusion]
cells = ["TRNN"]
n_t = [4]
r_u = [4]
)";

}  // namespace

TEST_CASE("exit codes") {
  const auto cfg = write_config("small.toml", kSmall);
  CHECK(run("") == 1);
  CHECK(run("--help") == 0);
  CHECK(run("frobnicate") == 1);
  CHECK(run("eval --bogus") == 1);
  CHECK(run("eval --config " + (kRoot / "missing.toml").string()) == 1);
  CHECK(run("eval --seed notanumber") == 1);
  const auto bad = write_config("bad.toml", "[sfm]\nexx = 3\n");
  CHECK(run("eval --config " + bad.string()) == 1);
  CHECK(slurp(kRoot / "log.txt").find("exx") != std::string::npos);

  const auto missing = write_config("missing_input.toml", std::string(kSmall) +
                                                              "[pipeline]\nabsolute = \"file\"\n"
                                                              "absolute_file = \"nowhere.csv\"\n"
                                                              "truth_file = \"nowhere_truth.csv\"\n");
  const auto out = kRoot / "fail";
  CHECK(run("eval --config " + missing.string() + " --out " + out.string()) == 2);
  CHECK(slurp(kRoot / "log.txt").find("stage load") != std::string::npos);

  // No image pair clears a 100 % floor overlap.
  const auto sfm_fail = write_config("sfm_fail.toml", "[sfm]\noc = 100\n");
  CHECK(run("sfm --config " + sfm_fail.string() + " --out " + out.string()) == 2);
  CHECK(slurp(kRoot / "log.txt").find("stage sfm") != std::string::npos);
}

TEST_CASE("every subcommand is deterministic") {
  const auto cfg = write_config("small.toml", kSmall);
  for (const char* cmd :
       {"simulate", "sfm", "train-rpr", "train-fusion", "pgo", "eval", "sweep-sfm", "sweep-fusion"}) {
    CAPTURE(cmd);
    const auto a = kRoot / "det" / cmd / "a", b = kRoot / "det" / cmd / "b";
    fs::remove_all(a);
    fs::remove_all(b);
    REQUIRE(run(std::string(cmd) + " --config " + cfg.string() + " --seed 7 --out " + a.string()) == 0);
    REQUIRE(run(std::string(cmd) + " --config " + cfg.string() + " --seed 7 --out " + b.string()) == 0);
    const auto ta = tree(a), tb = tree(b);
    CHECK_FALSE(ta.empty());
    CHECK(ta.size() == tb.size());
    for (const auto& [name, bytes] : ta) {
      CAPTURE(name);
      CHECK(tb.count(name) == 1);
      if (tb.count(name)) CHECK(bytes == tb.at(name));
    }
  }
}

TEST_CASE("seed and output overrides") {
  const auto cfg = write_config("small.toml", kSmall);
  const auto a = kRoot / "seed" / "a", b = kRoot / "seed" / "b";
  fs::remove_all(kRoot / "seed");
  REQUIRE(run("pgo --config " + cfg.string() + " --seed 1 --out " + a.string()) == 0);
  REQUIRE(run("pgo --config " + cfg.string() + " --seed 2 --out " + b.string()) == 0);
  CHECK(slurp(a / "report.csv") != slurp(b / "report.csv"));
  CHECK(fs::exists(a / "test_0_pgo.csv"));
}
