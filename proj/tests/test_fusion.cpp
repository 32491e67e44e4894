#include <chrono>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "doctest.h"
#include "locfuse/csv.hpp"
#include "locfuse/error.hpp"
#include "locfuse/fusion.hpp"
#include "locfuse/sim.hpp"

using namespace locfuse;
using namespace locfuse::fusion;
using nn::CellKind;

namespace {

std::vector<Pose> random_walk(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Pose> out;
  Pose p{{20.0, 15.0, 0.8}, rotation_exp(Vec3(0.3, -0.2, 1.0))};
  for (int i = 0; i < n; ++i) {
    p.p += Vec3(0.05 * g(rng), 0.05 * g(rng), 0.005 * g(rng));
    p.q = canonicalize((p.q * rotation_exp(Vec3(0.01 * g(rng), 0.01 * g(rng), 0.05 * g(rng)))).normalized());
    out.push_back(p);
  }
  return out;
}

std::vector<Pose> jitter(std::vector<Pose> poses, double sp, double sq, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& p : poses) {
    p.p += sp * Vec3(g(rng), g(rng), g(rng));
    p.q = canonicalize((p.q * rotation_exp(sq * Vec3(g(rng), g(rng), g(rng)))).normalized());
  }
  return poses;
}

void randomize(nn::ParamSet& p, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (Eigen::Index k = 0; k < p[i].size(); ++k) p[i].data()[k] = u(rng);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Windows with targets drawn from a random walk and a noisy copy of it.
std::vector<FusionWindow> toy_windows(int n, int n_t, std::uint64_t seed) {
  const auto truth = random_walk(n, seed);
  const auto noisy = jitter(truth, 0.1, 0.02, seed + 1);
  return build_windows(noisy, relative_stream(truth), n_t, truth);
}

Segment sim_segment(std::uint64_t seed, double duration) {
  const auto gt = sim::generate_trajectory(sim::MotionProfile::robot(), sim::SceneSpec{}, duration, 10.0, seed);
  Segment s;
  s.absolute = sim::degrade_absolute(gt, {0.2, 1.0, 0.05, 1.0}, seed + 100).stream.poses;
  s.truth = gt.poses;
  s.relative = relative_stream(gt.poses);
  return s;
}

}  // namespace

TEST_CASE("window construction") {
  const auto poses = random_walk(30, 1);
  const auto rel = relative_stream(poses);

  CHECK(build_windows(std::span(poses).first(25), std::span(rel).first(24), 25).size() == 1);

  const auto w = build_windows(poses, rel, 10, poses);
  REQUIRE(w.size() == 21);
  for (int s = 0; s <= 20; ++s) {
    CHECK(w[s].last == s + 9);
    REQUIRE(w[s].target);
    CHECK(w[s].target->p == poses[s + 9].p);
    REQUIRE(w[s].features.rows() == 10);
    REQUIRE(w[s].features.cols() == 14);
    for (int t = 0; t < 10; ++t) {
      const int i = s + t;
      const Vec4 q = to_wxyz(poses[i].q);
      const RelativePose r = i == 0 ? RelativePose{} : rel[i - 1];
      const Vec4 dq = to_wxyz(r.dq);
      const double expect[14] = {poses[i].p.x(), poses[i].p.y(), poses[i].p.z(), q(0),      q(1), q(2), q(3),
                                 r.dp.x(),       r.dp.y(),       r.dp.z(),       dq(0), dq(1), dq(2), dq(3)};
      for (int c = 0; c < 14; ++c) CHECK(w[s].features(t, c) == expect[c]);
    }
  }
  CHECK(w[0].features.row(0).tail<7>() == (Eigen::Matrix<double, 1, 7>() << 0, 0, 0, 1, 0, 0, 0).finished());
  CHECK_FALSE(build_windows(poses, rel, 10).front().target);

  CHECK_THROWS_AS(build_windows(std::span(poses).first(5), std::span(rel).first(4), 6), Error);
  CHECK_THROWS_AS(build_windows(poses, std::span(rel).first(20), 5), Error);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + int(rng() % 30), n_t = 1 + int(rng() % n);
    const auto p = random_walk(n, trial);
    CHECK(build_windows(p, relative_stream(p), n_t).size() == std::size_t(n - n_t + 1));
  }
}

TEST_CASE("network layout") {
  for (CellKind k : nn::kAllCellKinds) {
    FusionConfig cfg;
    cfg.cell = k;
    cfg.r_u = 7;
    const auto stacked = FusionNet::create(cfg, 1);
    REQUIRE(stacked.stack.specs.size() == 2);
    CHECK(stacked.stack.specs[0] == nn::CellSpec{k, 14, 14});
    CHECK(stacked.stack.specs[1] == nn::CellSpec{k, 14, 7});
    CHECK(stacked.heads.at("fc_p.w").rows() == 3);
    CHECK(stacked.heads.at("fc_p.w").cols() == 7);
    CHECK(stacked.heads.at("fc_q.w").rows() == 4);
    CHECK(stacked.scalar_count() == nn::param_count({k, 14, 7}, true) + 7 * 7 + 7);
    cfg.stacked = false;
    const auto single = FusionNet::create(cfg, 1);
    REQUIRE(single.stack.specs.size() == 1);
    CHECK(single.stack.specs[0] == nn::CellSpec{k, 14, 7});
  }
  FusionConfig bad;
  bad.n_t = 0;
  CHECK_THROWS_AS(FusionNet::create(bad, 1), Error);
  bad = {};
  bad.beta3 = 0.0;
  CHECK_THROWS_AS(FusionNet::create(bad, 1), Error);
}

TEST_CASE("forward pass") {
  const auto windows = toy_windows(20, 4, 3);

  SUBCASE("zero weights give the head biases") {
    FusionConfig cfg;
    cfg.n_t = 4;
    cfg.anchored = false;
    auto net = FusionNet::create(cfg, 2);
    for (auto& p : net.stack.params)
      for (std::size_t i = 0; i < p.size(); ++i) p[i].setZero();
    for (std::size_t i = 0; i < net.heads.size(); ++i) net.heads[i].setZero();
    net.heads.at("fc_p.b") << 1.0, -2.0, 0.5;
    net.heads.at("fc_q.b") << 0.0, 0.0, -3.0, 4.0;
    for (const auto& w : windows) {
      const Pose out = fusion_forward(net, w);
      CHECK(out.p == Vec3(1.0, -2.0, 0.5));
      CHECK((to_wxyz(out.q) - Vec4(0.0, 0.0, 0.6, -0.8)).norm() < 1e-15);
    }
    // Anchored: the same biases act as a correction to the last absolute pose.
    net.config.anchored = true;
    const auto& w = windows[5];
    const Pose a{w.features.row(3).head<3>().transpose(), from_wxyz(w.features.row(3).segment<4>(3).transpose())};
    const Pose out = fusion_forward(net, w);
    CHECK((out.p - (a.p + a.rotation() * Vec3(1.0, -2.0, 0.5))).norm() < 1e-12);
    CHECK(rotation_angle(out.q, a.q * from_wxyz(Vec4(0.0, 0.0, -0.6, 0.8))) < 1e-9);
  }

  SUBCASE("tiny TRNN matches a manual unroll") {
    FusionConfig cfg;
    cfg.n_t = 2;
    cfg.r_u = 2;
    cfg.stacked = false;
    cfg.anchored = false;
    auto net = FusionNet::create(cfg, 5);
    std::mt19937_64 rng(6);
    randomize(net.stack.params[0], rng, 0.3);
    randomize(net.heads, rng, 0.5);
    const auto w2 = toy_windows(6, 2, 8);
    const auto& p = net.stack.params[0];
    for (const auto& w : w2) {
      double h[2] = {0.0, 0.0};
      for (int t = 0; t < 2; ++t) {
        for (int j = 0; j < 2; ++j) {
          double z = p.at("b_z")(j), f = p.at("b_f")(j);
          for (int c = 0; c < 14; ++c) {
            z += p.at("W")(j, c) * w.features(t, c);
            f += p.at("V")(j, c) * w.features(t, c);
          }
          f = sigmoid(f);
          h[j] = f * h[j] + (1.0 - f) * z;
        }
      }
      Vec3 pos;
      Vec4 q;
      for (int r = 0; r < 3; ++r)
        pos(r) = net.heads.at("fc_p.b")(r) + net.heads.at("fc_p.w")(r, 0) * h[0] + net.heads.at("fc_p.w")(r, 1) * h[1];
      for (int r = 0; r < 4; ++r)
        q(r) = net.heads.at("fc_q.b")(r) + net.heads.at("fc_q.w")(r, 0) * h[0] + net.heads.at("fc_q.w")(r, 1) * h[1];
      const FusionWindow* one[] = {&w};
      const auto raw = fusion_forward_batch(net, one);
      CHECK((raw.p.col(0) - pos).norm() < 1e-13);
      CHECK((raw.q.col(0) - q).norm() < 1e-13);
      const Pose out = fusion_forward(net, w);
      CHECK((to_wxyz(out.q) - to_wxyz(canonicalize(from_wxyz(q / q.norm())))).norm() < 1e-13);
    }
  }

  SUBCASE("deterministic and unit-norm") {
    for (CellKind k : nn::kAllCellKinds) {
      FusionConfig cfg;
      cfg.cell = k;
      cfg.n_t = 4;
      const auto a = FusionNet::create(cfg, 11), b = FusionNet::create(cfg, 11);
      for (const auto& w : windows) {
        const Pose x = fusion_forward(a, w), y = fusion_forward(b, w);
        CHECK(x.p == y.p);
        CHECK(to_wxyz(x.q) == to_wxyz(y.q));
        CHECK(std::abs(x.q.norm() - 1.0) < 1e-9);
      }
    }
  }

  SUBCASE("shape mismatch") {
    FusionConfig cfg;
    cfg.n_t = 5;
    const auto net = FusionNet::create(cfg, 1);
    CHECK_THROWS_AS(fusion_forward(net, windows[0]), Error);
  }
}

TEST_CASE("fusion loss") {
  const Pose gt{{1.0, 2.0, 3.0}, rotation_exp(Vec3(0.2, 0.1, -0.4))};
  CHECK(fusion_loss(gt, gt, 50.0) == doctest::Approx(0.0).epsilon(1e-15));
  const Pose off{gt.p + Vec3(1.0, 2.0, 2.0), gt.q};
  CHECK(fusion_loss(off, gt, 50.0) == doctest::Approx(9.0).epsilon(1e-14));

  // Quaternions 90 degrees apart differ by 2 - 2 cos(45 deg) in squared norm.
  const Pose turned{gt.p + Vec3(0.0, 3.0, 4.0), gt.q * rotation_exp(Vec3(0.0, 0.0, std::numbers::pi / 2))};
  const double expected = 25.0 + 50.0 * (2.0 - std::sqrt(2.0));
  CHECK(fusion_loss(turned, gt, 50.0) == doctest::Approx(expected).epsilon(1e-12));

  // Targets are normalized, the prediction is taken as given.
  Pose scaled = gt;
  scaled.q.coeffs() *= 3.0;
  CHECK(fusion_loss(gt.p, to_wxyz(gt.q), scaled, 50.0) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(fusion_loss(gt.p, 2.0 * to_wxyz(gt.q), gt, 50.0) == doctest::Approx(50.0).epsilon(1e-12));

  Pose zero = gt;
  zero.q.coeffs().setZero();
  try {
    fusion_loss(gt, zero, 50.0);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDegenerateQuaternion);
  }
}

TEST_CASE("end-to-end gradients") {
  const auto windows = toy_windows(12, 3, 21);
  std::vector<std::size_t> batch = {0, 4, 7};
  std::mt19937_64 rng(9);
  for (CellKind k : nn::kAllCellKinds) {
    for (bool stacked : {false, true}) {
      for (bool anchored : {false, true}) {
        FusionConfig cfg;
        cfg.cell = k;
        cfg.n_t = 3;
        cfg.r_u = 3;
        cfg.stacked = stacked;
        cfg.anchored = anchored;
        cfg.beta3 = 3.0;
        auto net = FusionNet::create(cfg, 12);
        randomize(net.heads, rng, 0.4);
        FusionGradients g;
        fusion_loss_and_gradients(net, windows, batch, &g);

        double worst = 0.0;
        auto probe = [&](nn::ParamSet& params, const nn::ParamSet& grad) {
          for (std::size_t t = 0; t < params.size(); ++t) {
            for (Eigen::Index i = 0; i < params[t].size(); ++i) {
              double& v = params[t].data()[i];
              // Five-point stencil: raw world coordinates make the loss large,
              // so a tiny step would drown in round-off.
              const double keep = v, h = 1e-4;
              auto at = [&](double step) {
                v = keep + step;
                return fusion_loss_and_gradients(net, windows, batch, nullptr);
              };
              const double num = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
              v = keep;
              const double ana = grad[t].data()[i];
              worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-4}));
            }
          }
        };
        for (std::size_t l = 0; l < net.stack.params.size(); ++l) probe(net.stack.params[l], g.stack[l]);
        probe(net.heads, g.heads);
        CAPTURE(nn::to_string(k));
        CAPTURE(stacked);
        CAPTURE(anchored);
        CHECK(worst < 1e-4);
      }
    }
  }
}

TEST_CASE("training") {
  const auto windows = toy_windows(60, 5, 31);
  FusionConfig cfg;
  cfg.n_t = 5;
  cfg.r_u = 6;

  SUBCASE("zero learning rate keeps parameters") {
    auto net = FusionNet::create(cfg, 3);
    const auto before = net;
    nn::TrainConfig tc;
    tc.learning_rate = 0.0;
    tc.iterations = 20;
    tc.batch_size = 10;
    train_fusion(net, windows, tc);
    for (std::size_t l = 0; l < net.stack.params.size(); ++l)
      for (std::size_t t = 0; t < net.stack.params[l].size(); ++t)
        CHECK(net.stack.params[l][t] == before.stack.params[l][t]);
    for (std::size_t t = 0; t < net.heads.size(); ++t) CHECK(net.heads[t] == before.heads[t]);
  }

  SUBCASE("overfits a single repeated window") {
    auto net = FusionNet::create(cfg, 4);
    const std::vector<FusionWindow> same(8, windows[10]);
    nn::TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.iterations = 10000;
    tc.batch_size = 8;
    const auto res = train_fusion(net, same, tc);
    MESSAGE("overfit loss ", res.loss_trace.front(), " -> ", res.loss_trace.back());
    CHECK(res.loss_trace.back() < 1e-4 * res.loss_trace.front());
  }

  SUBCASE("same seed, same result") {
    nn::TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.iterations = 50;
    tc.batch_size = 16;
    tc.seed = 7;
    auto a = FusionNet::create(cfg, 5), b = FusionNet::create(cfg, 5);
    const auto ra = train_fusion(a, windows, tc), rb = train_fusion(b, windows, tc);
    CHECK(ra.loss_trace == rb.loss_trace);
    for (std::size_t t = 0; t < a.heads.size(); ++t) CHECK(a.heads[t] == b.heads[t]);
  }

  SUBCASE("missing targets") {
    auto net = FusionNet::create(cfg, 4);
    auto unlabeled = windows;
    unlabeled[0].target.reset();
    nn::TrainConfig tc;
    tc.iterations = 3;
    tc.batch_size = int(unlabeled.size());
    CHECK_THROWS_AS(train_fusion(net, unlabeled, tc), Error);
    CHECK_THROWS_AS(train_fusion(net, std::vector<FusionWindow>{}, tc), Error);
  }
}

TEST_CASE("fusion beats a degraded absolute stream") {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Segment> train, test;
  for (int i = 0; i < 4; ++i) train.push_back(sim_segment(10 + i, 60.0));
  for (int i = 0; i < 2; ++i) test.push_back(sim_segment(50 + i, 60.0));
  FusionConfig cfg;  // stacked TRNN, n_t 15, r_u 10
  std::vector<FusionWindow> windows;
  for (const auto& s : train) {
    auto w = build_windows(s.absolute, s.relative, cfg.n_t, s.truth);
    windows.insert(windows.end(), w.begin(), w.end());
  }
  auto net = FusionNet::create(cfg, 1);
  nn::TrainConfig tc;
  tc.learning_rate = 1e-4;
  tc.batch_size = cfg.batch_size;
  tc.iterations = 5000;
  tc.seed = 1;
  train_fusion(net, windows, tc);
  std::vector<Pose> fused, absolute, truth;
  for (const auto& s : test) {
    const auto f = fuse_stream(net, s.absolute, s.relative);
    for (std::size_t i = cfg.n_t - 1; i < f.size(); ++i) {
      fused.push_back(f[i]);
      absolute.push_back(s.absolute[i]);
      truth.push_back(s.truth[i]);
    }
  }
  const double base = median_position_error(absolute, truth), mine = median_position_error(fused, truth);
  MESSAGE("held-out median position error ", base, " -> ", mine);
  CHECK(mine <= 0.8 * base);
  for (const auto& p : fused) CHECK(std::abs(p.q.norm() - 1.0) < 1e-9);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 600.0);
}

TEST_CASE("fused stream keeps the warm-up prefix") {
  const auto truth = random_walk(12, 2);
  const auto noisy = jitter(truth, 0.1, 0.01, 3);
  FusionConfig cfg;
  cfg.n_t = 5;
  const auto net = FusionNet::create(cfg, 1);
  const auto out = fuse_stream(net, noisy, relative_stream(truth));
  REQUIRE(out.size() == 12);
  for (int i = 0; i < 4; ++i) CHECK(out[i].p == noisy[i].p);
  const auto w = build_windows(noisy, relative_stream(truth), 5);
  for (int i = 4; i < 12; ++i) CHECK((out[i].p - fusion_forward(net, w[i - 4]).p).norm() < 1e-12);
}

TEST_CASE("checkpoint round trip") {
  FusionConfig cfg;
  cfg.cell = CellKind::kSru;
  cfg.n_t = 6;
  cfg.r_u = 4;
  cfg.beta3 = 12.5;
  cfg.anchored = false;
  const auto net = FusionNet::create(cfg, 77);
  const auto path = std::filesystem::temp_directory_path() / "locfuse_fusion.ckpt";
  save_fusion(path, net);
  const auto back = load_fusion(path);
  CHECK(back.config.cell == CellKind::kSru);
  CHECK(back.config.n_t == 6);
  CHECK(back.config.r_u == 4);
  CHECK(back.config.stacked);
  CHECK(back.config.beta3 == 12.5);
  CHECK_FALSE(back.config.anchored);
  for (std::size_t l = 0; l < net.stack.params.size(); ++l)
    for (std::size_t t = 0; t < net.stack.params[l].size(); ++t)
      CHECK(back.stack.params[l][t] == net.stack.params[l][t]);
  for (std::size_t t = 0; t < net.heads.size(); ++t) CHECK(back.heads[t] == net.heads[t]);
  std::filesystem::remove(path);
}

TEST_CASE("fusion sweep") {
  std::vector<Segment> train, test;
  for (int i = 0; i < 2; ++i) {
    Segment s;
    s.truth = random_walk(80, 40 + i);
    s.absolute = jitter(s.truth, 0.2, 0.02, 60 + i);
    s.relative = relative_stream(s.truth);
    (i == 0 ? train : test).push_back(std::move(s));
  }
  nn::TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.iterations = 300;
  tc.batch_size = 32;
  tc.seed = 3;
  const FusionConfig base;

  SUBCASE("one configuration, one row") {
    const std::vector<SweepEntry> grid{{CellKind::kTrnn, true, 6, 4, -1}};
    const auto rows = sweep_fusion(grid, train, test, base, tc);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].rank == 1);
    CHECK_FALSE(rows[0].failed);
  }
  SUBCASE("untrained ranks last") {
    const std::vector<SweepEntry> grid{{CellKind::kTrnn, true, 6, 4, 0}, {CellKind::kTrnn, true, 6, 4, -1}};
    const auto rows = sweep_fusion(grid, train, test, base, tc);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].rank == 2);
    CHECK(rows[1].rank == 1);
  }
  SUBCASE("failures are recorded and ranked last") {
    const std::vector<SweepEntry> grid{{CellKind::kLstm, false, 500, 3, -1}, {CellKind::kGru, false, 4, 3, 10}};
    const auto rows = sweep_fusion(grid, train, test, base, tc);
    CHECK(rows[0].failed);
    CHECK_FALSE(rows[0].error.empty());
    CHECK(rows[0].rank == 2);
    CHECK(rows[1].rank == 1);
    const auto path = std::filesystem::temp_directory_path() / "locfuse_sweep" / "report.csv";
    write_sweep_report(path, rows);
    const auto table = csv::read(path, {"cell", "stacked", "n_t", "r_u", "median_pos_m", "median_ori_deg", "rank", "iterations"});
    REQUIRE(table.rows.size() == 2);
    CHECK(table.rows[0][0] == "LSTM");
    CHECK(table.rows[0][1] == "false");
    CHECK(table.rows[0][4] == "nan");
    CHECK(table.rows[1][6] == "1");
    CHECK(table.rows[0][7] == "300");
    CHECK(table.rows[1][7] == "10");
  }
  SUBCASE("grid product includes the selected configuration") {
    const CellKind cells[] = {CellKind::kTrnn, CellKind::kLstm};
    const bool stacking[] = {true, false};
    const int n_t[] = {3, 6, 10, 15, 25};
    const int r_u[] = {3, 5, 10};
    const auto grid = sweep_grid(cells, stacking, n_t, r_u);
    CHECK(grid.size() == 2 * 2 * 5 * 3);
    CHECK(std::count_if(grid.begin(), grid.end(), [](const SweepEntry& e) {
            return e.cell == CellKind::kTrnn && e.stacked && e.n_t == 15 && e.r_u == 10;
          }) == 1);
  }
}
