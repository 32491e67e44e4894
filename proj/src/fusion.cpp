#include "locfuse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "locfuse/csv.hpp"
#include "locfuse/error.hpp"

namespace locfuse::fusion {

namespace {

// q (x) h as a matrix acting on h, (w, x, y, z) layout.
Eigen::Matrix4d left_product(const Quat& q) {
  Eigen::Matrix4d m;
  m << q.w(), -q.x(), -q.y(), -q.z(),  //
      q.x(), q.w(), -q.z(), q.y(),     //
      q.y(), q.z(), q.w(), -q.x(),     //
      q.z(), -q.y(), q.x(), q.w();
  return m;
}

Pose anchor_of(const FusionWindow& w) {
  const auto last = w.features.row(w.features.rows() - 1);
  return {Vec3(last(0), last(1), last(2)), quat_normalize(Vec4(last(3), last(4), last(5), last(6)))};
}

struct Forward {
  nn::StackOutput stack;
  Matrix features;  // r_u x B
  FusionOutput out;
  std::vector<Pose> anchors;
};

Forward forward(const FusionNet& net, std::span<const FusionWindow* const> windows) {
  require(!windows.empty(), "fusion: empty batch");
  const auto& cfg = net.config;
  const int b = int(windows.size());
  std::vector<Matrix> x(cfg.n_t, Matrix(kFeatureWidth, b));
  Forward f;
  for (int k = 0; k < b; ++k) {
    const auto& w = *windows[k];
    if (w.features.rows() != cfg.n_t || w.features.cols() != kFeatureWidth) {
      fail(ErrorCode::kShapeMismatch, "fusion: window is " + std::to_string(w.features.rows()) + "x" +
                                          std::to_string(w.features.cols()) + ", network expects " +
                                          std::to_string(cfg.n_t) + "x14");
    }
    if (!cfg.anchored) {
      for (int t = 0; t < cfg.n_t; ++t) x[t].col(k) = w.features.row(t).transpose();
      continue;
    }
    const Pose a = anchor_of(w);
    const Mat3 rt = a.rotation().transpose();
    for (int t = 0; t < cfg.n_t; ++t) {
      const auto row = w.features.row(t);
      const Quat q = quat_normalize(Vec4(row(3), row(4), row(5), row(6)));
      x[t].col(k).head<3>() = rt * (Vec3(row(0), row(1), row(2)) - a.p);
      x[t].col(k).segment<4>(3) = to_wxyz(canonicalize(a.q.conjugate() * q));
      x[t].col(k).tail<7>() = row.tail<7>().transpose();
    }
    f.anchors.push_back(a);
  }
  f.stack = nn::stack_forward(net.stack, x);
  f.features = f.stack.final_h();
  f.out.p = nn::Dense{net.heads[0], net.heads[1]}.forward(f.features);
  f.out.q = nn::Dense{net.heads[2], net.heads[3]}.forward(f.features);
  if (cfg.anchored) {
    for (int k = 0; k < b; ++k) {
      const Pose& a = f.anchors[k];
      f.out.p.col(k) = a.p + a.rotation() * f.out.p.col(k);
      f.out.q.col(k) = left_product(a.q) * f.out.q.col(k);
    }
  }
  return f;
}

Vec4 unit_target(const Pose& gt) {
  Vec4 q = to_wxyz(gt.q);
  const double n = q.norm();
  if (!(n > 0.0)) fail(ErrorCode::kDegenerateQuaternion, "fusion loss: zero-norm target quaternion");
  return q / n;
}

}  // namespace

void FusionConfig::validate() const {
  require(n_t >= 1, "fusion config: n_t must be >= 1");
  require(r_u >= 1, "fusion config: r_u must be >= 1");
  require(beta3 > 0.0, "fusion config: beta3 must be > 0");
  require(batch_size >= 1, "fusion config: batch size must be >= 1");
}

std::vector<FusionWindow> build_windows(std::span<const Pose> absolute, std::span<const RelativePose> relative,
                                        int n_t, std::span<const Pose> truth) {
  require(n_t >= 1, "build_windows: n_t must be >= 1");
  const int n = int(absolute.size());
  if (relative.size() + 1 != absolute.size() || (!truth.empty() && truth.size() != absolute.size())) {
    fail(ErrorCode::kShapeMismatch, "build_windows: streams are not aligned");
  }
  if (n < n_t) {
    fail(ErrorCode::kShapeMismatch,
         "build_windows: stream of " + std::to_string(n) + " is shorter than n_t = " + std::to_string(n_t));
  }
  Matrix rows(n, kFeatureWidth);
  for (int i = 0; i < n; ++i) {
    const RelativePose r = i == 0 ? RelativePose{} : relative[i - 1];
    rows.row(i) << absolute[i].p.transpose(), to_wxyz(absolute[i].q).transpose(), r.dp.transpose(),
        to_wxyz(r.dq).transpose();
  }
  std::vector<FusionWindow> out;
  out.reserve(n - n_t + 1);
  for (int s = 0; s + n_t <= n; ++s) {
    FusionWindow w;
    w.features = rows.middleRows(s, n_t);
    w.last = s + n_t - 1;
    if (!truth.empty()) w.target = truth[w.last];
    out.push_back(std::move(w));
  }
  return out;
}

FusionNet FusionNet::create(const FusionConfig& config, std::uint64_t seed) {
  config.validate();
  nn::Rng rng(seed);
  FusionNet net;
  net.config = config;
  net.stack = nn::RecurrentStack::create(config.cell, kFeatureWidth, config.r_u, config.stacked, rng);
  const auto p = nn::Dense::create(config.r_u, 3, rng);
  auto q = nn::Dense::create(config.r_u, 4, rng);
  // Anchored nets start out as the identity correction.
  if (config.anchored) q.b(0, 0) = 1.0;
  net.heads.add("fc_p.w", p.w);
  net.heads.add("fc_p.b", p.b);
  net.heads.add("fc_q.w", q.w);
  net.heads.add("fc_q.b", q.b);
  return net;
}

std::size_t FusionNet::scalar_count() const { return stack.scalar_count() + heads.scalar_count(); }

FusionOutput fusion_forward_batch(const FusionNet& net, std::span<const FusionWindow* const> windows) {
  return forward(net, windows).out;
}

Pose fusion_forward(const FusionNet& net, const FusionWindow& window) {
  const FusionWindow* one[] = {&window};
  const auto out = forward(net, one).out;
  return {out.p.col(0), quat_normalize(Vec4(out.q.col(0)))};
}

double fusion_loss(const Vec3& p_hat, const Vec4& q_hat_wxyz, const Pose& gt, double beta3) {
  require(beta3 > 0.0, "fusion loss: beta3 must be > 0");
  return (p_hat - gt.p).squaredNorm() + beta3 * (q_hat_wxyz - unit_target(gt)).squaredNorm();
}

double fusion_loss(const Pose& pred, const Pose& gt, double beta3) {
  return fusion_loss(pred.p, to_wxyz(pred.q), gt, beta3);
}

double fusion_loss_and_gradients(const FusionNet& net, std::span<const FusionWindow> windows,
                                 std::span<const std::size_t> batch, FusionGradients* grads) {
  const auto& cfg = net.config;
  std::vector<const FusionWindow*> ws;
  for (auto i : batch) {
    if (!windows[i].target) fail(ErrorCode::kInvalidArgument, "fusion: training window without a target");
    ws.push_back(&windows[i]);
  }
  const auto f = forward(net, ws);
  const int b = int(ws.size());
  double loss = 0.0;
  Matrix g_p(3, b), g_q(4, b);
  for (int k = 0; k < b; ++k) {
    const Pose& gt = *ws[k]->target;
    Vec4 target = unit_target(gt);
    // q and -q are one rotation: compare against the representative on the
    // anchor's side so an anchored net is not asked to flip sign.
    if (cfg.anchored && target.dot(to_wxyz(f.anchors[k].q)) < 0.0) target = -target;
    const Vec3 ep = f.out.p.col(k) - gt.p;
    const Vec4 eq = f.out.q.col(k) - target;
    loss += ep.squaredNorm() + cfg.beta3 * eq.squaredNorm();
    g_p.col(k) = 2.0 * ep / b;
    g_q.col(k) = 2.0 * cfg.beta3 * eq / b;
  }
  loss /= b;
  if (!std::isfinite(loss)) fail(ErrorCode::kDiverged, "fusion: non-finite loss");
  if (!grads) return loss;

  if (cfg.anchored) {
    // Back through the anchor composition to the raw head outputs.
    for (int k = 0; k < b; ++k) {
      g_p.col(k) = f.anchors[k].rotation().transpose() * g_p.col(k);
      g_q.col(k) = left_product(f.anchors[k].q).transpose() * g_q.col(k);
    }
  }
  grads->heads = net.heads.zeros_like();
  grads->heads[0] = g_p * f.features.transpose();
  grads->heads[1] = g_p.rowwise().sum();
  grads->heads[2] = g_q * f.features.transpose();
  grads->heads[3] = g_q.rowwise().sum();
  const Matrix g_h = net.heads[0].transpose() * g_p + net.heads[2].transpose() * g_q;
  grads->stack = nn::stack_backward(net.stack, f.stack, g_h).params;
  return loss;
}

FusionTrainResult train_fusion(FusionNet& net, std::span<const FusionWindow> windows, const nn::TrainConfig& train) {
  train.validate();
  net.config.validate();
  if (windows.empty()) fail(ErrorCode::kInvalidArgument, "train_fusion: empty dataset");
  nn::Rng rng(train.seed);
  nn::AdamConfig adam;
  adam.learning_rate = train.learning_rate;
  std::vector<nn::AdamState> st_stack;
  for (const auto& p : net.stack.params) st_stack.push_back(nn::make_adam_state(p));
  auto st_heads = nn::make_adam_state(net.heads);

  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::vector<std::size_t> batch(std::min<std::size_t>(train.batch_size, windows.size()));

  FusionTrainResult res;
  res.loss_trace.reserve(train.iterations);
  FusionGradients g;
  for (int it = 0; it < train.iterations; ++it) {
    for (auto& idx : batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx = order[cursor++];
    }
    res.loss_trace.push_back(fusion_loss_and_gradients(net, windows, batch, &g));
    for (std::size_t l = 0; l < net.stack.params.size(); ++l)
      nn::adam_step(net.stack.params[l], g.stack[l], st_stack[l], adam);
    nn::adam_step(net.heads, g.heads, st_heads, adam);
  }
  return res;
}

std::vector<Pose> fuse_stream(const FusionNet& net, std::span<const Pose> absolute,
                              std::span<const RelativePose> relative) {
  std::vector<Pose> out(absolute.begin(), absolute.end());
  for (auto& p : out) p.q = canonicalize(p.q.normalized());
  if (int(absolute.size()) < net.config.n_t) return out;
  const auto windows = build_windows(absolute, relative, net.config.n_t);
  constexpr std::size_t kChunk = 256;
  for (std::size_t s = 0; s < windows.size(); s += kChunk) {
    std::vector<const FusionWindow*> ws;
    for (std::size_t i = s; i < std::min(windows.size(), s + kChunk); ++i) ws.push_back(&windows[i]);
    const auto f = forward(net, ws).out;
    for (std::size_t k = 0; k < ws.size(); ++k) {
      out[ws[k]->last] = {f.p.col(k), quat_normalize(Vec4(f.q.col(k)))};
    }
  }
  return out;
}

void save_fusion(const std::filesystem::path& path, const FusionNet& net) {
  nn::Checkpoint ck;
  ck.specs = net.stack.specs;
  const auto& c = net.config;
  Matrix meta(1, 7);
  meta << double(c.cell), c.n_t, c.r_u, c.stacked ? 1.0 : 0.0, c.beta3, c.batch_size, c.anchored ? 1.0 : 0.0;
  ck.tensors.push_back({"fusion.config", meta});
  for (std::size_t l = 0; l < net.stack.params.size(); ++l)
    nn::append_params(ck, "cell" + std::to_string(l), net.stack.params[l]);
  nn::append_params(ck, "head", net.heads);
  nn::write_checkpoint(path, ck);
}

FusionNet load_fusion(const std::filesystem::path& path) {
  const auto ck = nn::read_checkpoint(path);
  const Matrix& m = ck.tensor("fusion.config");
  if (m.size() != 7) fail(ErrorCode::kIo, path.string() + ": bad fusion config record");
  FusionConfig c;
  const int kind = int(m(0));
  if (kind < 0 || kind >= int(nn::kAllCellKinds.size())) fail(ErrorCode::kIo, path.string() + ": bad cell kind");
  c.cell = nn::CellKind(kind);
  c.n_t = int(m(1));
  c.r_u = int(m(2));
  c.stacked = m(3) != 0.0;
  c.beta3 = m(4);
  c.batch_size = int(m(5));
  c.anchored = m(6) != 0.0;
  FusionNet net = FusionNet::create(c, 0);
  if (ck.specs != net.stack.specs) fail(ErrorCode::kShapeMismatch, path.string() + ": cell layout mismatch");
  for (std::size_t l = 0; l < net.stack.params.size(); ++l)
    nn::load_params(ck, "cell" + std::to_string(l), net.stack.params[l]);
  nn::load_params(ck, "head", net.heads);
  return net;
}

std::vector<SweepEntry> sweep_grid(std::span<const nn::CellKind> cells, std::span<const bool> stacking,
                                   std::span<const int> n_t, std::span<const int> r_u) {
  std::vector<SweepEntry> out;
  for (auto c : cells)
    for (bool s : stacking)
      for (int n : n_t)
        for (int u : r_u) out.push_back({c, s, n, u, -1});
  return out;
}

std::vector<SweepRow> sweep_fusion(std::span<const SweepEntry> grid, std::span<const Segment> train,
                                   std::span<const Segment> test, const FusionConfig& base,
                                   const nn::TrainConfig& train_config) {
  require(!grid.empty(), "sweep_fusion: empty grid");
  require(!train.empty() && !test.empty(), "sweep_fusion: need training and test segments");
  std::vector<SweepRow> rows;
  for (const auto& e : grid) {
    SweepRow row{e, 0.0, 0.0, 0, false, {}};
    if (row.entry.iterations < 0) row.entry.iterations = train_config.iterations;
    try {
      FusionConfig cfg = base;
      cfg.cell = e.cell;
      cfg.stacked = e.stacked;
      cfg.n_t = e.n_t;
      cfg.r_u = e.r_u;
      std::vector<FusionWindow> windows;
      for (const auto& s : train) {
        auto w = build_windows(s.absolute, s.relative, cfg.n_t, s.truth);
        windows.insert(windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
      }
      auto net = FusionNet::create(cfg, train_config.seed);
      nn::TrainConfig tc = train_config;
      tc.iterations = row.entry.iterations;
      train_fusion(net, windows, tc);
      std::vector<Pose> pred, gt;
      for (const auto& s : test) {
        const auto fused = fuse_stream(net, s.absolute, s.relative);
        // Only timesteps the network actually saw a full window for.
        for (std::size_t i = std::size_t(cfg.n_t - 1); i < fused.size(); ++i) {
          pred.push_back(fused[i]);
          gt.push_back(s.truth[i]);
        }
      }
      if (pred.empty()) fail(ErrorCode::kShapeMismatch, "sweep_fusion: test segments shorter than n_t");
      row.median_pos_m = median_position_error(pred, gt);
      row.median_ori_deg = median_orientation_error(pred, gt);
    } catch (const Error& err) {
      row.failed = true;
      row.error = err.what();
      row.median_pos_m = row.median_ori_deg = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = rows[a];
    const auto& y = rows[b];
    if (x.failed != y.failed) return y.failed;
    if (x.failed) return false;
    if (x.median_pos_m != y.median_pos_m) return x.median_pos_m < y.median_pos_m;
    return x.median_ori_deg < y.median_ori_deg;
  });
  for (std::size_t r = 0; r < order.size(); ++r) rows[order[r]].rank = int(r) + 1;
  return rows;
}

void write_sweep_report(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  csv::write_row(out, {"cell", "stacked", "n_t", "r_u", "median_pos_m", "median_ori_deg", "rank", "iterations"});
  for (const auto& r : rows) {
    csv::write_row(out, {std::string(nn::to_string(r.entry.cell)), r.entry.stacked ? "true" : "false",
                         std::to_string(r.entry.n_t), std::to_string(r.entry.r_u),
                         r.failed ? "nan" : csv::format(r.median_pos_m), r.failed ? "nan" : csv::format(r.median_ori_deg),
                         std::to_string(r.rank), std::to_string(r.entry.iterations)});
  }
  if (!out) fail(ErrorCode::kIo, "write failed: " + path.string());
}

}  // namespace locfuse::fusion
