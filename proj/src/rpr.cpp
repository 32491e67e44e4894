#include "locfuse/rpr.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "locfuse/csv.hpp"
#include "locfuse/error.hpp"

namespace locfuse::rpr {

void RprShape::validate() const {
  require(rows >= 1 && cols >= 1, "rpr shape: rows and cols must be >= 1");
  require(units >= 1, "rpr shape: units must be >= 1");
}

void RprLossWeights::validate() const { require(beta2 > 0.0, "rpr loss: beta2 must be > 0"); }

RprNetwork RprNetwork::create(const RprShape& shape, std::uint64_t seed) {
  shape.validate();
  nn::Rng rng(seed);
  RprNetwork net;
  net.shape = shape;
  net.lstm_u = nn::init_cell_params(net.cell_spec(), rng);
  net.lstm_v = nn::init_cell_params(net.cell_spec(), rng);
  const auto dp = nn::Dense::create(2 * shape.units, 3, rng);
  const auto dq = nn::Dense::create(2 * shape.units, 4, rng);
  net.heads.add("fc_dp.w", dp.w);
  net.heads.add("fc_dp.b", dp.b);
  net.heads.add("fc_dq.w", dq.w);
  net.heads.add("fc_dq.b", dq.b);
  return net;
}

std::size_t RprNetwork::scalar_count() const {
  return lstm_u.scalar_count() + lstm_v.scalar_count() + heads.scalar_count();
}

RprBatch make_batch(const RprShape& shape, std::span<const FlowField* const> fields) {
  require(!fields.empty(), "rpr: empty batch");
  const int b = int(fields.size());
  RprBatch batch;
  batch.u_seq.assign(shape.rows, Matrix(shape.cols, b));
  batch.v_seq.assign(shape.rows, Matrix(shape.cols, b));
  for (int k = 0; k < b; ++k) {
    const FlowField& f = *fields[k];
    if (f.width != shape.cols || f.height != shape.rows) {
      fail(ErrorCode::kShapeMismatch, "rpr: flow field is " + std::to_string(f.height) + "x" + std::to_string(f.width) +
                                          ", network expects " + std::to_string(shape.rows) + "x" +
                                          std::to_string(shape.cols));
    }
    for (int r = 0; r < shape.rows; ++r) {
      for (int c = 0; c < shape.cols; ++c) {
        batch.u_seq[r](c, k) = f.u[f.index(c, r)];
        batch.v_seq[r](c, k) = f.v[f.index(c, r)];
      }
    }
  }
  return batch;
}

namespace {

struct Forward {
  nn::CellOutput u;
  nn::CellOutput v;
  Matrix features;  // 2u x B
  RprOutput out;
};

Forward forward(const RprNetwork& net, const RprBatch& batch) {
  const auto spec = net.cell_spec();
  const int b = int(batch.u_seq.front().cols());
  Forward f;
  f.u = nn::cell_forward(spec, net.lstm_u, batch.u_seq, nn::zero_state(spec, b));
  f.v = nn::cell_forward(spec, net.lstm_v, batch.v_seq, nn::zero_state(spec, b));
  f.features.resize(2 * net.shape.units, b);
  f.features << f.u.final_state.h, f.v.final_state.h;
  f.out.dp = net.heads[0] * f.features;
  f.out.dp.colwise() += net.heads[1].col(0);
  f.out.dq = net.heads[2] * f.features;
  f.out.dq.colwise() += net.heads[3].col(0);
  return f;
}

}  // namespace

RprOutput rpr_forward(const RprNetwork& net, const RprBatch& batch) {
  if (int(batch.u_seq.size()) != net.shape.rows || batch.v_seq.size() != batch.u_seq.size()) {
    fail(ErrorCode::kShapeMismatch, "rpr: batch sequence length does not match the network");
  }
  return forward(net, batch).out;
}

RelativePose rpr_predict(const RprNetwork& net, const FlowField& pooled) {
  const FlowField* one[] = {&pooled};
  const auto out = rpr_forward(net, make_batch(net.shape, one));
  RelativePose rel;
  rel.dp = out.dp.col(0);
  rel.dq = quat_normalize(Vec4(out.dq.col(0)));
  return rel;
}

double rpr_loss(const Vec3& dp_hat, const Vec4& dq_hat, const RelativePose& gt, const RprLossWeights& w) {
  w.validate();
  const Vec4 target = to_wxyz(gt.dq);
  const double n = target.norm();
  if (!(n > 0.0)) fail(ErrorCode::kDegenerateQuaternion, "rpr loss: zero-norm target quaternion");
  return (dp_hat - gt.dp).norm() + w.beta2 * (dq_hat - target / n).norm();
}

RelativePose make_rpr_target(const Pose& prev, const Pose& cur) { return relative_pose(prev, cur); }

double rpr_loss_and_gradients(const RprNetwork& net, std::span<const RprSample> samples,
                              std::span<const std::size_t> batch, const RprLossWeights& w, RprGradients* grads) {
  w.validate();
  std::vector<const FlowField*> fields;
  for (auto i : batch) fields.push_back(&samples[i].pooled);
  const auto f = forward(net, make_batch(net.shape, fields));
  const int b = int(batch.size());

  double loss = 0.0;
  Matrix g_dp = Matrix::Zero(3, b), g_dq = Matrix::Zero(4, b);
  for (int k = 0; k < b; ++k) {
    const auto& gt = samples[batch[k]].target;
    Vec4 target = to_wxyz(gt.dq);
    const double n = target.norm();
    if (!(n > 0.0)) fail(ErrorCode::kDegenerateQuaternion, "rpr loss: zero-norm target quaternion");
    target /= n;
    const Vec3 ep = f.out.dp.col(k) - gt.dp;
    const Vec4 eq = f.out.dq.col(k) - target;
    const double np = ep.norm(), nq = eq.norm();
    loss += np + w.beta2 * nq;
    // Zero subgradient at the kink.
    if (np > 0.0) g_dp.col(k) = ep / (np * b);
    if (nq > 0.0) g_dq.col(k) = w.beta2 * eq / (nq * b);
  }
  loss /= b;
  if (!std::isfinite(loss)) fail(ErrorCode::kDiverged, "rpr: non-finite loss");
  if (!grads) return loss;

  grads->heads = net.heads.zeros_like();
  grads->heads[0] = g_dp * f.features.transpose();
  grads->heads[1] = g_dp.rowwise().sum();
  grads->heads[2] = g_dq * f.features.transpose();
  grads->heads[3] = g_dq.rowwise().sum();
  const Matrix g_feat = net.heads[0].transpose() * g_dp + net.heads[2].transpose() * g_dq;
  const int u = net.shape.units;
  const auto spec = net.cell_spec();
  std::vector<Matrix> none(net.shape.rows);
  nn::CellState gu{g_feat.topRows(u), Matrix::Zero(u, b)};
  nn::CellState gv{g_feat.bottomRows(u), Matrix::Zero(u, b)};
  grads->lstm_u = nn::cell_backward(spec, net.lstm_u, f.u.trace, none, &gu).params;
  grads->lstm_v = nn::cell_backward(spec, net.lstm_v, f.v.trace, none, &gv).params;
  return loss;
}

RprTrainResult train_rpr(RprNetwork& net, std::span<const RprSample> dataset, const nn::TrainConfig& config,
                         const RprLossWeights& w) {
  config.validate();
  w.validate();
  if (dataset.empty()) fail(ErrorCode::kInvalidArgument, "train_rpr: empty dataset");
  nn::Rng rng(config.seed);
  nn::AdamConfig adam;
  adam.learning_rate = config.learning_rate;
  auto st_u = nn::make_adam_state(net.lstm_u);
  auto st_v = nn::make_adam_state(net.lstm_v);
  auto st_h = nn::make_adam_state(net.heads);

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t bs = std::min<std::size_t>(config.batch_size, dataset.size());

  RprTrainResult result;
  result.loss_trace.reserve(config.iterations);
  RprGradients g;
  std::vector<std::size_t> batch(bs);
  for (int it = 0; it < config.iterations; ++it) {
    for (auto& idx : batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx = order[cursor++];
    }
    const double loss = rpr_loss_and_gradients(net, dataset, batch, w, &g);
    result.loss_trace.push_back(loss);
    nn::adam_step(net.lstm_u, g.lstm_u, st_u, adam);
    nn::adam_step(net.lstm_v, g.lstm_v, st_v, adam);
    nn::adam_step(net.heads, g.heads, st_h, adam);
  }
  return result;
}

void save_rpr(const std::filesystem::path& path, const RprNetwork& net) {
  nn::Checkpoint ck;
  ck.specs = {net.cell_spec(), net.cell_spec()};
  Matrix meta(1, 3);
  meta << net.shape.rows, net.shape.cols, net.shape.units;
  ck.tensors.push_back({"rpr.shape", meta});
  nn::append_params(ck, "lstm_u", net.lstm_u);
  nn::append_params(ck, "lstm_v", net.lstm_v);
  nn::append_params(ck, "head", net.heads);
  nn::write_checkpoint(path, ck);
}

RprNetwork load_rpr(const std::filesystem::path& path) {
  const auto ck = nn::read_checkpoint(path);
  const Matrix& meta = ck.tensor("rpr.shape");
  if (meta.size() != 3) fail(ErrorCode::kIo, path.string() + ": bad rpr shape record");
  RprShape shape{int(meta(0)), int(meta(1)), int(meta(2))};
  RprNetwork net = RprNetwork::create(shape, 0);
  if (ck.specs.size() != 2 || !(ck.specs[0] == net.cell_spec())) {
    fail(ErrorCode::kShapeMismatch, path.string() + ": not an rpr checkpoint");
  }
  nn::load_params(ck, "lstm_u", net.lstm_u);
  nn::load_params(ck, "lstm_v", net.lstm_v);
  nn::load_params(ck, "head", net.heads);
  return net;
}

namespace {
const std::vector<std::string> kManifestHeader = {"flow_file", "dp_x", "dp_y", "dp_z", "dq_w", "dq_x", "dq_y", "dq_z"};
}

void write_rpr_dataset(const std::filesystem::path& manifest, std::span<const RprSample> samples) {
  const auto dir = manifest.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::ofstream out(manifest, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + manifest.string());
  csv::write_row(out, kManifestHeader);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string name = "flow_" + std::to_string(i) + ".pflw";
    write_flow(dir / name, samples[i].pooled);
    const auto& t = samples[i].target;
    csv::write_row(out, {name, csv::format(t.dp.x()), csv::format(t.dp.y()), csv::format(t.dp.z()),
                         csv::format(t.dq.w()), csv::format(t.dq.x()), csv::format(t.dq.y()), csv::format(t.dq.z())});
  }
}

std::vector<RprSample> read_rpr_dataset(const std::filesystem::path& manifest, const RprShape& shape) {
  const auto table = csv::read(manifest, kManifestHeader);
  const auto dir = manifest.parent_path();
  std::vector<RprSample> out;
  for (const auto& r : table.rows) {
    RprSample s;
    FlowField f = read_flow(dir / r[0]);
    if (f.width == 4 * shape.cols && f.height == 4 * shape.rows) f = mean_pool(f, 4);
    if (f.width != shape.cols || f.height != shape.rows) {
      fail(ErrorCode::kShapeMismatch, r[0] + ": flow size does not match the network input");
    }
    s.pooled = std::move(f);
    s.target.dp = Vec3(csv::to_double(r[1]), csv::to_double(r[2]), csv::to_double(r[3]));
    s.target.dq = quat_normalize(Vec4(csv::to_double(r[4]), csv::to_double(r[5]), csv::to_double(r[6]),
                                      csv::to_double(r[7])));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace locfuse::rpr
