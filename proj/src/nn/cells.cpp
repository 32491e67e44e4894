#include "locfuse/cells.hpp"

#include <atomic>
#include <cmath>
#include <string>

#include "locfuse/error.hpp"

namespace locfuse::nn {

std::string_view to_string(CellKind kind) {
  switch (kind) {
    case CellKind::kLstm: return "LSTM";
    case CellKind::kGru: return "GRU";
    case CellKind::kMgu: return "MGU";
    case CellKind::kRan: return "RAN";
    case CellKind::kSru: return "SRU";
    case CellKind::kQrnn: return "QRNN";
    case CellKind::kTrnn: return "TRNN";
    case CellKind::kCfn: return "CFN";
  }
  return "?";
}

CellKind parse_cell_kind(std::string_view name) {
  std::string upper(name);
  for (auto& ch : upper) ch = char(std::toupper(static_cast<unsigned char>(ch)));
  for (CellKind k : kAllCellKinds) {
    if (to_string(k) == upper) return k;
  }
  fail(ErrorCode::kInvalidArgument, "unknown cell kind '" + std::string(name) + "'");
}

bool has_cell_state(CellKind kind) {
  return kind == CellKind::kLstm || kind == CellKind::kRan || kind == CellKind::kSru || kind == CellKind::kQrnn;
}

void CellSpec::validate() const {
  require(input_dim >= 1, "cell spec: input_dim must be >= 1");
  require(units >= 1, "cell spec: units must be >= 1");
}

// ---------------------------------------------------------------------------
// ParamSet

void ParamSet::add(std::string name, Matrix value) {
  tensors_.push_back({std::move(name), std::move(value)});
  touch();
}

Matrix& ParamSet::at(std::string_view name) {
  for (auto& t : tensors_) {
    if (t.name == name) return t.value;
  }
  fail(ErrorCode::kInvalidArgument, "no parameter named " + std::string(name));
}

const Matrix& ParamSet::at(std::string_view name) const { return const_cast<ParamSet*>(this)->at(name); }

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += std::size_t(t.value.size());
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& t : tensors_) out.add(t.name, Matrix::Zero(t.value.rows(), t.value.cols()));
  return out;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (other.size() != size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (tensors_[i].value.rows() != other[i].rows() || tensors_[i].value.cols() != other[i].cols()) return false;
  }
  return true;
}

bool ParamSet::all_finite() const {
  for (const auto& t : tensors_) {
    if (!t.value.allFinite()) return false;
  }
  return true;
}

void ParamSet::touch() {
  static std::atomic<std::uint64_t> counter{0};
  version_ = ++counter;
}

// ---------------------------------------------------------------------------
// Layouts

namespace {

struct Slot {
  const char* name;
  int rows;
  int cols;
  int fan_in;  // 0 marks a bias
};

std::vector<Slot> layout(const CellSpec& s) {
  const int n = s.units;
  const int m = s.input_dim;
  switch (s.kind) {
    case CellKind::kLstm:
      return {{"W", 4 * n, n + m, n + m}, {"b", 4 * n, 1, 0}};
    case CellKind::kGru:
      return {{"W_zr", 2 * n, n + m, n + m}, {"b_zr", 2 * n, 1, 0}, {"W_h", n, n + m, n + m}, {"b_h", n, 1, 0}};
    case CellKind::kMgu:
      return {{"W_f", n, n + m, n + m}, {"b_f", n, 1, 0}, {"W_h", n, n + m, n + m}, {"b_h", n, 1, 0}};
    case CellKind::kRan:
      return {{"W_c", n, m, m}, {"W_g", 2 * n, n + m, n + m}, {"b_g", 2 * n, 1, 0}};
    case CellKind::kSru:
      if (m == n) return {{"W", 3 * n, m, m}, {"v", 2 * n, 1, n}, {"b", 2 * n, 1, 0}};
      return {{"W", 3 * n, m, m}, {"v", 2 * n, 1, n}, {"b", 2 * n, 1, 0}, {"W_s", n, m, m}};
    case CellKind::kQrnn:
      return {{"W0", 3 * n, m, 2 * m}, {"W1", 3 * n, m, 2 * m}, {"b", 3 * n, 1, 0}};
    case CellKind::kTrnn:
      return {{"W", n, m, m}, {"b_z", n, 1, 0}, {"V", n, m, m}, {"b_f", n, 1, 0}};
    case CellKind::kCfn:
      return {{"U", 2 * n, n + m, n + m}, {"b", 2 * n, 1, 0}, {"W", n, m, m}};
  }
  return {};
}

void set_forget_bias(const CellSpec& s, ParamSet& p) {
  const int n = s.units;
  if (s.kind == CellKind::kLstm) p.at("b").middleRows(n, n).setOnes();
  if (s.kind == CellKind::kMgu) p.at("b_f").setOnes();
}

}  // namespace

ParamSet init_cell_params(const CellSpec& spec, Rng& rng) {
  spec.validate();
  ParamSet p;
  for (const auto& slot : layout(spec)) {
    Matrix value = Matrix::Zero(slot.rows, slot.cols);
    if (slot.fan_in > 0) {
      const double bound = 1.0 / std::sqrt(double(slot.fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Eigen::Index c = 0; c < value.cols(); ++c) {
        for (Eigen::Index r = 0; r < value.rows(); ++r) value(r, c) = dist(rng);
      }
    }
    p.add(slot.name, std::move(value));
  }
  set_forget_bias(spec, p);
  return p;
}

ParamSet zero_cell_params(const CellSpec& spec) {
  spec.validate();
  ParamSet p;
  for (const auto& slot : layout(spec)) p.add(slot.name, Matrix::Zero(slot.rows, slot.cols));
  return p;
}

namespace {

std::size_t single_count(CellKind kind, std::size_t m, std::size_t n) {
  switch (kind) {
    case CellKind::kLstm: return 4 * n * (n + m + 1);
    case CellKind::kGru: return 3 * n * (n + m + 1);
    case CellKind::kMgu: return 2 * n * (n + m + 1);
    case CellKind::kRan: return n * m + 2 * n * (n + m + 1);
    case CellKind::kSru: return 3 * n * m + 4 * n + (m == n ? 0 : n * m);
    case CellKind::kQrnn: return 3 * n * (2 * m + 1);
    case CellKind::kTrnn: return 2 * n * (m + 1);
    case CellKind::kCfn: return 2 * n * (n + m + 1) + n * m;
  }
  return 0;
}

}  // namespace

std::size_t param_count(const CellSpec& spec, bool stacked) {
  spec.validate();
  const auto m = std::size_t(spec.input_dim);
  const auto n = std::size_t(spec.units);
  if (!stacked) return single_count(spec.kind, m, n);
  return single_count(spec.kind, m, m) + single_count(spec.kind, m, n);
}

CellState zero_state(const CellSpec& spec, int batch) {
  CellState s;
  s.h = Matrix::Zero(spec.units, batch);
  if (has_cell_state(spec.kind)) s.c = Matrix::Zero(spec.units, batch);
  return s;
}

// ---------------------------------------------------------------------------
// Recurrences

namespace {

using Cache = std::array<Matrix, 7>;

Matrix sigmoid(const Matrix& a) { return (1.0 / (1.0 + (-a.array()).exp())).matrix(); }
Matrix tanh_of(const Matrix& a) { return a.array().tanh().matrix(); }

Matrix affine(const Matrix& w, const Matrix& b, const Matrix& z) {
  Matrix out = w * z;
  out.colwise() += b.col(0);
  return out;
}

Matrix vstack(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out << top, bottom;
  return out;
}

// Derivative helpers on stored activations.
Matrix dsigmoid(const Matrix& grad, const Matrix& s) { return (grad.array() * s.array() * (1.0 - s.array())).matrix(); }
Matrix dtanh(const Matrix& grad, const Matrix& t) { return (grad.array() * (1.0 - t.array().square())).matrix(); }
Matrix mul(const Matrix& a, const Matrix& b) { return (a.array() * b.array()).matrix(); }

void accumulate(Matrix& gw, Matrix& gb, const Matrix& da, const Matrix& z) {
  gw.noalias() += da * z.transpose();
  gb.col(0) += da.rowwise().sum();
}

struct StepGrad {
  Matrix dh;       // in: dL/dh_t, out: dL/dh_{t-1}
  Matrix dc;       // same for the cell state (empty when absent)
  Matrix dx;       // out: dL/dx_t
  Matrix dx_prev;  // out: dL/dx_{t-1} (QRNN only)
};

void step_forward(const CellSpec& s, const ParamSet& p, const Matrix& x, const Matrix& x_prev, CellState& st,
                  Cache& c) {
  const int n = s.units;
  switch (s.kind) {
    case CellKind::kLstm: {
      Matrix z = vstack(st.h, x);
      const Matrix a = affine(p[0], p[1], z);
      Matrix i = sigmoid(a.topRows(n));
      Matrix f = sigmoid(a.middleRows(n, n));
      Matrix g = tanh_of(a.middleRows(2 * n, n));
      Matrix o = sigmoid(a.bottomRows(n));
      Matrix c_new = mul(f, st.c) + mul(i, g);
      Matrix tc = tanh_of(c_new);
      st.h = mul(o, tc);
      c = {std::move(z), std::move(i), std::move(f), std::move(g), std::move(o), std::move(st.c), std::move(tc)};
      st.c = std::move(c_new);
      break;
    }
    case CellKind::kGru: {
      Matrix z = vstack(st.h, x);
      const Matrix zr = sigmoid(affine(p[0], p[1], z));
      Matrix u = zr.topRows(n);
      Matrix r = zr.bottomRows(n);
      Matrix zc = vstack(mul(r, st.h), x);
      Matrix cand = tanh_of(affine(p[2], p[3], zc));
      Matrix h_new = st.h + mul(u, cand - st.h);
      c = {std::move(z), std::move(u), std::move(r), std::move(zc), std::move(cand), std::move(st.h), Matrix()};
      st.h = std::move(h_new);
      break;
    }
    case CellKind::kMgu: {
      Matrix z = vstack(st.h, x);
      Matrix f = sigmoid(affine(p[0], p[1], z));
      Matrix zc = vstack(mul(f, st.h), x);
      Matrix cand = tanh_of(affine(p[2], p[3], zc));
      Matrix h_new = st.h + mul(f, cand - st.h);
      c = {std::move(z), std::move(f), std::move(zc), std::move(cand), std::move(st.h), Matrix(), Matrix()};
      st.h = std::move(h_new);
      break;
    }
    case CellKind::kRan: {
      Matrix ct = p[0] * x;
      Matrix z = vstack(st.h, x);
      const Matrix a = affine(p[1], p[2], z);
      Matrix i = sigmoid(a.topRows(n));
      Matrix f = sigmoid(a.bottomRows(n));
      Matrix c_new = mul(i, ct) + mul(f, st.c);
      st.h = tanh_of(c_new);
      c = {std::move(z), std::move(ct), std::move(i), std::move(f), std::move(st.c), st.h, Matrix()};
      st.c = std::move(c_new);
      break;
    }
    case CellKind::kSru: {
      const Matrix a = p[0] * x;
      const auto& v = p[1];
      const auto& b = p[2];
      Matrix xt = a.topRows(n);
      Matrix af = a.middleRows(n, n) + v.topRows(n).asDiagonal() * st.c;
      af.colwise() += b.topRows(n).col(0);
      Matrix ar = a.bottomRows(n) + v.bottomRows(n).asDiagonal() * st.c;
      ar.colwise() += b.bottomRows(n).col(0);
      Matrix f = sigmoid(af);
      Matrix r = sigmoid(ar);
      Matrix c_new = xt + mul(f, st.c - xt);
      Matrix hw = s.input_dim == n ? x : Matrix(p[3] * x);
      st.h = hw + mul(r, c_new - hw);
      c = {std::move(xt), std::move(f), std::move(r), std::move(st.c), c_new, std::move(hw), Matrix()};
      st.c = std::move(c_new);
      break;
    }
    case CellKind::kQrnn: {
      Matrix a = p[0] * x + p[1] * x_prev;
      a.colwise() += p[2].col(0);
      Matrix zt = tanh_of(a.topRows(n));
      Matrix f = sigmoid(a.middleRows(n, n));
      Matrix o = sigmoid(a.bottomRows(n));
      Matrix c_new = zt + mul(f, st.c - zt);
      st.h = mul(o, c_new);
      c = {std::move(zt), std::move(f), std::move(o), std::move(st.c), c_new, Matrix(), Matrix()};
      st.c = std::move(c_new);
      break;
    }
    case CellKind::kTrnn: {
      Matrix zt = affine(p[0], p[1], x);
      Matrix f = sigmoid(affine(p[2], p[3], x));
      Matrix h_new = zt + mul(f, st.h - zt);
      c = {std::move(zt), std::move(f), std::move(st.h), Matrix(), Matrix(), Matrix(), Matrix()};
      st.h = std::move(h_new);
      break;
    }
    case CellKind::kCfn: {
      Matrix z = vstack(st.h, x);
      const Matrix a = affine(p[0], p[1], z);
      Matrix theta = sigmoid(a.topRows(n));
      Matrix eta = sigmoid(a.bottomRows(n));
      Matrix th = tanh_of(st.h);
      Matrix wx = tanh_of(p[2] * x);
      st.h = mul(theta, th) + mul(eta, wx);
      c = {std::move(z), std::move(theta), std::move(eta), std::move(th), std::move(wx), Matrix(), Matrix()};
      break;
    }
  }
}

void step_backward(const CellSpec& s, const ParamSet& p, const Cache& c, const Matrix& x, const Matrix& x_prev,
                   StepGrad& g, ParamSet& gp) {
  const int n = s.units;
  const int m = s.input_dim;
  const Matrix& dh = g.dh;
  switch (s.kind) {
    case CellKind::kLstm: {
      const auto& [z, i, f, gg, o, c_prev, tc] = c;
      const Matrix dc = g.dc + mul(mul(dh, o), (1.0 - tc.array().square()).matrix());
      Matrix da(4 * n, dh.cols());
      da.topRows(n) = dsigmoid(mul(dc, gg), i);
      da.middleRows(n, n) = dsigmoid(mul(dc, c_prev), f);
      da.middleRows(2 * n, n) = dtanh(mul(dc, i), gg);
      da.bottomRows(n) = dsigmoid(mul(dh, tc), o);
      accumulate(gp[0], gp[1], da, z);
      const Matrix dz = p[0].transpose() * da;
      g.dh = dz.topRows(n);
      g.dx = dz.bottomRows(m);
      g.dc = mul(dc, f);
      break;
    }
    case CellKind::kGru: {
      const auto& [z, u, r, zc, cand, h_prev, unused] = c;
      const Matrix dac = dtanh(mul(dh, u), cand);
      accumulate(gp[2], gp[3], dac, zc);
      const Matrix dzc = p[2].transpose() * dac;
      const Matrix dhr = dzc.topRows(n);
      Matrix da(2 * n, dh.cols());
      da.topRows(n) = dsigmoid(mul(dh, cand - h_prev), u);
      da.bottomRows(n) = dsigmoid(mul(dhr, h_prev), r);
      accumulate(gp[0], gp[1], da, z);
      const Matrix dz = p[0].transpose() * da;
      g.dh = mul(dh, (1.0 - u.array()).matrix()) + mul(dhr, r) + dz.topRows(n);
      g.dx = dzc.bottomRows(m) + dz.bottomRows(m);
      break;
    }
    case CellKind::kMgu: {
      const auto& [z, f, zc, cand, h_prev, u1, u2] = c;
      const Matrix dac = dtanh(mul(dh, f), cand);
      accumulate(gp[2], gp[3], dac, zc);
      const Matrix dzc = p[2].transpose() * dac;
      const Matrix dfh = dzc.topRows(n);
      const Matrix df = mul(dh, cand - h_prev) + mul(dfh, h_prev);
      const Matrix daf = dsigmoid(df, f);
      accumulate(gp[0], gp[1], daf, z);
      const Matrix dz = p[0].transpose() * daf;
      g.dh = mul(dh, (1.0 - f.array()).matrix()) + mul(dfh, f) + dz.topRows(n);
      g.dx = dzc.bottomRows(m) + dz.bottomRows(m);
      break;
    }
    case CellKind::kRan: {
      const auto& [z, ct, i, f, c_prev, h_new, unused] = c;
      const Matrix dc = g.dc + dtanh(dh, h_new);
      const Matrix dct = mul(dc, i);
      gp[0].noalias() += dct * x.transpose();
      Matrix da(2 * n, dh.cols());
      da.topRows(n) = dsigmoid(mul(dc, ct), i);
      da.bottomRows(n) = dsigmoid(mul(dc, c_prev), f);
      accumulate(gp[1], gp[2], da, z);
      const Matrix dz = p[1].transpose() * da;
      g.dh = dz.topRows(n);
      g.dx = p[0].transpose() * dct + dz.bottomRows(m);
      g.dc = mul(dc, f);
      break;
    }
    case CellKind::kSru: {
      const auto& [xt, f, r, c_prev, c_new, hw, unused] = c;
      const Matrix dc = g.dc + mul(dh, r);
      const Matrix dhw = dh - mul(dh, r);
      Matrix da(3 * n, dh.cols());
      da.topRows(n) = dc - mul(dc, f);
      const Matrix daf = dsigmoid(mul(dc, c_prev - xt), f);
      const Matrix dar = dsigmoid(mul(dh, c_new - hw), r);
      da.middleRows(n, n) = daf;
      da.bottomRows(n) = dar;
      gp[0].noalias() += da * x.transpose();
      const auto& v = p[1];
      gp[1].topRows(n).col(0) += mul(daf, c_prev).rowwise().sum();
      gp[1].bottomRows(n).col(0) += mul(dar, c_prev).rowwise().sum();
      gp[2].topRows(n).col(0) += daf.rowwise().sum();
      gp[2].bottomRows(n).col(0) += dar.rowwise().sum();
      g.dc = mul(dc, f) + v.topRows(n).asDiagonal() * daf + v.bottomRows(n).asDiagonal() * dar;
      g.dx = p[0].transpose() * da;
      if (m == n) {
        g.dx += dhw;
      } else {
        gp[3].noalias() += dhw * x.transpose();
        g.dx += p[3].transpose() * dhw;
      }
      g.dh = Matrix::Zero(n, dh.cols());
      break;
    }
    case CellKind::kQrnn: {
      const auto& [zt, f, o, c_prev, c_new, u1, u2] = c;
      const Matrix dc = g.dc + mul(dh, o);
      Matrix da(3 * n, dh.cols());
      da.topRows(n) = dtanh(dc - mul(dc, f), zt);
      da.middleRows(n, n) = dsigmoid(mul(dc, c_prev - zt), f);
      da.bottomRows(n) = dsigmoid(mul(dh, c_new), o);
      gp[0].noalias() += da * x.transpose();
      gp[1].noalias() += da * x_prev.transpose();
      gp[2].col(0) += da.rowwise().sum();
      g.dx = p[0].transpose() * da;
      g.dx_prev = p[1].transpose() * da;
      g.dc = mul(dc, f);
      g.dh = Matrix::Zero(n, dh.cols());
      break;
    }
    case CellKind::kTrnn: {
      const auto& [zt, f, h_prev, u1, u2, u3, u4] = c;
      const Matrix dzt = dh - mul(dh, f);
      const Matrix daf = dsigmoid(mul(dh, h_prev - zt), f);
      accumulate(gp[0], gp[1], dzt, x);
      accumulate(gp[2], gp[3], daf, x);
      g.dx = p[0].transpose() * dzt + p[2].transpose() * daf;
      g.dh = mul(dh, f);
      break;
    }
    case CellKind::kCfn: {
      const auto& [z, theta, eta, th, wx, u1, u2] = c;
      const Matrix dawx = dtanh(mul(dh, eta), wx);
      gp[2].noalias() += dawx * x.transpose();
      Matrix da(2 * n, dh.cols());
      da.topRows(n) = dsigmoid(mul(dh, th), theta);
      da.bottomRows(n) = dsigmoid(mul(dh, wx), eta);
      accumulate(gp[0], gp[1], da, z);
      const Matrix dz = p[0].transpose() * da;
      g.dh = dtanh(mul(dh, theta), th) + dz.topRows(n);
      g.dx = p[2].transpose() * dawx + dz.bottomRows(m);
      break;
    }
  }
}

void check_params(const CellSpec& spec, const ParamSet& params) {
  const auto slots = layout(spec);
  bool ok = slots.size() == params.size();
  for (std::size_t i = 0; ok && i < slots.size(); ++i) {
    ok = params[i].rows() == slots[i].rows && params[i].cols() == slots[i].cols;
  }
  if (!ok) fail(ErrorCode::kShapeMismatch, "parameters do not match the " + std::string(to_string(spec.kind)) + " layout");
}

}  // namespace

CellOutput cell_forward(const CellSpec& spec, const ParamSet& params, const std::vector<Matrix>& x_seq,
                        const CellState& init) {
  spec.validate();
  check_params(spec, params);
  if (x_seq.empty()) fail(ErrorCode::kShapeMismatch, "cell_forward: empty input sequence");
  const auto batch = x_seq.front().cols();
  for (const auto& x : x_seq) {
    if (x.rows() != spec.input_dim || x.cols() != batch) fail(ErrorCode::kShapeMismatch, "cell_forward: input shape");
  }
  if (init.h.rows() != spec.units || init.h.cols() != batch ||
      (has_cell_state(spec.kind) && (init.c.rows() != spec.units || init.c.cols() != batch))) {
    fail(ErrorCode::kShapeMismatch, "cell_forward: initial state shape");
  }

  CellOutput out;
  out.trace.spec = spec;
  out.trace.params_version = params.version();
  out.trace.batch = int(batch);
  out.trace.inputs = x_seq;
  out.trace.steps.resize(x_seq.size());
  out.h_seq.reserve(x_seq.size());

  CellState st = init;
  const Matrix zero_x = Matrix::Zero(spec.input_dim, batch);
  for (std::size_t t = 0; t < x_seq.size(); ++t) {
    step_forward(spec, params, x_seq[t], t > 0 ? x_seq[t - 1] : zero_x, st, out.trace.steps[t]);
    if (!st.h.allFinite() || (st.c.size() && !st.c.allFinite())) {
      fail(ErrorCode::kDiverged, "cell_forward: non-finite activation at step " + std::to_string(t));
    }
    out.h_seq.push_back(st.h);
  }
  out.final_state = std::move(st);
  return out;
}

CellGradients cell_backward(const CellSpec& spec, const ParamSet& params, const CellTrace& trace,
                            const std::vector<Matrix>& grad_h_seq, const CellState* grad_final) {
  if (!(trace.spec == spec) || trace.params_version != params.version() || trace.steps.size() != trace.inputs.size()) {
    fail(ErrorCode::kStaleState, "cell_backward: trace does not belong to these parameters");
  }
  check_params(spec, params);
  const std::size_t steps = trace.steps.size();
  if (grad_h_seq.size() != steps) fail(ErrorCode::kShapeMismatch, "cell_backward: gradient sequence length");
  const int n = spec.units;
  const int batch = trace.batch;

  CellGradients out;
  out.params = params.zeros_like();
  out.x_seq.assign(steps, Matrix::Zero(spec.input_dim, batch));

  StepGrad g;
  g.dh = Matrix::Zero(n, batch);
  if (has_cell_state(spec.kind)) g.dc = Matrix::Zero(n, batch);
  if (grad_final) {
    if (grad_final->h.size()) g.dh += grad_final->h;
    if (grad_final->c.size() && g.dc.size()) g.dc += grad_final->c;
  }
  const Matrix zero_x = Matrix::Zero(spec.input_dim, batch);
  for (std::size_t k = steps; k-- > 0;) {
    if (grad_h_seq[k].size()) {
      if (grad_h_seq[k].rows() != n || grad_h_seq[k].cols() != batch) {
        fail(ErrorCode::kShapeMismatch, "cell_backward: gradient shape");
      }
      g.dh += grad_h_seq[k];
    }
    const Matrix& x_prev = k > 0 ? trace.inputs[k - 1] : zero_x;
    step_backward(spec, params, trace.steps[k], trace.inputs[k], x_prev, g, out.params);
    out.x_seq[k] += g.dx;
    if (spec.kind == CellKind::kQrnn && k > 0) out.x_seq[k - 1] += g.dx_prev;
  }
  out.init.h = std::move(g.dh);
  out.init.c = std::move(g.dc);
  return out;
}

// ---------------------------------------------------------------------------
// Stacks and heads

RecurrentStack RecurrentStack::create(CellKind kind, int input_dim, int units, bool stacked, Rng& rng) {
  RecurrentStack net;
  if (stacked) net.specs.push_back({kind, input_dim, input_dim});
  net.specs.push_back({kind, input_dim, units});
  for (const auto& s : net.specs) net.params.push_back(init_cell_params(s, rng));
  return net;
}

std::size_t RecurrentStack::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.scalar_count();
  return n;
}

StackOutput stack_forward(const RecurrentStack& net, const std::vector<Matrix>& x_seq) {
  if (x_seq.empty()) fail(ErrorCode::kShapeMismatch, "stack_forward: empty sequence");
  StackOutput out;
  const std::vector<Matrix>* input = &x_seq;
  for (std::size_t l = 0; l < net.specs.size(); ++l) {
    out.layers.push_back(
        cell_forward(net.specs[l], net.params[l], *input, zero_state(net.specs[l], int(x_seq.front().cols()))));
    input = &out.layers.back().h_seq;
  }
  return out;
}

StackGradients stack_backward(const RecurrentStack& net, const StackOutput& fwd, const Matrix& grad_final_h) {
  StackGradients out;
  out.params.resize(net.specs.size());
  std::vector<Matrix> grad_h(fwd.layers.back().h_seq.size());
  grad_h.back() = grad_final_h;
  for (std::size_t l = net.specs.size(); l-- > 0;) {
    auto g = cell_backward(net.specs[l], net.params[l], fwd.layers[l].trace, grad_h);
    out.params[l] = std::move(g.params);
    grad_h = std::move(g.x_seq);
  }
  out.x_seq = std::move(grad_h);
  return out;
}

Dense Dense::create(int in, int out, Rng& rng) {
  Dense d;
  d.w = Matrix(out, in);
  d.b = Matrix::Zero(out, 1);
  const double bound = 1.0 / std::sqrt(double(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index c = 0; c < d.w.cols(); ++c) {
    for (Eigen::Index r = 0; r < d.w.rows(); ++r) d.w(r, c) = dist(rng);
  }
  return d;
}

Matrix Dense::forward(const Matrix& x) const { return affine(w, b, x); }

}  // namespace locfuse::nn
