#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace locfuse::nn {

using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

enum class CellKind : std::uint8_t { kLstm, kGru, kMgu, kRan, kSru, kQrnn, kTrnn, kCfn };

inline constexpr std::array<CellKind, 8> kAllCellKinds = {
    CellKind::kLstm, CellKind::kGru,  CellKind::kMgu,  CellKind::kRan,
    CellKind::kSru,  CellKind::kQrnn, CellKind::kTrnn, CellKind::kCfn};

std::string_view to_string(CellKind kind);
CellKind parse_cell_kind(std::string_view name);

// LSTM, RAN, SRU and QRNN carry a cell state next to h.
bool has_cell_state(CellKind kind);

struct CellSpec {
  CellKind kind = CellKind::kLstm;
  int input_dim = 1;
  int units = 1;

  void validate() const;
  bool operator==(const CellSpec&) const = default;
};

struct Tensor {
  std::string name;
  Matrix value;
};

// Ordered named tensors. Biases are column vectors. version() changes on
// every optimizer update so stale forward traces can be detected.
class ParamSet {
 public:
  void add(std::string name, Matrix value);

  std::size_t size() const { return tensors_.size(); }
  Matrix& operator[](std::size_t i) { return tensors_[i].value; }
  const Matrix& operator[](std::size_t i) const { return tensors_[i].value; }
  Matrix& at(std::string_view name);
  const Matrix& at(std::string_view name) const;
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::vector<Tensor>& tensors() { return tensors_; }

  std::size_t scalar_count() const;
  ParamSet zeros_like() const;
  bool same_layout(const ParamSet& other) const;
  bool all_finite() const;

  std::uint64_t version() const { return version_; }
  void touch();

 private:
  std::vector<Tensor> tensors_;
  std::uint64_t version_ = 0;
};

// Parameter layout of one cell; values drawn from U(-1/sqrt(fan_in),
// 1/sqrt(fan_in)), biases zero except the LSTM/MGU forget bias (1).
ParamSet init_cell_params(const CellSpec& spec, Rng& rng);
ParamSet zero_cell_params(const CellSpec& spec);

// Closed-form trainable-parameter count. A stacked network is a width
// preserving first cell (input_dim -> input_dim units) feeding the
// configured cell (input_dim -> units).
std::size_t param_count(const CellSpec& spec, bool stacked);

// Recurrent state for a batch: units x batch matrices. c is empty for kinds
// without a cell state.
struct CellState {
  Matrix h;
  Matrix c;
};

CellState zero_state(const CellSpec& spec, int batch);

// Activations saved by cell_forward; consumed by cell_backward.
struct CellTrace {
  CellSpec spec;
  std::uint64_t params_version = 0;
  int batch = 0;
  std::vector<Matrix> inputs;
  std::vector<std::array<Matrix, 7>> steps;
};

struct CellOutput {
  std::vector<Matrix> h_seq;  // T entries, units x batch
  CellState final_state;
  CellTrace trace;
};

// x_seq: T entries of input_dim x batch. Throws kShapeMismatch on bad shapes
// and kDiverged when an activation becomes non-finite.
CellOutput cell_forward(const CellSpec& spec, const ParamSet& params, const std::vector<Matrix>& x_seq,
                        const CellState& init);

struct CellGradients {
  ParamSet params;
  std::vector<Matrix> x_seq;
  CellState init;
};

// Exact BPTT. grad_h_seq entries may be empty (treated as zero).
// grad_final optionally carries dL/d(final state). Throws kStaleState when
// the trace does not belong to (spec, params).
CellGradients cell_backward(const CellSpec& spec, const ParamSet& params, const CellTrace& trace,
                            const std::vector<Matrix>& grad_h_seq, const CellState* grad_final = nullptr);

// One or two cells; the stacked variant's first cell keeps the input width.
struct RecurrentStack {
  std::vector<CellSpec> specs;
  std::vector<ParamSet> params;

  static RecurrentStack create(CellKind kind, int input_dim, int units, bool stacked, Rng& rng);
  int output_dim() const { return specs.back().units; }
  std::size_t scalar_count() const;
};

struct StackOutput {
  std::vector<CellOutput> layers;
  const Matrix& final_h() const { return layers.back().final_state.h; }
};

StackOutput stack_forward(const RecurrentStack& net, const std::vector<Matrix>& x_seq);

struct StackGradients {
  std::vector<ParamSet> params;
  std::vector<Matrix> x_seq;
};

// Gradient of a loss that depends only on the last layer's final h.
StackGradients stack_backward(const RecurrentStack& net, const StackOutput& fwd, const Matrix& grad_final_h);

// Affine head y = w x + b.
struct Dense {
  Matrix w;
  Matrix b;  // out x 1

  static Dense create(int in, int out, Rng& rng);
  Matrix forward(const Matrix& x) const;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  ParamSet m;
  ParamSet v;
  long step = 0;
};

AdamState make_adam_state(const ParamSet& params);

// Bias-corrected Adam without weight decay. Increments state.step before the
// update. Throws kDiverged on non-finite gradients.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, const AdamConfig& config);

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 50;
  int iterations = 5000;
  std::uint64_t seed = 0;

  void validate() const;
};

// Copy-memory task: a prefix of random symbols, a blank delay, a trigger,
// then the prefix must be reproduced. Symbols are 1..n_symbols, blank 0,
// trigger n_symbols + 1.
struct CopyMemoryBatch {
  int delay = 0;
  int n_symbols = 0;
  int prefix = 0;
  int length = 0;
  std::vector<std::vector<int>> inputs;   // batch x length
  std::vector<std::vector<int>> targets;  // batch x length

  int blank() const { return 0; }
  int trigger() const { return n_symbols + 1; }
  int vocabulary() const { return n_symbols + 2; }
  // One-hot input sequence: length entries of vocabulary x batch.
  std::vector<Matrix> one_hot_inputs() const;
};

CopyMemoryBatch copy_memory_batch(int delay, int n_symbols, int batch, std::uint64_t seed, int prefix = 10);

// Binary checkpoint, little-endian: "PFCK", u32 spec count, per spec
// (u8 kind, u32 input_dim, u32 units), u32 tensor count, per tensor
// (u32 name length, name, u32 rank, u32 dims[rank], f64 row-major payload).
struct Checkpoint {
  std::vector<CellSpec> specs;
  std::vector<Tensor> tensors;

  const Matrix& tensor(std::string_view name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Appends params under "<prefix>.<name>" and reads them back by layout.
void append_params(Checkpoint& ckpt, std::string_view prefix, const ParamSet& params);
void load_params(const Checkpoint& ckpt, std::string_view prefix, ParamSet& params);

}  // namespace locfuse::nn
