#include <fstream>

#include "locfuse/binary.hpp"
#include "locfuse/cells.hpp"
#include "locfuse/error.hpp"

namespace locfuse::nn {

const Matrix& Checkpoint::tensor(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  fail(ErrorCode::kIo, "checkpoint has no tensor " + std::string(name));
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  binary::Writer w(out);
  w.magic("PFCK");
  w.u32(std::uint32_t(ckpt.specs.size()));
  for (const auto& s : ckpt.specs) {
    w.u8(std::uint8_t(s.kind));
    w.u32(std::uint32_t(s.input_dim));
    w.u32(std::uint32_t(s.units));
  }
  w.u32(std::uint32_t(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.str(t.name);
    w.u32(2);
    w.u32(std::uint32_t(t.value.rows()));
    w.u32(std::uint32_t(t.value.cols()));
    for (Eigen::Index r = 0; r < t.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) w.f64(t.value(r, c));
    }
  }
  if (!out) fail(ErrorCode::kIo, "write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  binary::Reader r(in, path.string());
  r.expect_magic("PFCK");
  Checkpoint ckpt;
  const auto n_specs = r.u32();
  if (n_specs > 64) fail(ErrorCode::kIo, path.string() + ": implausible spec count");
  for (std::uint32_t i = 0; i < n_specs; ++i) {
    CellSpec s;
    const auto kind = r.u8();
    if (kind >= kAllCellKinds.size()) fail(ErrorCode::kIo, path.string() + ": unknown cell kind");
    s.kind = CellKind(kind);
    s.input_dim = int(r.u32());
    s.units = int(r.u32());
    ckpt.specs.push_back(s);
  }
  const auto n_tensors = r.u32();
  if (n_tensors > 4096) fail(ErrorCode::kIo, path.string() + ": implausible tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    Tensor t;
    t.name = r.str();
    const auto rank = r.u32();
    if (rank < 1 || rank > 2) fail(ErrorCode::kIo, path.string() + ": unsupported tensor rank");
    const auto rows = r.u32();
    const auto cols = rank == 2 ? r.u32() : 1u;
    if (std::uint64_t(rows) * cols > (1ull << 26)) fail(ErrorCode::kIo, path.string() + ": tensor too large");
    t.value.resize(rows, cols);
    for (std::uint32_t a = 0; a < rows; ++a) {
      for (std::uint32_t b = 0; b < cols; ++b) t.value(a, b) = r.f64();
    }
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

void append_params(Checkpoint& ckpt, std::string_view prefix, const ParamSet& params) {
  for (const auto& t : params.tensors()) ckpt.tensors.push_back({std::string(prefix) + "." + t.name, t.value});
}

void load_params(const Checkpoint& ckpt, std::string_view prefix, ParamSet& params) {
  for (auto& t : params.tensors()) {
    const Matrix& src = ckpt.tensor(std::string(prefix) + "." + t.name);
    if (src.rows() != t.value.rows() || src.cols() != t.value.cols()) {
      fail(ErrorCode::kShapeMismatch, "checkpoint tensor " + t.name + " has the wrong shape");
    }
    t.value = src;
  }
  params.touch();
}

}  // namespace locfuse::nn
